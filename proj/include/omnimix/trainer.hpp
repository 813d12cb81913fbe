#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "omnimix/checkpoint.hpp"
#include "omnimix/dataset.hpp"
#include "omnimix/discriminator.hpp"
#include "omnimix/generator.hpp"
#include "omnimix/losses.hpp"
#include "omnimix/optim.hpp"

namespace omnimix {

/// Snapshot pose used to build conditions: straight ahead at the horizon.
inline CameraPose condition_pose(const ModelConfig& config) {
  return CameraPose::make(0.0, 0.0, config.geometry.fov_h, config.geometry.fov_v);
}

/// Condition canvas and mask from a perspective snapshot [3,h,w].
template <typename T>
Embedding<T> condition_from_snapshot(const Tensor<T>& snapshot, const ModelConfig& config) {
  return embed_snapshot(snapshot, condition_pose(config), config.gen.height);
}

template <typename T>
struct PreparedExample {
  Tensor<T> x;     // condition canvas [3,H,W]
  Tensor<T> y;     // rolled target canvas [3,H,W]
  Tensor<T> mask;  // [1,H,W]
  std::size_t label = 0;
  long shift = 0;
};

/// Rolls the panorama by a uniform shift, cuts the straight-ahead snapshot out
/// of the rolled image and embeds it back into an empty canvas.
template <typename T>
PreparedExample<T> prepare_example(const DatasetEntry<T>& entry, const ModelConfig& config,
                                   Rng& rng, bool roll = true) {
  const std::size_t W = config.gen.width();
  if (entry.image.rank() != 3 || entry.image.dim(1) != config.gen.height ||
      entry.image.dim(2) != W) {
    throw DataError(entry.path + ": image has shape " + to_string(entry.image.shape()) +
                    ", expected [3, " + std::to_string(config.gen.height) + ", " +
                    std::to_string(W) + "]");
  }
  PreparedExample<T> ex;
  if (roll) {
    std::uniform_int_distribution<long> dist(0, static_cast<long>(W) - 1);
    ex.shift = dist(rng);
  }
  {
    NoGradGuard no_grad;
    ex.y = ex.shift ? roll_canvas(entry.image, ex.shift) : entry.image;
  }
  const std::size_t px = config.snapshot_px();
  auto snapshot = extract_snapshot(ex.y, condition_pose(config), px, px);
  auto emb = condition_from_snapshot(snapshot, config);
  ex.x = emb.canvas.pixels;
  ex.mask = emb.mask.values;
  ex.label = entry.label;
  return ex;
}

template <typename T>
struct Batch {
  Tensor<T> x;     // [N,3,H,W]
  Tensor<T> y;     // [N,3,H,W]
  Tensor<T> mask;  // [1,H,W], shared: the snapshot pose is fixed
  std::vector<std::size_t> labels;
};

template <typename T>
Batch<T> stack_examples(const std::vector<PreparedExample<T>>& examples) {
  if (examples.empty()) throw ContractError("cannot stack an empty batch");
  const Shape& s = examples[0].x.shape();
  const std::size_t n = examples.size(), per = numel(s);
  std::vector<T> x(n * per), y(n * per);
  Batch<T> b;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = examples[i];
    if (!std::equal(e.mask.data().begin(), e.mask.data().end(), examples[0].mask.data().begin())) {
      throw ContractError("examples in one batch carry different masks");
    }
    std::copy(e.x.data().begin(), e.x.data().end(), x.begin() + i * per);
    std::copy(e.y.data().begin(), e.y.data().end(), y.begin() + i * per);
    b.labels.push_back(e.label);
  }
  b.x = Tensor<T>(Shape{n, s[0], s[1], s[2]}, std::move(x));
  b.y = Tensor<T>(Shape{n, s[0], s[1], s[2]}, std::move(y));
  b.mask = examples[0].mask;
  return b;
}

/// Loss components of one iteration, in insertion order. Components disabled
/// by an ablation are absent rather than zero.
struct StepMetrics {
  std::size_t iteration = 0;
  std::vector<std::pair<std::string, double>> values;

  bool has(const std::string& name) const {
    for (const auto& [k, v] : values) {
      if (k == name) return true;
    }
    return false;
  }
  double at(const std::string& name) const {
    for (const auto& [k, v] : values) {
      if (k == name) return v;
    }
    throw std::out_of_range("no metric named '" + name + "'");
  }
};

/// One "iteration<TAB>name<TAB>value" line per component.
inline void write_metrics(std::ostream& out, const StepMetrics& m) {
  for (const auto& [k, v] : m.values) {
    out << m.iteration << '\t' << k << '\t' << detail::format_double(v) << '\n';
  }
}

struct NonFiniteLoss : std::runtime_error {
  NonFiniteLoss(std::size_t it, std::string comp, double v)
      : std::runtime_error("non-finite loss at iteration " + std::to_string(it) + ": " + comp +
                           " = " + std::to_string(v)),
        iteration(it),
        component(std::move(comp)),
        value(v) {}
  std::size_t iteration;
  std::string component;
  double value;
};

struct FitOptions {
  std::string out_dir;           // checkpoints and samples; empty: nothing written
  std::ostream* log = nullptr;   // metrics lines
};

/// Owns both models, both optimizers and the training RNG.
///
/// Seeds: generator init uses seed, discriminator init seed + 1, the data /
/// latent / augmentation stream seed + 2.
template <typename T>
class Trainer {
 public:
  explicit Trainer(const RunConfig& config)
      : config_(config),
        gen_(config.model, config.train.seed),
        disc_(config.model, config.train.seed + 1),
        rng_(config.train.seed + 2),
        opt_g_(gen_.params(), config.train.lr_g, config.train.beta1, config.train.beta2,
               config.train.adam_eps),
        opt_d_(disc_.params(), config.train.lr_d, config.train.beta1, config.train.beta2,
               config.train.adam_eps) {
    config_.train.validate();
  }

  const RunConfig& config() const { return config_; }
  Generator<T>& generator() { return gen_; }
  Discriminator<T>& discriminator() { return disc_; }
  Rng& rng() { return rng_; }
  std::size_t iteration() const { return iteration_; }

  Batch<T> sample_batch(const Dataset<T>& data) {
    if (data.empty()) throw ContractError("dataset is empty");
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    std::vector<PreparedExample<T>> examples;
    for (std::size_t i = 0; i < config_.train.batch_size; ++i) {
      const auto& entry = data.entries[pick(rng_)];
      if (entry.label >= config_.model.gen.num_classes) {
        throw ConfigError(entry.path + ": label " + std::to_string(entry.label) +
                          " is outside the configured " +
                          std::to_string(config_.model.gen.num_classes) + " classes");
      }
      examples.push_back(prepare_example(entry, config_.model, rng_, config_.train.roll_dataset));
    }
    return stack_examples(examples);
  }

  /// Horizontal shift per sample for a discriminator input; all zero when roll
  /// augmentation is off.
  std::vector<long> draw_shifts(std::size_t n) {
    std::vector<long> shifts(n, 0);
    if (!config_.train.roll_augment) return shifts;
    std::uniform_int_distribution<long> dist(0, static_cast<long>(config_.model.gen.width()) - 1);
    for (auto& s : shifts) s = dist(rng_);
    return shifts;
  }

  /// Discriminator update then generator update.
  StepMetrics train_step(const Batch<T>& batch) {
    const auto& loss = config_.model.loss;
    const auto& ab = config_.model.ablate;
    const std::size_t n = batch.x.dim(0);
    const T lambda_d = ab.no_channel_loss ? T(0) : static_cast<T>(loss.lambda_ch_d);
    const T lambda_g = ab.no_channel_loss ? T(0) : static_cast<T>(loss.lambda_ch_g);
    const bool dis_rec = !ab.no_dis_rec;
    StepMetrics m;
    m.iteration = iteration_ + 1;
    auto note = [&](const std::string& name, const Tensor<T>& v) {
      const double value = static_cast<double>(v.item());
      if (!std::isfinite(value)) throw NonFiniteLoss(m.iteration, name, value);
      m.values.emplace_back(name, value);
    };

    // Discriminator step. The generator runs without a graph.
    Tensor<T> fake;
    {
      NoGradGuard no_grad;
      fake = gen_.generate(batch.x, gen_.sample_latent(n, rng_), batch.labels, true);
    }
    const auto real_shift = draw_shifts(n);
    const auto fake_shift = draw_shifts(n);
    auto real_in = roll(discriminator_input(batch.x, batch.y), 3, real_shift).detach();
    real_in.set_requires_grad(true);
    auto fake_in = roll(discriminator_input(batch.x, fake), 3, fake_shift).detach();

    disc_.params().zero_grad();
    auto real_out = disc_.discriminate(real_in, dis_rec);
    auto fake_out = disc_.discriminate(fake_in, dis_rec);
    auto d_patch = adv_loss_d(real_out.patch_logits, fake_out.patch_logits);
    note("d_adv_patch", d_patch);
    Tensor<T> d_adv = d_patch;
    if (!ab.no_channel_loss) {
      auto d_channel = adv_loss_d(real_out.channel_logits, fake_out.channel_logits);
      note("d_adv_channel", d_channel);
      d_adv = combine_adv(d_patch, d_channel, lambda_d);
    }
    note("d_adv", d_adv);
    Tensor<T> d_total = scale(d_adv, static_cast<T>(loss.w_adv));
    if (dis_rec) {
      auto d_rec = scale(add(rec_loss_d(real_in, real_out.reconstruction),
                             rec_loss_d(fake_in, fake_out.reconstruction)),
                         T(0.5));
      note("d_dis_rec", d_rec);
      d_total = add(d_total, scale(d_rec, static_cast<T>(loss.w_dis_rec)));
    }
    auto gns = Discriminator<T>::grad_norm_sq_from(Discriminator<T>::score(real_out, lambda_d),
                                                   real_in);
    auto r1 = r1_penalty(gns, static_cast<T>(loss.gamma_r1));
    note("d_grad_norm_sq", gns);
    note("d_r1", r1);
    d_total = add(d_total, r1);
    note("d_total", d_total);
    d_total.backward();
    opt_d_.step();
    disc_.params().zero_grad();

    // Generator step with the discriminator frozen.
    gen_.params().zero_grad();
    {
      FreezeGuard<T> frozen(disc_.params());
      auto gen_out = gen_.generate(batch.x, gen_.sample_latent(n, rng_), batch.labels, true);
      auto g_in = roll(discriminator_input(batch.x, gen_out), 3, draw_shifts(n));
      auto out = disc_.discriminate(g_in, dis_rec);
      auto g_patch = adv_loss_g(out.patch_logits);
      note("g_adv_patch", g_patch);
      Tensor<T> g_adv = g_patch;
      if (!ab.no_channel_loss) {
        auto g_channel = adv_loss_g(out.channel_logits);
        note("g_adv_channel", g_channel);
        g_adv = combine_adv(g_patch, g_channel, lambda_g);
      }
      note("g_adv", g_adv);
      auto g_rec = rec_loss_g(gen_out, batch.y, batch.mask);
      note("g_rec", g_rec);
      Tensor<T> g_total = add(scale(g_adv, static_cast<T>(loss.w_adv)),
                              scale(g_rec, static_cast<T>(loss.w_rec)));
      if (dis_rec) {
        auto g_dis_rec = rec_loss_d(g_in, out.reconstruction);
        note("g_dis_rec", g_dis_rec);
        g_total = add(g_total, scale(g_dis_rec, static_cast<T>(loss.w_dis_rec)));
      }
      note("g_total", g_total);
      g_total.backward();
    }
    opt_g_.step();
    gen_.params().zero_grad();
    ++iteration_;
    return m;
  }

  /// Runs until config.train.iterations, writing periodic checkpoints and
  /// sample canvases when an output directory is given.
  Checkpoint fit(const Dataset<T>& data, const FitOptions& options = {}) {
    namespace fs = std::filesystem;
    if (data.empty()) throw ContractError("dataset is empty");
    const auto& t = config_.train;
    if (!options.out_dir.empty()) fs::create_directories(options.out_dir);
    while (iteration_ < t.iterations) {
      auto batch = sample_batch(data);
      auto metrics = train_step(batch);
      if (options.log) write_metrics(*options.log, metrics);
      if (options.out_dir.empty()) continue;
      if (t.checkpoint_every && iteration_ % t.checkpoint_every == 0) {
        save_checkpoint_file(options.out_dir + "/checkpoint_" + std::to_string(iteration_) + ".omx",
                             checkpoint());
      }
      if (t.sample_every && iteration_ % t.sample_every == 0) {
        write_png(options.out_dir + "/sample_" + std::to_string(iteration_) + ".png",
                  sample(batch));
      }
    }
    auto ck = checkpoint();
    if (!options.out_dir.empty()) save_checkpoint_file(options.out_dir + "/final.omx", ck);
    return ck;
  }

  /// Inference-mode canvas [3,H,W] for the first element of a batch.
  Tensor<T> sample(const Batch<T>& batch) {
    NoGradGuard no_grad;
    const auto& g = config_.model.gen;
    auto x0 = narrow(batch.x, 0, 0, 1);
    Rng local(config_.train.seed + 3);
    auto out = gen_.generate(x0, gen_.sample_latent(1, local), {batch.labels[0]}, false);
    return reshape(out, Shape{3, g.height, g.width()});
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config = config_;
    ck.meta["iteration"] = std::to_string(iteration_);
    ck.meta["opt_g_steps"] = std::to_string(opt_g_.steps());
    ck.meta["opt_d_steps"] = std::to_string(opt_d_.steps());
    std::ostringstream state;
    state << rng_;
    ck.meta["rng"] = state.str();
    append_parameters(ck, gen_.params());
    append_parameters(ck, disc_.params());
    append_moments(ck, "opt/g", opt_g_);
    append_moments(ck, "opt/d", opt_d_);
    return ck;
  }

  /// Restores models, optimizer state, RNG and iteration. Every stored tensor
  /// must be claimed by the model or an optimizer.
  void restore(const Checkpoint& ck) {
    using Kind = CheckpointError::Kind;
    if (!(ck.config.model == config_.model)) {
      throw CheckpointError(Kind::version, "checkpoint model config differs from the run config");
    }
    std::vector<std::string> consumed;
    restore_parameters(ck, gen_.params(), &consumed);
    restore_parameters(ck, disc_.params(), &consumed);
    restore_moments(ck, "opt/g", opt_g_, consumed);
    restore_moments(ck, "opt/d", opt_d_, consumed);
    std::sort(consumed.begin(), consumed.end());
    for (const auto& t : ck.tensors) {
      if (!std::binary_search(consumed.begin(), consumed.end(), t.name)) {
        throw CheckpointError(Kind::unknown_tensor, "checkpoint holds unknown tensor '" + t.name + "'");
      }
    }
    auto meta = [&](const std::string& key) {
      auto it = ck.meta.find(key);
      if (it == ck.meta.end()) throw CheckpointError(Kind::truncated, "checkpoint lacks meta." + key);
      return it->second;
    };
    iteration_ = std::stoull(meta("iteration"));
    opt_g_.set_steps(std::stoull(meta("opt_g_steps")));
    opt_d_.set_steps(std::stoull(meta("opt_d_steps")));
    std::istringstream state(meta("rng"));
    state >> rng_;
    if (!state) throw CheckpointError(Kind::truncated, "checkpoint RNG state is corrupt");
  }

 private:
  static void append_moments(Checkpoint& ck, const std::string& prefix, const Adam<T>& opt) {
    for (std::size_t i = 0; i < opt.names().size(); ++i) {
      ck.tensors.push_back(named(prefix + "/m/" + opt.names()[i], opt.first_moments()[i]));
      ck.tensors.push_back(named(prefix + "/v/" + opt.names()[i], opt.second_moments()[i]));
    }
  }

  static void restore_moments(const Checkpoint& ck, const std::string& prefix, Adam<T>& opt,
                              std::vector<std::string>& consumed) {
    using Kind = CheckpointError::Kind;
    auto copy = [&](const std::string& name, Tensor<T>& dst) {
      const NamedTensor* t = ck.find(name);
      if (!t) throw CheckpointError(Kind::missing_tensor, "checkpoint lacks tensor '" + name + "'");
      if (t->shape != dst.shape()) {
        throw CheckpointError(Kind::shape_mismatch, "tensor '" + name + "' has shape " +
                                                        to_string(t->shape) + ", expected " +
                                                        to_string(dst.shape()));
      }
      auto out = dst.mutable_data();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(t->values[i]);
      consumed.push_back(name);
    };
    for (std::size_t i = 0; i < opt.names().size(); ++i) {
      copy(prefix + "/m/" + opt.names()[i], opt.first_moments()[i]);
      copy(prefix + "/v/" + opt.names()[i], opt.second_moments()[i]);
    }
  }

  RunConfig config_;
  Generator<T> gen_;
  Discriminator<T> disc_;
  Rng rng_;
  Adam<T> opt_g_;
  Adam<T> opt_d_;
  std::size_t iteration_ = 0;
};

}  // namespace omnimix
