// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
// fails. Optional arguments select criteria by number, e.g. `acceptance 1 4`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>

#include "omnimix/cost.hpp"
#include "omnimix/gradcheck.hpp"
#include "omnimix/losses.hpp"
#include "support.hpp"

using namespace omnimix;
using namespace omnimix::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

using LD = long double;
LD sigma(LD v) { return 1 / (1 + std::exp(-v)); }
double rel(double got, LD want) {
  return std::abs(got - (double)want) / std::max<double>(std::abs((double)want), 1e-12);
}

Outcome gradient_checks() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream log;
  auto results = run_grad_suites(default_grad_suites(), "", log);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::set<std::string> ops;
  for (const auto& r : results) {
    o.require(r.pass(), r.suite + "/" + r.op + " rel_error " + fmt("%.2e", r.rel_error));
    worst = std::max(worst, r.rel_error / r.tolerance);
    ops.insert(r.op);
  }
  for (const char* op : {"patch_embed", "mlp_mixer_layer", "depthwise_conv_layer", "cond_batch_norm",
                         "patch_split", "to_rgb", "conv_transpose2d", "adv_loss_d", "adv_loss_g",
                         "combine_adv", "rec_loss_g", "rec_loss_d", "r1_penalty"}) {
    o.require(ops.count(op) == 1, std::string("op checked: ") + op);
  }
  o.require(secs < 300, "runtime under 5 min");
  o.note(std::to_string(results.size()) + " ops, worst error/tolerance " + fmt("%.2e", worst) +
         ", " + fmt("%.1f s", secs));
  return o;
}

Outcome loss_oracles() {
  Outcome o;
  auto zero = Tensor<double>::zeros(Shape{4});
  o.require(std::abs(adv_loss_d(zero, zero).item() - 2 * std::log(2.0)) < 1e-15, "D=0.5 gives 2 ln 2");
  o.require(std::abs(adv_loss_g(zero).item() - std::log(2.0)) < 1e-15, "D=0.5 gives ln 2");
  o.require(std::abs(combine_adv(Tensor<double>::scalar(1.0), Tensor<double>::scalar(2.0), 0.1).item() - 1.2) <
                1e-15,
            "combine(1, 2, 0.1) = 1.2");
  Rng rng(11);
  std::uniform_int_distribution<std::size_t> len(1, 16);
  std::uniform_real_distribution<double> u(-5, 5), l(0, 1), gam(0, 20);
  std::bernoulli_distribution coin(0.4);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    auto r = uniform<double>({len(rng)}, rng, -8, 8), f = uniform<double>({len(rng)}, rng, -8, 8);
    LD a = 0, b = 0, g = 0;
    for (double v : r.data()) a -= std::log(sigma(v));
    for (double v : f.data()) b -= std::log(1 - sigma(v)), g -= std::log(sigma(v));
    worst = std::max(worst, rel(adv_loss_d(r, f).item(), a / r.size() + b / f.size()));
    worst = std::max(worst, rel(adv_loss_g(f).item(), g / f.size()));

    const double x = u(rng), y = u(rng), lam = l(rng);
    worst = std::max(worst, rel(combine_adv(Tensor<double>::scalar(x), Tensor<double>::scalar(y), lam).item(),
                                (LD)x + (LD)lam * y));

    auto gen = uniform<double>({2, 3, 2, 4}, rng), tgt = uniform<double>({2, 3, 2, 4}, rng);
    std::vector<double> mv(8);
    for (auto& v : mv) v = coin(rng);
    mv[3] = 1;
    Tensor<double> mask(Shape{1, 2, 4}, mv);
    LD num = 0, cnt = 0, mae = 0;
    for (std::size_t k = 0; k < gen.size(); ++k) {
      num += mv[k % 8] * std::abs((LD)gen[k] - tgt[k]);
      cnt += mv[k % 8];
      mae += std::abs((LD)gen[k] - tgt[k]);
    }
    worst = std::max(worst, rel(rec_loss_g(gen, tgt, mask).item(), num / cnt));
    worst = std::max(worst, rel(rec_loss_d(gen, tgt).item(), mae / gen.size()));

    const double n = 100 * l(rng), gm = gam(rng);
    worst = std::max(worst, rel(r1_penalty(Tensor<double>::scalar(n), gm).item(), (LD)gm / 2 * n));
  }
  o.require(worst < 1e-6, "all oracles below 1e-6");
  o.note("6 losses x 1000 cases, worst relative error " + fmt("%.2e", worst));
  return o;
}

Outcome r1_linear() {
  Outcome o;
  Rng rng(12);
  auto w = uniform<double>({6, 8, 16}, rng);
  LD norm = 0;
  for (double v : w.data()) norm += (LD)v * v;
  const double gamma = 10;
  double worst = 0;
  for (int trial = 0; trial < 3; ++trial) {
    Tensor<double> x = uniform<double>({2, 6, 8, 16}, rng, -3, 3);
    x.set_requires_grad(true);
    auto penalty = r1_penalty(Discriminator<double>::grad_norm_sq_from(sum(mul(x, w)), x), gamma);
    worst = std::max(worst, std::abs(penalty.item() - (double)(gamma / 2 * norm)));
  }
  o.require(worst < 1e-10, "penalty equals (gamma/2)|w|^2");
  o.note("max abs error " + fmt("%.2e", worst) + " over 3 random inputs");
  return o;
}

Outcome geometry() {
  Outcome o;
  std::vector<float> sv(3 * 64 * 64);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 64; ++i)
      for (std::size_t j = 0; j < 64; ++j)
        sv[(c * 64 + i) * 64 + j] = 0.8f * std::sin(0.11f * i + 0.07f * j * (c + 1) + c);
  Tensor<float> snap(Shape{3, 64, 64}, std::move(sv));
  const auto pose = CameraPose::make(0, 0, 90, 90);
  auto emb = embed_snapshot(snap, pose, 256);
  const double p = psnr(extract_snapshot(emb.canvas.pixels, pose, 64, 64), snap);
  o.require(p > 30, "round-trip PSNR > 30 dB");

  auto canvas = synthetic_panorama<float>(32, 0.6);
  auto rolled = roll_canvas(canvas, 32);
  double seam = 0;
  for (double pitch : {0.0, 30.0, -60.0}) {
    auto a = extract_snapshot(canvas, CameraPose::make(180, pitch, 60, 60), 16, 16);
    auto b = extract_snapshot(rolled, CameraPose::make(0, pitch, 60, 60), 16, 16);
    for (std::size_t i = 0; i < a.size(); ++i) seam = std::max(seam, (double)std::abs(a[i] - b[i]));
  }
  o.require(seam < 1e-6, "seam difference < 1e-6");

  auto views = eval_views(canvas, 8, 8);
  auto specs = eval_view_specs();
  o.require(views.size() == 50 && specs.size() == 50, "50 evaluation views");
  const double elevations[] = {90, 45, 0, -45, -90};
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].pitch != elevations[i / 10]) o.require(false, "elevation of view " + specs[i].name);
  }
  o.note("PSNR " + fmt("%.2f dB", p) + ", seam " + fmt("%.1e", seam) + ", " +
         std::to_string(views.size()) + " views " + specs.front().name + ".." + specs.back().name);
  return o;
}

Outcome roll_commutation() {
  Outcome o;
  Rng rng(13);
  ParameterSet<double> p;
  auto make_norm = [&](const std::string& n) {
    return make_cond_batch_norm<double>(p, n, 6, 2, true, 1e-5, 0.1);
  };
  auto layer = make_spatial_layer<double>(p, "l", LayerKind::depthwise, {4, 8, 6, 0, 12, 3},
                                          make_norm, PaddingMode{}, rng);
  for (const auto& e : p.entries()) {
    Tensor<double> t = e.tensor;
    auto u = uniform<double>(t.shape(), rng, 0.2, 1.2);
    std::copy(u.data().begin(), u.data().end(), t.mutable_data().begin());
  }
  auto x = uniform<double>({2, 4, 8, 6}, rng);
  const std::vector<std::size_t> labels{1, 0};
  int checks = 0;
  for (long s : {1L, 2L, 5L, -3L, 8L}) {
    auto a = roll(depthwise_conv_layer(x, labels, layer, false), 2, s);
    auto b = depthwise_conv_layer(roll(x, 2, s), labels, layer, false);
    o.require(a.vec() == b.vec(), "layer commutes, shift " + std::to_string(s));
    auto sa = roll(spatial_branch(x, labels, layer, false), 2, s);
    auto sb = spatial_branch(roll(x, 2, s), labels, layer, false);
    o.require(sa.vec() == sb.vec(), "sublayer commutes, shift " + std::to_string(s));
    auto k = uniform<double>({3, 3, 6}, rng), bias = uniform<double>({6}, rng);
    auto ca = roll(depthwise_conv2d(x, k, bias), 2, s), cb = depthwise_conv2d(roll(x, 2, s), k, bias);
    o.require(ca.vec() == cb.vec(), "convolution commutes, shift " + std::to_string(s));
    checks += 3;
  }
  o.note(std::to_string(checks) + " bitwise comparisons in double");
  return o;
}

// Finite-difference and autodiff sensitivity of the two edge columns to the
// central condition pixel.
std::pair<double, double> edge_sensitivity(const ModelConfig& config) {
  Generator<double> gen(config, 3);
  Rng rng(4);
  const std::size_t H = config.gen.height, W = config.gen.width();
  Tensor<double> x = uniform<double>({1, 3, H, W}, rng);
  auto z = gen.sample_latent(1, rng);
  auto edges = [&](const Tensor<double>& in) {
    return add(sum(narrow(in, 3, 0, 1)), sum(narrow(in, 3, W - 1, 1)));
  };
  double fd = 0;
  {
    NoGradGuard no_grad;
    auto base = gen.generate(x, z, {1}, false);
    auto bumped = x.clone();
    for (std::size_t c = 0; c < 3; ++c) bumped.mutable_data()[(c * H + H / 2) * W + W / 2] += 0.5;
    auto moved = gen.generate(bumped, z, {1}, false);
    for (std::size_t n = 0; n < 3 * H; ++n) {
      fd += std::abs(moved[n * W] - base[n * W]) + std::abs(moved[n * W + W - 1] - base[n * W + W - 1]);
    }
  }
  x.set_requires_grad(true);
  auto g = grad<double>(edges(gen.generate(x, z, {1}, false)), {x})[0];
  double ad = 0;
  for (std::size_t c = 0; c < 3; ++c) ad += std::abs(g[(c * H + H / 2) * W + W / 2]);
  return {fd, ad};
}

Outcome information_propagation() {
  Outcome o;
  ModelConfig c;
  c.gen.blocks = 2;
  c.gen.base_patch = 2;
  c.gen.height = 32;
  c.gen.widths = {16, 8};
  c.gen.z_dim = 4;
  c.gen.num_classes = 2;
  auto [fd_on, ad_on] = edge_sensitivity(c);
  o.require(fd_on > 0 && ad_on > 0, "non-zero sensitivity with block-1 mixer");
  c.ablate.no_mixer_block1 = true;
  c.ablate.single_input = true;
  auto [fd_off, ad_off] = edge_sensitivity(c);
  o.require(fd_off == 0 && ad_off == 0, "zero sensitivity without block-1 mixer");
  o.note("mixer: fd " + fmt("%.3e", fd_on) + " grad " + fmt("%.3e", ad_on) + "; depthwise only: fd " +
         fmt("%.1e", fd_off) + " grad " + fmt("%.1e", ad_off));
  return o;
}

RunConfig smoke_run() {
  RunConfig run;
  run.train.batch_size = 4;
  run.train.iterations = 3000;
  return run;
}

Outcome overfit_smoke() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig run = smoke_run();
  auto data = synthetic_dataset(2, 4, 64);
  Trainer<float> t(run);
  double at10 = 0, tail = 0;
  const std::size_t window = 10;
  Batch<float> last;
  while (t.iteration() < run.train.iterations) {
    last = t.sample_batch(data);
    auto m = t.train_step(last);
    if (m.iteration == 10) at10 = m.at("g_rec");
    if (m.iteration > run.train.iterations - window) tail += m.at("g_rec") / window;
    if (m.iteration % 500 == 0) {
      std::printf("  [smoke] iteration %zu g_rec %.4f g_total %.4f d_total %.4f (%.0f s)\n", m.iteration,
                  m.at("g_rec"), m.at("g_total"), m.at("d_total"), seconds_since(t0));
      std::fflush(stdout);
    }
  }
  const double drop = 1 - tail / at10;
  o.require(drop >= 0.5, "g_rec falls by at least 50%");

  NoGradGuard no_grad;
  auto& gen = t.generator();
  auto x0 = narrow(last.x, 0, 0, 1);
  Rng rng(run.train.seed + 3);
  auto z = gen.sample_latent(1, rng);
  auto a = gen.generate(x0, z, {0}, false), b = gen.generate(x0, z, {1}, false);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
  diff /= a.size();
  o.require(diff > 1e-3, "labels give different outputs");
  const double secs = seconds_since(t0);
  o.require(secs < 3600, "runtime under 60 min");
  o.note("g_rec " + fmt("%.4f", at10) + " at iteration 10 -> " + fmt("%.4f", tail) + " (last 10 mean), drop " +
         fmt("%.1f%%", 100 * drop) + "; label diff " + fmt("%.4f", diff) + "; " + fmt("%.0f s", secs));
  return o;
}

Outcome cost_accounting() {
  Outcome o;
  o.require(affine_cost(4, 3, 1) == Cost{15, 12}, "affine 4->3 has 15 params");
  ModelConfig toy;
  toy.gen.blocks = 3;
  toy.gen.base_patch = 4;
  toy.gen.widths = {6, 4, 5};
  toy.gen.z_dim = 3;
  toy.gen.num_classes = 2;
  toy.gen.height = 8;
  toy.gen.layers_per_block = 2;
  toy.disc.width = 4;
  toy.disc.layers = 1;
  toy.disc.patch = 2;
  std::vector<ModelConfig> configs{toy, ModelConfig{}};
  for (int k = 0; k < 3; ++k) {
    auto c = toy;
    c.ablate.plain_bn = k == 0;
    c.ablate.single_input = k == 1;
    c.ablate.no_mixer_block1 = k == 2;
    configs.push_back(c);
  }
  for (const auto& c : configs) {
    Generator<float> gen(c, 0);
    Rng rng(1);
    auto x = uniform<float>({1, 3, c.gen.height, c.gen.width()}, rng);
    auto z = gen.sample_latent(1, rng);
    NoGradGuard no_grad;
    MacCounter counter;
    gen.generate(x, z, {0}, false);
    const Cost measured{gen.params().parameter_count(), counter.count()};
    o.require(count_params_macs(c) == measured, "generator counts match brute force");
    Discriminator<float> d(c, 0);
    auto dx = uniform<float>({1, 6, c.gen.height, c.gen.width()}, rng);
    MacCounter dcounter;
    d.discriminate(dx, true);
    o.require(discriminator_cost(c).total == Cost{d.params().parameter_count(), dcounter.count()},
              "discriminator counts match brute force");
  }
  const auto def = count_params_macs(ModelConfig{});
  o.note(std::to_string(configs.size()) + " configurations exact; default generator " +
         std::to_string(def.params) + " params, " + std::to_string(def.macs) + " MACs");
  return o;
}

Outcome determinism() {
  Outcome o;
  RunConfig run = small_run();
  auto data = synthetic_dataset(2, 2, 16);
  Trainer<float> a(run), b(run);
  const auto ca = encode_checkpoint(a.fit(data)), cb = encode_checkpoint(b.fit(data));
  o.require(ca == cb, "seeded runs bitwise identical");
  o.require(encode_checkpoint(decode_checkpoint(ca)) == ca, "save/load/save byte-identical");
  auto dir = scratch_dir("acceptance_ckpt");
  save_checkpoint_file((dir / "a.omx").string(), decode_checkpoint(ca));
  o.require(read_file(dir / "a.omx") == ca, "file round trip byte-identical");

  Trainer<float> unbroken(run);
  unbroken.train_step(unbroken.sample_batch(data));
  const auto saved = encode_checkpoint(unbroken.checkpoint());
  auto m1 = unbroken.train_step(unbroken.sample_batch(data));
  Trainer<float> resumed(run);
  resumed.restore(decode_checkpoint(saved));
  auto m2 = resumed.train_step(resumed.sample_batch(data));
  o.require(m1.values == m2.values, "resumed losses identical");
  o.require(encode_checkpoint(resumed.checkpoint()) == encode_checkpoint(unbroken.checkpoint()),
            "resumed state identical");
  o.note("checkpoint " + std::to_string(ca.size()) + " bytes");
  return o;
}

Outcome ablations() {
  Outcome o;
  auto data = synthetic_dataset(2, 4, 64);
  auto base_run = smoke_run();
  base_run.train.iterations = 2;
  auto steps = [&](const RunConfig& run, std::size_t& params) {
    Trainer<float> t(run);
    StepMetrics m;
    while (t.iteration() < run.train.iterations) m = t.train_step(t.sample_batch(data));
    params = t.generator().params().parameter_count();
    return m;
  };
  std::size_t base_params = 0;
  const auto base = steps(base_run, base_params);
  const auto& l = base_run.model.loss;
  auto composition_holds = [&](const StepMetrics& m, const Ablations& ab) {
    const double ch_d = ab.no_channel_loss ? 0 : l.lambda_ch_d * m.at("d_adv_channel");
    const double ch_g = ab.no_channel_loss ? 0 : l.lambda_ch_g * m.at("g_adv_channel");
    const double dr_d = ab.no_dis_rec ? 0 : m.at("d_dis_rec");
    const double dr_g = ab.no_dis_rec ? 0 : m.at("g_dis_rec");
    auto close = [](double a, double b) { return std::abs(a - b) <= 1e-4 * std::max(1.0, std::abs(b)); };
    return close(m.at("d_adv"), m.at("d_adv_patch") + ch_d) && close(m.at("g_adv"), m.at("g_adv_patch") + ch_g) &&
           close(m.at("d_total"), m.at("d_adv") + dr_d + m.at("d_r1")) &&
           close(m.at("g_total"), m.at("g_adv") + m.at("g_rec") + dr_g) && std::isfinite(m.at("g_total")) &&
           std::isfinite(m.at("d_total"));
  };
  o.require(composition_holds(base, {}), "baseline composition");
  const char* names[] = {"plain_bn", "no_dis_rec", "no_channel_loss", "single_input", "no_mixer_block1"};
  std::string summary;
  for (int row = 1; row <= 5; ++row) {
    RunConfig run = base_run;
    auto& ab = run.model.ablate;
    ab.plain_bn = row == 1;
    ab.no_dis_rec = row == 2;
    ab.no_channel_loss = row == 3;
    ab.single_input = row == 4;
    ab.no_mixer_block1 = row == 5;
    std::size_t params = 0;
    const auto m = steps(run, params);
    const std::string tag = "row " + std::to_string(row) + " " + names[row - 1];
    o.require(composition_holds(m, ab), tag + " composition");
    if (row == 2) {
      o.require(!m.has("d_dis_rec") && !m.has("g_dis_rec"), tag + " drops reconstruction terms");
    } else if (row == 3) {
      o.require(!m.has("d_adv_channel") && !m.has("g_adv_channel"), tag + " drops channel terms");
    } else {
      o.require(m.has("d_dis_rec") && m.has("d_adv_channel"), tag + " keeps every term");
      o.require(params != base_params, tag + " changes the generator");
      o.require(m.at("g_total") != base.at("g_total"), tag + " changes the objective value");
    }
    summary += std::string(summary.empty() ? "" : ", ") + names[row - 1] + " g_total " + fmt("%.3f", m.at("g_total"));
  }
  o.note(summary);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient checks", gradient_checks},
      {"loss oracles", loss_oracles},
      {"R1 linear exactness", r1_linear},
      {"geometry round trip, seam, evaluation views", geometry},
      {"circular-padding roll equivariance", roll_commutation},
      {"information propagation", information_propagation},
      {"overfit smoke run", overfit_smoke},
      {"cost accounting", cost_accounting},
      {"determinism and persistence", determinism},
      {"ablation toggles", ablations},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  std::printf("%d failed\n", failures);
  return failures ? 1 : 0;
}
