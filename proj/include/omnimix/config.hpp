#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "omnimix/ops.hpp"

namespace omnimix {

enum class FinalActivation { tanh, none };

/// Table-3 style switches. Each one is independent of the others.
struct Ablations {
  bool plain_bn = false;          // batch norm without class conditioning
  bool no_dis_rec = false;        // drop the discriminator reconstruction loss
  bool no_channel_loss = false;   // drop the channel adversarial loss
  bool single_input = false;      // condition enters block 1 only
  bool no_mixer_block1 = false;   // block 1 uses depthwise layers
  bool operator==(const Ablations&) const = default;
};

struct GeneratorConfig {
  std::size_t blocks = 5;
  std::size_t base_patch = 16;
  std::vector<std::size_t> widths{128, 64, 32, 16, 8};
  std::size_t z_dim = 64;
  std::size_t num_classes = 24;
  std::size_t height = 64;  // output width is 2 * height
  std::size_t layers_per_block = 4;
  std::size_t dw_kernel = 3;
  FinalActivation final_activation = FinalActivation::tanh;
  VerticalPad vertical_pad = VerticalPad::replicate;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  std::size_t width() const { return 2 * height; }
  /// Patch size of the condition embedding feeding block i (1-based).
  std::size_t condition_patch(std::size_t block) const {
    return std::size_t{1} << (blocks - block);
  }
  bool operator==(const GeneratorConfig&) const = default;

  void validate() const {
    if (blocks < 2) throw ConfigError("generator needs at least 2 blocks");
    if (widths.size() != blocks) {
      throw ConfigError("gen.widths has " + std::to_string(widths.size()) +
                        " entries for " + std::to_string(blocks) + " blocks");
    }
    if (base_patch != (std::size_t{1} << (blocks - 1))) {
      throw ConfigError("gen.base_patch must equal 2^(blocks-1) = " +
                        std::to_string(std::size_t{1} << (blocks - 1)));
    }
    if (height == 0 || height % base_patch != 0) {
      throw ConfigError("gen.height " + std::to_string(height) +
                        " is not divisible by the base patch " +
                        std::to_string(base_patch));
    }
    for (auto w : widths) {
      if (w == 0) throw ConfigError("gen.widths entries must be positive");
    }
    if (z_dim == 0) throw ConfigError("gen.z_dim must be positive");
    if (num_classes == 0) throw ConfigError("gen.num_classes must be positive");
    if (layers_per_block == 0) throw ConfigError("gen.layers_per_block must be positive");
    if (dw_kernel % 2 == 0) {
      throw ConfigError("gen.dw_kernel must be odd, got " + std::to_string(dw_kernel));
    }
    if (!(bn_eps > 0)) throw ConfigError("gen.bn_eps must be positive");
    if (!(bn_momentum > 0 && bn_momentum < 1)) {
      throw ConfigError("gen.bn_momentum must lie in (0, 1)");
    }
  }
};

struct DiscriminatorConfig {
  std::size_t width = 192;
  std::size_t layers = 4;
  std::size_t patch = 16;
  double ln_eps = 1e-5;
  bool operator==(const DiscriminatorConfig&) const = default;
};

struct LossWeights {
  double lambda_ch_g = 0.1;
  double lambda_ch_d = 0.01;
  double gamma_r1 = 10.0;
  double w_adv = 1.0;
  double w_rec = 1.0;
  double w_dis_rec = 1.0;
  bool operator==(const LossWeights&) const = default;

  void validate() const {
    for (double v : {lambda_ch_g, lambda_ch_d, gamma_r1, w_adv, w_rec, w_dis_rec}) {
      if (!(v >= 0)) throw ConfigError("loss weights must be non-negative");
    }
  }
};

/// Snapshot geometry used to build the condition canvas.
struct GeometryConfig {
  double fov_h = 90.0;
  double fov_v = 90.0;
  std::size_t snapshot_px = 0;  // 0: height / 2, matching the canvas sampling
  double eval_fov = 90.0;
  std::size_t eval_px = 0;      // 0: height / 2
  bool operator==(const GeometryConfig&) const = default;
};

struct ModelConfig {
  GeneratorConfig gen;
  DiscriminatorConfig disc;
  LossWeights loss;
  GeometryConfig geometry;
  Ablations ablate;
  bool operator==(const ModelConfig&) const = default;

  std::size_t snapshot_px() const {
    return geometry.snapshot_px ? geometry.snapshot_px : gen.height / 2;
  }
  std::size_t eval_px() const {
    return geometry.eval_px ? geometry.eval_px : gen.height / 2;
  }

  void validate() const {
    gen.validate();
    loss.validate();
    if (disc.patch == 0 || (disc.patch & (disc.patch - 1)) != 0) {
      throw ConfigError("disc.patch must be a power of two");
    }
    if (gen.height % disc.patch != 0) {
      throw ConfigError("disc.patch must divide the image height");
    }
    if (disc.width == 0 || disc.layers == 0) {
      throw ConfigError("disc.width and disc.layers must be positive");
    }
  }
};

struct TrainConfig {
  std::size_t iterations = 3000;
  std::size_t batch_size = 16;
  double lr_g = 2e-4;
  double lr_d = 2e-4;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  bool roll_augment = true;   // roll discriminator inputs
  bool roll_dataset = true;   // roll panoramas before snapshot extraction
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  std::size_t sample_every = 0;      // 0: never
  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
    if (lr_g < 0 || lr_d < 0) throw ConfigError("learning rates must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  bool operator==(const RunConfig&) const = default;
};

// ---------------------------------------------------------------------------
// key = value text form. Lines starting with '#' are comments. Lists are
// comma separated. Unknown keys are rejected.

namespace detail {

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  // Shortest representation that parses back to the same double.
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, end);
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config key '" + key + "' expects true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, trim(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "' expects a list");
  return out;
}

template <typename Visitor>
void visit_fields(RunConfig& c, Visitor&& v) {
  auto& g = c.model.gen;
  v.size("gen.blocks", g.blocks);
  v.size("gen.base_patch", g.base_patch);
  v.list("gen.widths", g.widths);
  v.size("gen.z_dim", g.z_dim);
  v.size("gen.num_classes", g.num_classes);
  v.size("gen.height", g.height);
  v.size("gen.layers_per_block", g.layers_per_block);
  v.size("gen.dw_kernel", g.dw_kernel);
  v.final_activation("gen.final_activation", g.final_activation);
  v.vertical_pad("gen.vertical_pad", g.vertical_pad);
  v.real("gen.bn_eps", g.bn_eps);
  v.real("gen.bn_momentum", g.bn_momentum);
  auto& d = c.model.disc;
  v.size("disc.width", d.width);
  v.size("disc.layers", d.layers);
  v.size("disc.patch", d.patch);
  v.real("disc.ln_eps", d.ln_eps);
  auto& l = c.model.loss;
  v.real("loss.lambda_ch_g", l.lambda_ch_g);
  v.real("loss.lambda_ch_d", l.lambda_ch_d);
  v.real("loss.gamma_r1", l.gamma_r1);
  v.real("loss.w_adv", l.w_adv);
  v.real("loss.w_rec", l.w_rec);
  v.real("loss.w_dis_rec", l.w_dis_rec);
  auto& geo = c.model.geometry;
  v.real("geometry.fov_h", geo.fov_h);
  v.real("geometry.fov_v", geo.fov_v);
  v.size("geometry.snapshot_px", geo.snapshot_px);
  v.real("geometry.eval_fov", geo.eval_fov);
  v.size("geometry.eval_px", geo.eval_px);
  auto& a = c.model.ablate;
  v.flag("ablate.plain_bn", a.plain_bn);
  v.flag("ablate.no_dis_rec", a.no_dis_rec);
  v.flag("ablate.no_channel_loss", a.no_channel_loss);
  v.flag("ablate.single_input", a.single_input);
  v.flag("ablate.no_mixer_block1", a.no_mixer_block1);
  auto& t = c.train;
  v.size("train.iterations", t.iterations);
  v.size("train.batch_size", t.batch_size);
  v.real("train.lr_g", t.lr_g);
  v.real("train.lr_d", t.lr_d);
  v.real("train.beta1", t.beta1);
  v.real("train.beta2", t.beta2);
  v.real("train.adam_eps", t.adam_eps);
  v.flag("train.roll_augment", t.roll_augment);
  v.flag("train.roll_dataset", t.roll_dataset);
  v.u64("train.seed", t.seed);
  v.size("train.checkpoint_every", t.checkpoint_every);
  v.size("train.sample_every", t.sample_every);
}

struct Writer {
  std::ostringstream out;
  void size(const char* k, std::size_t v) { out << k << " = " << v << '\n'; }
  void u64(const char* k, std::uint64_t v) { out << k << " = " << v << '\n'; }
  void real(const char* k, double v) { out << k << " = " << format_double(v) << '\n'; }
  void flag(const char* k, bool v) { out << k << " = " << (v ? "true" : "false") << '\n'; }
  void list(const char* k, const std::vector<std::size_t>& v) {
    out << k << " = ";
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << v[i];
    out << '\n';
  }
  void final_activation(const char* k, FinalActivation v) {
    out << k << " = " << (v == FinalActivation::tanh ? "tanh" : "none") << '\n';
  }
  void vertical_pad(const char* k, VerticalPad v) {
    out << k << " = " << (v == VerticalPad::replicate ? "replicate" : "zero") << '\n';
  }
};

struct Setter {
  const std::string& key;
  const std::string& value;
  bool matched = false;
  bool hit(const char* k) {
    if (key != k) return false;
    matched = true;
    return true;
  }
  void size(const char* k, std::size_t& v) { if (hit(k)) v = parse_size(key, value); }
  void u64(const char* k, std::uint64_t& v) { if (hit(k)) v = parse_u64(key, value); }
  void real(const char* k, double& v) { if (hit(k)) v = parse_double(key, value); }
  void flag(const char* k, bool& v) { if (hit(k)) v = parse_bool(key, value); }
  void list(const char* k, std::vector<std::size_t>& v) { if (hit(k)) v = parse_list(key, value); }
  void final_activation(const char* k, FinalActivation& v) {
    if (!hit(k)) return;
    if (value == "tanh") v = FinalActivation::tanh;
    else if (value == "none") v = FinalActivation::none;
    else throw ConfigError("gen.final_activation must be tanh or none");
  }
  void vertical_pad(const char* k, VerticalPad& v) {
    if (!hit(k)) return;
    if (value == "replicate") v = VerticalPad::replicate;
    else if (value == "zero") v = VerticalPad::zero;
    else throw ConfigError("gen.vertical_pad must be replicate or zero");
  }
};

struct KeyLister {
  std::vector<std::string> keys;
  template <typename V>
  void add(const char* k, V&) { keys.emplace_back(k); }
  void size(const char* k, std::size_t& v) { add(k, v); }
  void u64(const char* k, std::uint64_t& v) { add(k, v); }
  void real(const char* k, double& v) { add(k, v); }
  void flag(const char* k, bool& v) { add(k, v); }
  void list(const char* k, std::vector<std::size_t>& v) { add(k, v); }
  void final_activation(const char* k, FinalActivation& v) { add(k, v); }
  void vertical_pad(const char* k, VerticalPad& v) { add(k, v); }
};

}  // namespace detail

/// Canonical key = value text; parse_config(to_config_text(c)) == c.
inline std::string to_config_text(const RunConfig& config) {
  RunConfig copy = config;
  detail::Writer w;
  detail::visit_fields(copy, w);
  return w.out.str();
}

inline void set_config_value(RunConfig& config, const std::string& key,
                             const std::string& value) {
  detail::Setter s{key, value};
  detail::visit_fields(config, s);
  if (!s.matched) throw ConfigError("unknown config key '" + key + "'");
}

inline std::vector<std::string> config_keys() {
  RunConfig scratch;
  detail::KeyLister lister;
  detail::visit_fields(scratch, lister);
  return lister.keys;
}

/// Applies key = value lines on top of `base`.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto content = detail::trim(line.substr(0, line.find('#')));
    if (content.empty()) continue;
    auto eq = content.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    set_config_value(base, detail::trim(content.substr(0, eq)),
                     detail::trim(content.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

}  // namespace omnimix
