#pragma once

#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "omnimix/config.hpp"

// Analytic parameter / multiply-accumulate accounting for one image.
//
// Conventions:
//   affine in→out applied at A sites:  params in·out + out,  MACs A·in·out
//   depthwise k×k conv on H×W×C:      params k²·C + C,     MACs k²·H·W·C
//   transposed conv Ci→Co, k×k, on an h×w input:  MACs h·w·Ci·Co·k²
//   normalization, GELU, tanh, bias adds, upsampling, concatenation: 0 MACs
//   running batch-norm statistics are buffers, not parameters.
//
// Activation memory: for every layer, live bytes = condition canvas + RGB
// accumulator at the current scale + layer input + layer output + the widest
// hidden activation inside the layer, all float32. The reported figure is
// the peak over layers.

namespace omnimix {

struct Cost {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  Cost& operator+=(const Cost& o) {
    params += o.params;
    macs += o.macs;
    return *this;
  }
  bool operator==(const Cost&) const = default;
};

inline Cost affine_cost(std::uint64_t in, std::uint64_t out, std::uint64_t sites) {
  return {in * out + out, sites * in * out};
}

inline Cost depthwise_cost(std::uint64_t k, std::uint64_t h, std::uint64_t w, std::uint64_t c) {
  return {k * k * c + c, k * k * h * w * c};
}

inline Cost transposed_conv_cost(std::uint64_t k, std::uint64_t h, std::uint64_t w,
                                 std::uint64_t ci, std::uint64_t co) {
  return {k * k * ci * co + co, h * w * ci * co * k * k};
}

struct NamedCost {
  std::string name;
  Cost cost;
};

struct CostReport {
  std::vector<NamedCost> parts;
  Cost total;
  std::uint64_t activation_peak_bytes = 0;
};

inline CostReport generator_cost(const ModelConfig& config) {
  const auto& g = config.gen;
  g.validate();
  CostReport report;
  const std::uint64_t H = g.height, W = g.width();
  std::uint64_t peak = 0;
  for (std::size_t i = 1; i <= g.blocks; ++i) {
    const std::uint64_t p = g.condition_patch(i);
    const std::uint64_t gh = H / p, gw = W / p, tokens = gh * gw;
    const std::uint64_t c = g.widths[i - 1];
    const std::uint64_t norm_rows = config.ablate.plain_bn ? 1 : g.num_classes;
    Cost block;
    if (i == 1 || !config.ablate.single_input) block += affine_cost(3 * p * p, c, tokens);
    if (i == 1) block += affine_cost(c + g.z_dim, c, tokens);
    const bool mixer = i == 1 && !config.ablate.no_mixer_block1;
    std::uint64_t widest_hidden = tokens * 2 * c;
    for (std::size_t l = 0; l < g.layers_per_block; ++l) {
      block.params += 2 * (2 * norm_rows * c);
      if (mixer) {
        block += affine_cost(tokens, tokens, c);
        block += affine_cost(tokens, tokens, c);
        widest_hidden = std::max(widest_hidden, c * tokens);
      } else {
        block += depthwise_cost(g.dw_kernel, gh, gw, c);
        block += depthwise_cost(g.dw_kernel, gh, gw, c);
      }
      block += affine_cost(c, 2 * c, tokens);
      block += affine_cost(2 * c, c, tokens);
    }
    block += affine_cost(c, 3, tokens);
    if (i < g.blocks) block += affine_cost(c, 4 * g.widths[i], tokens);
    const std::uint64_t live = 3 * H * W + 3 * tokens + 2 * tokens * c + widest_hidden;
    peak = std::max(peak, live);
    report.parts.push_back({"block" + std::to_string(i), block});
    report.total += block;
  }
  report.activation_peak_bytes = peak * sizeof(float);
  return report;
}

inline CostReport discriminator_cost(const ModelConfig& config) {
  const auto& d = config.disc;
  const std::uint64_t H = config.gen.height, W = config.gen.width();
  const std::uint64_t gh = H / d.patch, gw = W / d.patch, tokens = gh * gw, c = d.width;
  CostReport report;
  Cost trunk = affine_cost(6 * d.patch * d.patch, c, tokens);
  for (std::size_t l = 0; l < d.layers; ++l) {
    trunk.params += 2 * 2 * c;
    trunk += affine_cost(tokens, tokens, c);
    trunk += affine_cost(tokens, tokens, c);
    trunk += affine_cost(c, 2 * c, tokens);
    trunk += affine_cost(2 * c, c, tokens);
  }
  trunk.params += 2 * c;
  report.parts.push_back({"trunk", trunk});
  Cost heads = affine_cost(c, 1, tokens);
  heads += affine_cost(tokens, 1, c);
  report.parts.push_back({"heads", heads});
  Cost rec;
  std::uint64_t h = gh, w = gw, in = c;
  std::uint64_t peak = 6 * H * W + 2 * tokens * c + tokens * 2 * c;
  for (std::size_t p = d.patch; p > 1; p /= 2) {
    const bool last = p == 2;
    const std::uint64_t out = last ? 6 : std::max<std::uint64_t>(in / 2, 1);
    rec += transposed_conv_cost(4, h, w, in, out);
    peak = std::max(peak, 6 * H * W + h * w * in + 4 * h * w * out + h * w * 16 * out);
    h *= 2;
    w *= 2;
    in = out;
  }
  report.parts.push_back({"reconstruction", rec});
  report.total = trunk;
  report.total += heads;
  report.total += rec;
  report.activation_peak_bytes = peak * sizeof(float);
  return report;
}

/// Generator parameters and per-image MACs.
inline Cost count_params_macs(const ModelConfig& config) { return generator_cost(config).total; }

/// Machine-readable key = value block followed by a table row
/// "<label> | params [M] | MAC [G]".
inline std::string format_cost_report(const std::string& label, const CostReport& r) {
  std::ostringstream out;
  for (const auto& p : r.parts) {
    out << label << "." << p.name << ".params = " << p.cost.params << "\n";
    out << label << "." << p.name << ".macs = " << p.cost.macs << "\n";
  }
  out << label << ".total.params = " << r.total.params << "\n";
  out << label << ".total.macs = " << r.total.macs << "\n";
  out << label << ".activation_peak_bytes = " << r.activation_peak_bytes << "\n";
  char row[128];
  std::snprintf(row, sizeof(row), "%s | params [M] %.2f | MAC [G] %.2f", label.c_str(),
                static_cast<double>(r.total.params) / 1e6,
                static_cast<double>(r.total.macs) / 1e9);
  out << "# " << row << "\n";
  return out.str();
}

}  // namespace omnimix
