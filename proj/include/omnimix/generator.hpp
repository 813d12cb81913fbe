#pragma once

#include <optional>
#include <string>
#include <vector>

#include "omnimix/config.hpp"
#include "omnimix/layers.hpp"

namespace omnimix {

/// Hierarchical generator: block 1 embeds 2^(N-1) patches of the condition,
/// concatenates the latent, compresses and mixes tokens; blocks 2..N add a
/// finer condition embedding and run depthwise layers. Every block emits an
/// RGB image; those are summed coarse to fine with ×2 bilinear upsampling.
///
/// Parameter names follow block{i}/{layer}/{param}.
template <typename T>
class Generator {
 public:
  struct Block {
    std::optional<Affine<T>> embed;     // condition patch embedding
    std::optional<Affine<T>> compress;  // block 1: [embed ‖ z] → width
    std::vector<SpatialLayer<T>> layers;
    Affine<T> rgb;
    std::optional<Affine<T>> split;     // absent for the last block
  };

  struct BlockOutput {
    Tensor<T> rgb;   // [N, 3, gh, gw]
    Tensor<T> feat;  // [N, 2gh, 2gw, C_next], undefined after the last block
  };

  Generator(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const auto& g = config_.gen;
    const std::size_t h = g.height, w = g.width();
    for (std::size_t i = 1; i <= g.blocks; ++i) {
      const std::string prefix = "block" + std::to_string(i);
      const std::size_t patch = g.condition_patch(i);
      const std::size_t gh = h / patch, gw = w / patch;
      const std::size_t width = g.widths[i - 1];
      Block b;
      if (i == 1 || !config_.ablate.single_input) {
        b.embed = make_affine(params_, prefix + "/embed", 3 * patch * patch, width, rng);
      }
      if (i == 1) {
        b.compress = make_affine(params_, prefix + "/compress", width + g.z_dim, width, rng);
      }
      const bool mixer = i == 1 && !config_.ablate.no_mixer_block1;
      SpatialLayerShape shape{gh, gw, width, gh * gw, 2 * width, g.dw_kernel};
      auto make_norm = [&](const std::string& name) {
        return make_cond_batch_norm(params_, name, width, g.num_classes,
                                    !config_.ablate.plain_bn, static_cast<T>(g.bn_eps),
                                    static_cast<T>(g.bn_momentum));
      };
      for (std::size_t l = 0; l < g.layers_per_block; ++l) {
        b.layers.push_back(make_spatial_layer<T>(
            params_, prefix + "/layer" + std::to_string(l),
            mixer ? LayerKind::mixer : LayerKind::depthwise, shape, make_norm,
            PaddingMode{HorizontalPad::circular, g.vertical_pad}, rng));
      }
      b.rgb = make_affine(params_, prefix + "/to_rgb", width, 3, rng);
      if (i < g.blocks) {
        b.split = make_affine(params_, prefix + "/split", width, 4 * g.widths[i], rng);
      }
      blocks_.push_back(std::move(b));
    }
  }

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  std::vector<Block>& blocks() { return blocks_; }

  /// Block 1. `x` is the condition canvas [N,3,H,W], `z` the latent [N,z_dim].
  BlockOutput mixer_block_forward(const Tensor<T>& x, const Tensor<T>& z,
                                  const std::vector<std::size_t>& labels, bool training) {
    check_inputs(x, labels);
    const auto& g = config_.gen;
    if (z.rank() != 2 || z.dim(0) != x.dim(0) || z.dim(1) != g.z_dim) {
      throw ShapeError("latent must be [" + std::to_string(x.dim(0)) + ", " +
                       std::to_string(g.z_dim) + "], got " + to_string(z.shape()));
    }
    Block& b = blocks_[0];
    auto tokens = patch_embed(x, g.condition_patch(1), *b.embed);
    const std::size_t n = x.dim(0), gh = tokens.dim(1), gw = tokens.dim(2);
    auto z_map = expand(reshape(z, Shape{n, 1, 1, g.z_dim}), Shape{n, gh, gw, g.z_dim});
    auto feat = (*b.compress)(concat<T>({tokens, z_map}, 3));
    for (auto& layer : b.layers) feat = spatial_layer(feat, labels, layer, training);
    return finish_block(b, feat);
  }

  /// Block i in 2..N: adds the condition embedding at patch 2^(N-i).
  BlockOutput dw_block_forward(const Tensor<T>& feat, const Tensor<T>& x,
                               const std::vector<std::size_t>& labels, std::size_t i,
                               bool training) {
    const auto& g = config_.gen;
    if (i < 2 || i > g.blocks) {
      throw ConfigError("block index " + std::to_string(i) + " outside [2, " +
                        std::to_string(g.blocks) + "]");
    }
    check_inputs(x, labels);
    const std::size_t patch = g.condition_patch(i);
    const std::size_t gh = g.height / patch, gw = g.width() / patch;
    if (feat.rank() != 4 || feat.dim(1) != gh || feat.dim(2) != gw ||
        feat.dim(3) != g.widths[i - 1]) {
      throw ConfigError("block " + std::to_string(i) + " expects features [N, " +
                        std::to_string(gh) + ", " + std::to_string(gw) + ", " +
                        std::to_string(g.widths[i - 1]) + "], got " + to_string(feat.shape()));
    }
    Block& b = blocks_[i - 1];
    Tensor<T> h = feat;
    if (b.embed) h = add(h, patch_embed(x, patch, *b.embed));
    for (auto& layer : b.layers) h = spatial_layer(h, labels, layer, training);
    return finish_block(b, h);
  }

  /// Full generator: [N,3,H,W] condition → [N,3,H,W] image.
  Tensor<T> generate(const Tensor<T>& x, const Tensor<T>& z,
                     const std::vector<std::size_t>& labels, bool training) {
    auto out = mixer_block_forward(x, z, labels, training);
    Tensor<T> rgb = out.rgb;
    Tensor<T> feat = out.feat;
    for (std::size_t i = 2; i <= config_.gen.blocks; ++i) {
      auto next = dw_block_forward(feat, x, labels, i, training);
      rgb = add(upsample2x(rgb), next.rgb);
      feat = next.feat;
    }
    return config_.gen.final_activation == FinalActivation::tanh ? tanh(rgb) : rgb;
  }

  /// Standard-normal latent batch.
  Tensor<T> sample_latent(std::size_t batch, Rng& rng) const {
    return randn<T>(Shape{batch, config_.gen.z_dim}, rng);
  }

 private:
  void check_inputs(const Tensor<T>& x, const std::vector<std::size_t>& labels) const {
    const auto& g = config_.gen;
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != g.height || x.dim(3) != g.width()) {
      throw ShapeError("condition canvas must be [N, 3, " + std::to_string(g.height) + ", " +
                       std::to_string(g.width()) + "], got " + to_string(x.shape()));
    }
    if (labels.size() != x.dim(0)) {
      throw ShapeError("expected one scene label per batch element");
    }
    for (auto l : labels) {
      if (l >= g.num_classes) {
        throw std::out_of_range("scene label " + std::to_string(l) + " outside [0, " +
                                std::to_string(g.num_classes) + ")");
      }
    }
  }

  BlockOutput finish_block(Block& b, const Tensor<T>& feat) {
    BlockOutput out;
    out.rgb = to_rgb(feat, b.rgb);
    if (b.split) out.feat = patch_split(feat, *b.split);
    return out;
  }

  ModelConfig config_;
  ParameterSet<T> params_;
  std::vector<Block> blocks_;
};

}  // namespace omnimix
