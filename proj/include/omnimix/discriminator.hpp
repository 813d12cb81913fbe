#pragma once

#include <string>
#include <vector>

#include "omnimix/config.hpp"
#include "omnimix/layers.hpp"

namespace omnimix {

template <typename T>
struct DiscriminatorOutput {
  Tensor<T> patch_logits;    // [N, gh, gw]
  Tensor<T> channel_logits;  // [N, C]
  Tensor<T> reconstruction;  // [N, 6, H, W]; undefined if not requested
};

/// Mixer discriminator over the 6-channel stack [condition ‖ image].
/// Layer norm throughout; there is no class-label input.
///
/// Heads:
///   patch  : per-token affine C → 1
///   channel: one affine over token positions T → 1, shared by all channels
///   rec    : stride-2 transposed convolutions back to 6×H×W
///
/// Parameter names follow disc/{layer}/{param}.
template <typename T>
class Discriminator {
 public:
  struct Stage {
    Tensor<T> weight;  // [C_in, 4, 4, C_out]
    Tensor<T> bias;    // [C_out]
  };

  Discriminator(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const auto& d = config_.disc;
    const std::size_t h = config_.gen.height, w = config_.gen.width();
    grid_h_ = h / d.patch;
    grid_w_ = w / d.patch;
    const std::size_t tokens = grid_h_ * grid_w_;
    embed_ = make_affine(params_, "disc/embed", 6 * d.patch * d.patch, d.width, rng);
    const T eps = static_cast<T>(d.ln_eps);
    auto make_norm = [&](const std::string& name) {
      return make_layer_norm(params_, name, d.width, eps);
    };
    SpatialLayerShape shape{grid_h_, grid_w_, d.width, tokens, 2 * d.width, 3};
    for (std::size_t l = 0; l < d.layers; ++l) {
      layers_.push_back(make_spatial_layer<T>(params_, "disc/layer" + std::to_string(l),
                                              LayerKind::mixer, shape, make_norm,
                                              PaddingMode{}, rng));
    }
    final_norm_ = make_norm("disc/final_norm");
    head_patch_ = make_affine(params_, "disc/head_patch", d.width, 1, rng);
    head_channel_ = make_affine(params_, "disc/head_channel", tokens, 1, rng);

    std::size_t stages = 0;
    for (std::size_t p = d.patch; p > 1; p /= 2) ++stages;
    std::size_t in = d.width;
    for (std::size_t s = 0; s < stages; ++s) {
      const bool last = s + 1 == stages;
      const std::size_t out = last ? 6 : std::max<std::size_t>(in / 2, 1);
      const std::string prefix = "disc/rec" + std::to_string(s);
      Stage st;
      st.weight = params_.add(prefix + "/weight",
                              uniform_fan_in<T>(Shape{in, 4, 4, out}, in * 4, rng));
      st.bias = params_.add(prefix + "/bias", uniform_fan_in<T>(Shape{out}, in * 4, rng));
      stages_.push_back(st);
      in = out;
    }
  }

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  std::vector<SpatialLayer<T>>& layers() { return layers_; }
  Affine<T>& head_patch() { return head_patch_; }
  Affine<T>& head_channel() { return head_channel_; }
  std::vector<Stage>& stages() { return stages_; }

  /// Token features after the mixer stack and final norm, [N, gh, gw, C].
  Tensor<T> trunk(const Tensor<T>& d_in) {
    const std::size_t h = config_.gen.height, w = config_.gen.width();
    if (d_in.rank() != 4 || d_in.dim(1) != 6 || d_in.dim(2) != h || d_in.dim(3) != w) {
      throw ConfigError("discriminator input must be [N, 6, " + std::to_string(h) + ", " +
                        std::to_string(w) + "], got " + to_string(d_in.shape()));
    }
    const std::vector<std::size_t> no_labels(d_in.dim(0), 0);
    auto feat = patch_embed(d_in, config_.disc.patch, embed_);
    for (auto& layer : layers_) feat = spatial_layer(feat, no_labels, layer, true);
    return layer_norm(feat, final_norm_);
  }

  Tensor<T> patch_head(const Tensor<T>& feat) {
    const std::size_t n = feat.dim(0);
    return reshape(head_patch_(feat), Shape{n, grid_h_, grid_w_});
  }

  Tensor<T> channel_head(const Tensor<T>& feat) {
    const std::size_t n = feat.dim(0), c = feat.dim(3);
    auto per_channel = permute(reshape(feat, Shape{n, grid_h_ * grid_w_, c}), {0, 2, 1});
    return reshape(head_channel_(per_channel), Shape{n, c});
  }

  Tensor<T> reconstruction_head(const Tensor<T>& feat) {
    Tensor<T> h = feat;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      h = conv_transpose2d(h, stages_[s].weight, stages_[s].bias, 2, 1);
      if (s + 1 < stages_.size()) h = gelu(h);
    }
    return permute(h, {0, 3, 1, 2});
  }

  DiscriminatorOutput<T> discriminate(const Tensor<T>& d_in, bool with_reconstruction = true) {
    auto feat = trunk(d_in);
    DiscriminatorOutput<T> out;
    out.patch_logits = patch_head(feat);
    out.channel_logits = channel_head(feat);
    if (with_reconstruction) out.reconstruction = reconstruction_head(feat);
    return out;
  }

  /// Per-sample score summed over the batch:
  ///   Σ_n mean(patch_logits_n) + λ_ch · mean(channel_logits_n).
  static Tensor<T> score(const DiscriminatorOutput<T>& out, T lambda_ch) {
    const std::size_t n = out.patch_logits.dim(0);
    const T patch_norm = T(1) / static_cast<T>(out.patch_logits.size() / n);
    Tensor<T> s = scale(sum(out.patch_logits), patch_norm);
    if (lambda_ch != T(0)) {
      const T channel_norm = lambda_ch / static_cast<T>(out.channel_logits.size() / n);
      s = add(s, scale(sum(out.channel_logits), channel_norm));
    }
    return s;
  }

  /// Batch mean of ‖∇_{d_in} s_n‖², built with create_graph so that it can be
  /// penalized. `d_in` must require a gradient.
  Tensor<T> grad_norm_sq(const Tensor<T>& d_in, T lambda_ch) {
    if (!d_in.requires_grad()) {
      throw ContractError("grad_norm_sq needs an input that tracks gradients");
    }
    auto out = discriminate(d_in, false);
    return grad_norm_sq_from(score(out, lambda_ch), d_in);
  }

  static Tensor<T> grad_norm_sq_from(const Tensor<T>& score_value, const Tensor<T>& d_in) {
    auto g = grad<T>(score_value, {d_in}, true)[0];
    return scale(sum(square(g)), T(1) / static_cast<T>(d_in.dim(0)));
  }

 private:
  ModelConfig config_;
  ParameterSet<T> params_;
  std::size_t grid_h_ = 0, grid_w_ = 0;
  Affine<T> embed_;
  std::vector<SpatialLayer<T>> layers_;
  Norm<T> final_norm_;
  Affine<T> head_patch_;
  Affine<T> head_channel_;
  std::vector<Stage> stages_;
};

/// Stacks condition and image along channels: [N,3,H,W] ‖ [N,3,H,W] → [N,6,H,W].
template <typename T>
Tensor<T> discriminator_input(const Tensor<T>& condition, const Tensor<T>& image) {
  if (condition.shape() != image.shape()) {
    throw ShapeError("condition " + to_string(condition.shape()) + " and image " +
                     to_string(image.shape()) + " differ in shape");
  }
  return concat<T>({condition, image}, 1);
}

}  // namespace omnimix
