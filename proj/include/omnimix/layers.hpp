#pragma once

#include <optional>
#include <string>
#include <vector>

#include "omnimix/ops.hpp"
#include "omnimix/params.hpp"

// Building blocks shared by the generator and the discriminator. Feature maps
// ("token maps") are channels-last: [N, grid_h, grid_w, C].

namespace omnimix {

template <typename T>
struct Affine {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
Affine<T> make_affine(ParameterSet<T>& params, const std::string& prefix,
                      std::size_t in, std::size_t out, Rng& rng) {
  Affine<T> a;
  a.weight = params.add(prefix + "/weight", uniform_fan_in<T>(Shape{in, out}, in, rng));
  a.bias = params.add(prefix + "/bias", uniform_fan_in<T>(Shape{out}, in, rng));
  return a;
}

// ---------------------------------------------------------------------------
// Normalization

enum class NormKind { conditional_batch, layer };

template <typename T>
struct Norm {
  NormKind kind = NormKind::layer;
  Tensor<T> gain;           // [rows, C] for batch norm, [C] for layer norm
  Tensor<T> bias;
  Tensor<T> running_mean;   // [C], batch norm only
  Tensor<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);
  std::size_t num_classes = 1;  // labels are bounds-checked against this
};

/// Conditional batch norm: gain/bias rows are selected by label. With a single
/// row (plain batch norm) every label maps to row 0.
template <typename T>
Norm<T> make_cond_batch_norm(ParameterSet<T>& params, const std::string& prefix,
                             std::size_t channels, std::size_t num_classes,
                             bool conditional, T eps, T momentum) {
  const std::size_t rows = conditional ? num_classes : 1;
  Norm<T> n;
  n.kind = NormKind::conditional_batch;
  n.gain = params.add(prefix + "/gain", Tensor<T>::full(Shape{rows, channels}, T(1)));
  n.bias = params.add(prefix + "/bias", Tensor<T>::zeros(Shape{rows, channels}));
  n.running_mean = params.add(prefix + "/running_mean", Tensor<T>::zeros(Shape{channels}), false);
  n.running_var = params.add(prefix + "/running_var", Tensor<T>::full(Shape{channels}, T(1)), false);
  n.eps = eps;
  n.momentum = momentum;
  n.num_classes = num_classes;
  return n;
}

template <typename T>
Norm<T> make_layer_norm(ParameterSet<T>& params, const std::string& prefix,
                        std::size_t channels, T eps) {
  Norm<T> n;
  n.kind = NormKind::layer;
  n.gain = params.add(prefix + "/gain", Tensor<T>::full(Shape{channels}, T(1)));
  n.bias = params.add(prefix + "/bias", Tensor<T>::zeros(Shape{channels}));
  n.eps = eps;
  return n;
}

/// Batch statistics per channel over batch and spatial axes, then the
/// label-indexed affine. Running statistics move only when training.
template <typename T>
Tensor<T> cond_batch_norm(const Tensor<T>& x, const std::vector<std::size_t>& labels,
                          Norm<T>& p, bool training) {
  const std::size_t c = x.shape().back();
  const std::size_t batch = x.dim(0);
  if (labels.size() != batch) {
    throw ShapeError("cond_batch_norm: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(batch));
  }
  if (p.gain.dim(1) != c) {
    throw ShapeError("cond_batch_norm: parameters for " + std::to_string(p.gain.dim(1)) +
                     " channels, input " + to_string(x.shape()));
  }
  std::vector<std::size_t> rows(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] >= p.num_classes) {
      throw std::out_of_range("scene label " + std::to_string(labels[i]) +
                              " outside [0, " + std::to_string(p.num_classes) + ")");
    }
    rows[i] = p.gain.dim(0) == 1 ? 0 : labels[i];
  }
  const std::size_t m = x.size() / c;
  auto flat = reshape(x, Shape{m, c});
  Tensor<T> normalized;
  if (training) {
    auto mu = scale(sum_leading(flat, Shape{c}), T(1) / static_cast<T>(m));
    auto centered = sub(flat, mu);
    auto var = scale(sum_leading(square(centered), Shape{c}), T(1) / static_cast<T>(m));
    normalized = mul(centered, rsqrt(add_scalar(var, p.eps)));
    auto rm = p.running_mean.mutable_data();
    auto rv = p.running_var.mutable_data();
    const T unbias = m > 1 ? static_cast<T>(m) / static_cast<T>(m - 1) : T(1);
    for (std::size_t ch = 0; ch < c; ++ch) {
      rm[ch] = (T(1) - p.momentum) * rm[ch] + p.momentum * mu[ch];
      rv[ch] = (T(1) - p.momentum) * rv[ch] + p.momentum * var[ch] * unbias;
    }
  } else {
    auto inv = rsqrt(add_scalar(p.running_var.detach(), p.eps));
    normalized = mul(sub(flat, p.running_mean.detach()), inv);
  }
  const std::size_t per_sample = m / batch;
  auto gain = expand(reshape(gather_rows(p.gain, rows), Shape{batch, 1, c}),
                     Shape{batch, per_sample, c});
  auto bias = expand(reshape(gather_rows(p.bias, rows), Shape{batch, 1, c}),
                     Shape{batch, per_sample, c});
  auto y = add(mul(reshape(normalized, Shape{batch, per_sample, c}), gain), bias);
  return reshape(y, x.shape());
}

/// Normalizes each token over its channels.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Norm<T>& p) {
  const std::size_t c = x.shape().back();
  const std::size_t m = x.size() / c;
  auto flat = reshape(x, Shape{m, c});
  auto mu = scale(reduce_to(flat, Shape{m, 1}), T(1) / static_cast<T>(c));
  auto centered = sub(flat, expand(mu, Shape{m, c}));
  auto var = scale(reduce_to(square(centered), Shape{m, 1}), T(1) / static_cast<T>(c));
  auto inv = rsqrt(add_scalar(var, p.eps));
  auto y = add(mul(mul(centered, expand(inv, Shape{m, c})), p.gain), p.bias);
  return reshape(y, x.shape());
}

template <typename T>
Tensor<T> apply_norm(const Tensor<T>& x, const std::vector<std::size_t>& labels,
                     Norm<T>& p, bool training) {
  return p.kind == NormKind::layer ? layer_norm(x, p)
                                   : cond_batch_norm(x, labels, p, training);
}

// ---------------------------------------------------------------------------
// Patch embedding

/// [N, C, H, W] → [N, H/p, W/p, C·p·p], each patch flattened channel-major.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
  if (image.rank() != 4) throw ShapeError("patchify expects [N,C,H,W]");
  const std::size_t n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("patch size " + std::to_string(patch) + " does not divide " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t gh = h / patch, gw = w / patch;
  auto split = reshape(image, Shape{n, c, gh, patch, gw, patch});
  auto moved = permute(split, {0, 2, 4, 1, 3, 5});
  return reshape(moved, Shape{n, gh, gw, c * patch * patch});
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, std::size_t patch, const Affine<T>& fc) {
  return fc(patchify(image, patch));
}

// ---------------------------------------------------------------------------
// Mixer and depthwise layers

enum class LayerKind { mixer, depthwise };

/// Two pre-norm residual sublayers. Sublayer (a) mixes spatially: an MLP
/// across all tokens per channel (mixer) or two depthwise convolutions
/// (depthwise). Sublayer (b) is an MLP across channels per token.
template <typename T>
struct SpatialLayer {
  LayerKind kind = LayerKind::mixer;
  Norm<T> norm_a, norm_b;
  Affine<T> token_fc1, token_fc2;   // mixer: T → T_hidden → T
  Tensor<T> dw1_kernel, dw1_bias;   // depthwise: [k, k, C], [C]
  Tensor<T> dw2_kernel, dw2_bias;
  Affine<T> channel_fc1, channel_fc2;  // C → C_hidden → C
  PaddingMode pad;
};

struct SpatialLayerShape {
  std::size_t grid_h, grid_w, channels;
  std::size_t token_hidden;    // mixer only
  std::size_t channel_hidden;
  std::size_t kernel = 3;      // depthwise only
};

template <typename T>
SpatialLayer<T> make_spatial_layer(ParameterSet<T>& params, const std::string& prefix,
                                   LayerKind kind, const SpatialLayerShape& s,
                                   const std::function<Norm<T>(const std::string&)>& make_norm,
                                   PaddingMode pad, Rng& rng) {
  SpatialLayer<T> l;
  l.kind = kind;
  l.pad = pad;
  l.norm_a = make_norm(prefix + "/norm_a");
  const std::size_t tokens = s.grid_h * s.grid_w;
  if (kind == LayerKind::mixer) {
    l.token_fc1 = make_affine(params, prefix + "/token_fc1", tokens, s.token_hidden, rng);
    l.token_fc2 = make_affine(params, prefix + "/token_fc2", s.token_hidden, tokens, rng);
  } else {
    const std::size_t fan = s.kernel * s.kernel;
    l.dw1_kernel = params.add(prefix + "/dw1/kernel",
                              uniform_fan_in<T>(Shape{s.kernel, s.kernel, s.channels}, fan, rng));
    l.dw1_bias = params.add(prefix + "/dw1/bias", uniform_fan_in<T>(Shape{s.channels}, fan, rng));
    l.dw2_kernel = params.add(prefix + "/dw2/kernel",
                              uniform_fan_in<T>(Shape{s.kernel, s.kernel, s.channels}, fan, rng));
    l.dw2_bias = params.add(prefix + "/dw2/bias", uniform_fan_in<T>(Shape{s.channels}, fan, rng));
  }
  l.norm_b = make_norm(prefix + "/norm_b");
  l.channel_fc1 = make_affine(params, prefix + "/channel_fc1", s.channels, s.channel_hidden, rng);
  l.channel_fc2 = make_affine(params, prefix + "/channel_fc2", s.channel_hidden, s.channels, rng);
  return l;
}

/// Sublayer (a) residual branch only (without the skip).
template <typename T>
Tensor<T> spatial_branch(const Tensor<T>& x, const std::vector<std::size_t>& labels,
                         SpatialLayer<T>& l, bool training) {
  const std::size_t n = x.dim(0), gh = x.dim(1), gw = x.dim(2), c = x.dim(3);
  auto h = apply_norm(x, labels, l.norm_a, training);
  if (l.kind == LayerKind::mixer) {
    const std::size_t tokens = gh * gw;
    if (l.token_fc1.in() != tokens) {
      throw ConfigError("token-mixing weights expect " + std::to_string(l.token_fc1.in()) +
                        " tokens, map has " + std::to_string(tokens));
    }
    auto per_channel = permute(reshape(h, Shape{n, tokens, c}), {0, 2, 1});
    auto mixed = l.token_fc2(gelu(l.token_fc1(per_channel)));
    return reshape(permute(mixed, {0, 2, 1}), x.shape());
  }
  h = depthwise_conv2d(h, l.dw1_kernel, l.dw1_bias, l.pad);
  h = gelu(h);
  return depthwise_conv2d(h, l.dw2_kernel, l.dw2_bias, l.pad);
}

/// Sublayer (b) residual branch: per-token MLP across channels.
template <typename T>
Tensor<T> channel_branch(const Tensor<T>& x, const std::vector<std::size_t>& labels,
                         SpatialLayer<T>& l, bool training) {
  auto h = apply_norm(x, labels, l.norm_b, training);
  return l.channel_fc2(gelu(l.channel_fc1(h)));
}

template <typename T>
Tensor<T> spatial_layer(const Tensor<T>& x, const std::vector<std::size_t>& labels,
                        SpatialLayer<T>& l, bool training) {
  auto y = add(x, spatial_branch(x, labels, l, training));
  return add(y, channel_branch(y, labels, l, training));
}

template <typename T>
Tensor<T> mlp_mixer_layer(const Tensor<T>& x, const std::vector<std::size_t>& labels,
                          SpatialLayer<T>& l, bool training) {
  if (l.kind != LayerKind::mixer) throw ContractError("layer is not a mixer layer");
  return spatial_layer(x, labels, l, training);
}

template <typename T>
Tensor<T> depthwise_conv_layer(const Tensor<T>& x, const std::vector<std::size_t>& labels,
                               SpatialLayer<T>& l, bool training) {
  if (l.kind != LayerKind::depthwise) throw ContractError("layer is not a depthwise layer");
  return spatial_layer(x, labels, l, training);
}

// ---------------------------------------------------------------------------
// Upsampling and RGB projection

/// Per token C → 4·C_next, reshaped into a 2×2 block; grid doubles.
template <typename T>
Tensor<T> patch_split(const Tensor<T>& x, const Affine<T>& fc) {
  const std::size_t n = x.dim(0), gh = x.dim(1), gw = x.dim(2);
  if (fc.out() % 4 != 0) throw ConfigError("patch_split output must be 4·C_next");
  const std::size_t next = fc.out() / 4;
  auto y = reshape(fc(x), Shape{n, gh, gw, 2, 2, next});
  return reshape(permute(y, {0, 1, 3, 2, 4, 5}), Shape{n, 2 * gh, 2 * gw, next});
}

/// Per token C → 3, returned as an [N, 3, gh, gw] image.
template <typename T>
Tensor<T> to_rgb(const Tensor<T>& x, const Affine<T>& fc) {
  return permute(fc(x), {0, 3, 1, 2});
}

}  // namespace omnimix
