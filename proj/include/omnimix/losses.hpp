#pragma once

#include "omnimix/ops.hpp"

// Adversarial, reconstruction and gradient-penalty terms. Logits are
// pre-sigmoid; -log σ(v) and -log(1 - σ(v)) are evaluated as softplus(-v) and
// softplus(v), so no log of a probability is ever taken.

namespace omnimix {

/// mean softplus(-real) + mean softplus(fake)  =  -E log D(real) - E log(1 - D(fake)).
template <typename T>
Tensor<T> adv_loss_d(const Tensor<T>& logits_real, const Tensor<T>& logits_fake) {
  return add(mean(softplus(neg(logits_real))), mean(softplus(logits_fake)));
}

/// Non-saturating generator loss: mean softplus(-fake) = -E log D(fake).
template <typename T>
Tensor<T> adv_loss_g(const Tensor<T>& logits_fake) {
  return mean(softplus(neg(logits_fake)));
}

/// l_patch + λ_ch · l_channel.
template <typename T>
Tensor<T> combine_adv(const Tensor<T>& l_patch, const Tensor<T>& l_channel, T lambda_ch) {
  return add(l_patch, scale(l_channel, lambda_ch));
}

/// Mean absolute error over the masked pixels of all three channels.
/// `mask` is [N,1,H,W] or [1,H,W] with 0/1 entries.
template <typename T>
Tensor<T> rec_loss_g(const Tensor<T>& generated, const Tensor<T>& target,
                     const Tensor<T>& mask) {
  if (generated.shape() != target.shape() || generated.rank() != 4) {
    throw ShapeError("rec_loss_g: generated " + to_string(generated.shape()) +
                     " vs target " + to_string(target.shape()));
  }
  const std::size_t n = generated.dim(0), c = generated.dim(1);
  const std::size_t h = generated.dim(2), w = generated.dim(3);
  Tensor<T> m = mask;
  if (m.rank() == 3) m = tile_leading(m.detach(), Shape{n, 1, h, w});
  if (m.shape() != Shape{n, 1, h, w}) {
    throw ShapeError("rec_loss_g: mask " + to_string(mask.shape()) +
                     " does not match image " + to_string(generated.shape()));
  }
  T count = 0;
  for (T v : m.data()) count += v;
  if (count <= T(0)) throw ContractError("rec_loss_g: mask selects no pixels");
  auto full_mask = expand(m.detach(), Shape{n, c, h, w});
  auto diff = abs(sub(generated, target));
  return scale(sum(mul(diff, full_mask)), T(1) / (static_cast<T>(c) * count));
}

/// Mean absolute error between the 6-channel input and its reconstruction.
template <typename T>
Tensor<T> rec_loss_d(const Tensor<T>& d_in, const Tensor<T>& reconstruction) {
  if (d_in.shape() != reconstruction.shape()) {
    throw ShapeError("rec_loss_d: input " + to_string(d_in.shape()) +
                     " vs reconstruction " + to_string(reconstruction.shape()));
  }
  return mean(abs(sub(d_in, reconstruction)));
}

/// (γ/2)·‖∇D‖², with the squared norm taken on real inputs only.
template <typename T>
Tensor<T> r1_penalty(const Tensor<T>& grad_norm_sq, T gamma) {
  return scale(grad_norm_sq, gamma / T(2));
}

}  // namespace omnimix
