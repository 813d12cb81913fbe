#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "omnimix/discriminator.hpp"
#include "omnimix/generator.hpp"
#include "omnimix/losses.hpp"

// Finite-difference verification of analytic gradients, in double precision.
//
// For a scalar function f of tensors x_1..x_m, every element of every x_i is
// perturbed by ±h (central differences, h = 1e-5). The reported error is
//   max |analytic − numeric| / max(max |numeric|, 1e-8)
// taken over all elements of all inputs. Non-scalar ops are reduced to a
// scalar with a fixed random projection first.

namespace omnimix {

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

struct GradCheckResult {
  std::string suite;
  std::string op;
  double rel_error = 0;
  double tolerance = 0;
  bool pass() const { return rel_error < tolerance; }
};

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kLayerTolerance = 1e-4;
inline constexpr double kComposedTolerance = 1e-3;

/// Relative error between analytic and central-difference gradients.
inline double gradient_error(const GradFn& f, std::vector<Tensor<double>> inputs,
                             double step = kGradCheckStep) {
  for (auto& in : inputs) in.set_requires_grad(true);
  std::vector<Tensor<double>> analytic;
  {
    auto out = f(inputs);
    analytic = grad<double>(out, inputs);
  }
  double max_diff = 0, max_num = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto values = inputs[i].mutable_data();
    auto a = analytic[i].data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + step;
      const double up = f(inputs).item();
      values[j] = saved - step;
      const double down = f(inputs).item();
      values[j] = saved;
      const double numeric = (up - down) / (2 * step);
      max_diff = std::max(max_diff, std::abs(a[j] - numeric));
      max_num = std::max(max_num, std::abs(numeric));
    }
  }
  return max_diff / std::max(max_num, 1e-8);
}

/// sum(y ⊙ R) for a fixed R drawn from `seed`: turns any op into a scalar.
inline Tensor<double> project(const Tensor<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, randn<double>(y.shape(), rng)));
}

struct GradCheckSuite {
  std::string name;
  std::function<std::vector<GradCheckResult>()> run;
};

namespace detail {

inline Tensor<double> rand_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Replaces every parameter value by a random draw so that norms and biases
// are not at their trivial initial values.
inline void randomize(ParameterSet<double>& params, Rng& rng) {
  std::uniform_real_distribution<double> dist(-0.8, 0.8);
  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    Tensor<double> t = e.tensor;
    for (auto& v : t.mutable_data()) v = dist(rng);
  }
}

inline GradCheckResult check(const std::string& suite, const std::string& op, const GradFn& f,
                             std::vector<Tensor<double>> inputs, double tol) {
  return {suite, op, gradient_error(f, std::move(inputs)), tol};
}

// Small but complete model configuration used by the composed checks.
inline ModelConfig tiny_model() {
  ModelConfig c;
  c.gen.blocks = 2;
  c.gen.base_patch = 2;
  c.gen.widths = {4, 3};
  c.gen.z_dim = 3;
  c.gen.num_classes = 2;
  c.gen.height = 4;
  c.gen.layers_per_block = 1;
  c.disc.width = 4;
  c.disc.layers = 1;
  c.disc.patch = 2;
  return c;
}

inline std::vector<Tensor<double>> with(std::vector<Tensor<double>> a,
                                        const std::vector<Tensor<double>>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline std::vector<GradCheckResult> suite_ops() {
  Rng rng(1);
  const std::string s = "ops";
  std::vector<GradCheckResult> r;
  r.push_back(check(s, "matmul", [](const auto& in) { return project(matmul(in[0], in[1])); },
                    {rand_tensor({3, 4}, rng), rand_tensor({4, 5}, rng)}, kLayerTolerance));
  r.push_back(check(s, "matmul_tt",
                    [](const auto& in) { return project(matmul(in[0], in[1], true, true)); },
                    {rand_tensor({4, 3}, rng), rand_tensor({5, 4}, rng)}, kLayerTolerance));
  r.push_back(check(s, "gelu", [](const auto& in) { return project(gelu(in[0])); },
                    {rand_tensor({2, 7}, rng, -3, 3)}, kLayerTolerance));
  r.push_back(check(s, "gelu_first_order_twice",
                    [](const auto& in) {
                      auto g = grad<double>(sum(gelu(in[0])), {in[0]}, true)[0];
                      return project(g);
                    },
                    {rand_tensor({2, 5}, rng, -3, 3)}, kLayerTolerance));
  r.push_back(check(s, "tanh", [](const auto& in) { return project(tanh(in[0])); },
                    {rand_tensor({9}, rng, -2, 2)}, kLayerTolerance));
  r.push_back(check(s, "softplus", [](const auto& in) { return project(softplus(in[0])); },
                    {rand_tensor({9}, rng, -4, 4)}, kLayerTolerance));
  r.push_back(check(s, "rsqrt",
                    [](const auto& in) { return project(mul(in[0], rsqrt(add_scalar(in[1], 0.5)))); },
                    {rand_tensor({3, 4}, rng), rand_tensor({4}, rng, 0.1, 1)}, kLayerTolerance));
  r.push_back(check(s, "roll",
                    [](const auto& in) { return project(roll(in[0], 3, std::vector<long>{1, -3})); },
                    {rand_tensor({2, 2, 3, 5}, rng)}, kLayerTolerance));
  r.push_back(check(s, "upsample2x", [](const auto& in) { return project(upsample2x(in[0])); },
                    {rand_tensor({1, 2, 3, 4}, rng)}, kLayerTolerance));
  return r;
}

inline std::vector<GradCheckResult> suite_depthwise() {
  Rng rng(2);
  const std::string s = "depthwise";
  std::vector<GradCheckResult> r;
  for (auto vp : {VerticalPad::replicate, VerticalPad::zero}) {
    PaddingMode pad{HorizontalPad::circular, vp};
    r.push_back(check(s, vp == VerticalPad::replicate ? "depthwise_conv2d" : "depthwise_conv2d_zero",
                      [pad](const auto& in) { return project(depthwise_conv2d(in[0], in[1], in[2], pad)); },
                      {rand_tensor({2, 4, 5, 3}, rng), rand_tensor({3, 3, 3}, rng),
                       rand_tensor({3}, rng)},
                      kLayerTolerance));
  }
  ParameterSet<double> params;
  SpatialLayerShape shape{3, 4, 3, 0, 6, 3};
  auto make_norm = [&](const std::string& n) {
    return make_cond_batch_norm<double>(params, n, 3, 2, true, 1e-5, 0.1);
  };
  auto layer = make_spatial_layer<double>(params, "l", LayerKind::depthwise, shape, make_norm,
                                          PaddingMode{}, rng);
  randomize(params, rng);
  const std::vector<std::size_t> labels{0, 1};
  r.push_back(check(s, "depthwise_conv_layer",
                    [&](const auto& in) { return project(depthwise_conv_layer(in[0], labels, layer, true)); },
                    with({rand_tensor({2, 3, 4, 3}, rng)}, params.trainable()), kLayerTolerance));
  return r;
}

inline std::vector<GradCheckResult> suite_layers() {
  Rng rng(3);
  const std::string s = "layers";
  std::vector<GradCheckResult> r;
  ParameterSet<double> params;
  const std::vector<std::size_t> labels{1, 0, 1};

  auto embed = make_affine(params, "embed", 3 * 2 * 2, 5, rng);
  r.push_back(check(s, "patch_embed",
                    [&](const auto& in) { return project(patch_embed(in[0], 2, embed)); },
                    {rand_tensor({2, 3, 4, 6}, rng), embed.weight, embed.bias}, kLayerTolerance));

  auto bn = make_cond_batch_norm<double>(params, "bn", 4, 2, true, 1e-5, 0.1);
  randomize(params, rng);
  r.push_back(check(s, "cond_batch_norm",
                    [&](const auto& in) { return project(cond_batch_norm(in[0], labels, bn, true)); },
                    {rand_tensor({3, 2, 3, 4}, rng), bn.gain, bn.bias}, kLayerTolerance));
  r.push_back(check(s, "cond_batch_norm_eval",
                    [&](const auto& in) { return project(cond_batch_norm(in[0], labels, bn, false)); },
                    {rand_tensor({3, 2, 3, 4}, rng), bn.gain, bn.bias}, kLayerTolerance));

  auto ln = make_layer_norm<double>(params, "ln", 4, 1e-5);
  randomize(params, rng);
  r.push_back(check(s, "layer_norm",
                    [&](const auto& in) { return project(layer_norm(in[0], ln)); },
                    {rand_tensor({2, 3, 4}, rng), ln.gain, ln.bias}, kLayerTolerance));

  ParameterSet<double> mixer_params;
  SpatialLayerShape shape{2, 3, 4, 5, 8, 3};
  auto make_norm = [&](const std::string& n) {
    return make_cond_batch_norm<double>(mixer_params, n, 4, 2, true, 1e-5, 0.1);
  };
  auto mixer = make_spatial_layer<double>(mixer_params, "m", LayerKind::mixer, shape, make_norm,
                                          PaddingMode{}, rng);
  randomize(mixer_params, rng);
  r.push_back(check(s, "mlp_mixer_layer",
                    [&](const auto& in) { return project(mlp_mixer_layer(in[0], labels, mixer, true)); },
                    with({rand_tensor({3, 2, 3, 4}, rng)}, mixer_params.trainable()),
                    kLayerTolerance));

  auto split = make_affine(params, "split", 4, 4 * 3, rng);
  r.push_back(check(s, "patch_split",
                    [&](const auto& in) { return project(patch_split(in[0], split)); },
                    {rand_tensor({2, 2, 3, 4}, rng), split.weight, split.bias}, kLayerTolerance));

  auto rgb = make_affine(params, "rgb", 4, 3, rng);
  r.push_back(check(s, "to_rgb", [&](const auto& in) { return project(to_rgb(in[0], rgb)); },
                    {rand_tensor({2, 2, 3, 4}, rng), rgb.weight, rgb.bias}, kLayerTolerance));
  return r;
}

inline std::vector<GradCheckResult> suite_transposed_conv() {
  Rng rng(4);
  const std::string s = "transposed_conv";
  std::vector<GradCheckResult> r;
  r.push_back(check(s, "conv_transpose2d",
                    [](const auto& in) { return project(conv_transpose2d(in[0], in[1], in[2], 2, 1)); },
                    {rand_tensor({2, 2, 3, 3}, rng), rand_tensor({3, 4, 4, 2}, rng),
                     rand_tensor({2}, rng)},
                    kLayerTolerance));
  r.push_back(check(s, "transposed_conv_stage",
                    [](const auto& in) {
                      return project(gelu(conv_transpose2d(in[0], in[1], in[2], 2, 1)));
                    },
                    {rand_tensor({1, 2, 4, 4}, rng), rand_tensor({4, 4, 4, 3}, rng),
                     rand_tensor({3}, rng)},
                    kLayerTolerance));
  return r;
}

inline std::vector<GradCheckResult> suite_losses() {
  Rng rng(5);
  const std::string s = "losses";
  std::vector<GradCheckResult> r;
  r.push_back(check(s, "adv_loss_d", [](const auto& in) { return adv_loss_d(in[0], in[1]); },
                    {rand_tensor({2, 3}, rng, -3, 3), rand_tensor({2, 3}, rng, -3, 3)},
                    kLayerTolerance));
  r.push_back(check(s, "adv_loss_g", [](const auto& in) { return adv_loss_g(in[0]); },
                    {rand_tensor({2, 3}, rng, -3, 3)}, kLayerTolerance));
  r.push_back(check(s, "combine_adv",
                    [](const auto& in) { return combine_adv(sum(in[0]), sum(in[1]), 0.1); },
                    {rand_tensor({2}, rng), rand_tensor({3}, rng)}, kLayerTolerance));
  std::vector<double> m{1, 0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0};
  auto mask = Tensor<double>(Shape{1, 3, 4}, m);
  r.push_back(check(s, "rec_loss_g", [mask](const auto& in) { return rec_loss_g(in[0], in[1], mask); },
                    {rand_tensor({2, 3, 3, 4}, rng), rand_tensor({2, 3, 3, 4}, rng)},
                    kLayerTolerance));
  r.push_back(check(s, "rec_loss_d", [](const auto& in) { return rec_loss_d(in[0], in[1]); },
                    {rand_tensor({2, 6, 2, 4}, rng), rand_tensor({2, 6, 2, 4}, rng)},
                    kLayerTolerance));
  r.push_back(check(s, "r1_penalty", [](const auto& in) { return r1_penalty(sum(square(in[0])), 10.0); },
                    {rand_tensor({5}, rng)}, kLayerTolerance));
  return r;
}

inline std::vector<GradCheckResult> suite_generator() {
  Rng rng(6);
  const std::string s = "generator";
  auto config = tiny_model();
  Generator<double> g(config, 7);
  randomize(g.params(), rng);
  const std::vector<std::size_t> labels{0, 1};
  auto x = rand_tensor({2, 3, 4, 8}, rng);
  auto z = rand_tensor({2, 3}, rng);
  std::vector<GradCheckResult> r;
  r.push_back(check(s, "generator",
                    [&](const auto& in) { return project(g.generate(in[0], in[1], labels, true)); },
                    with({x, z}, g.params().trainable()), kComposedTolerance));
  return r;
}

inline std::vector<GradCheckResult> suite_discriminator() {
  Rng rng(8);
  const std::string s = "discriminator";
  auto config = tiny_model();
  Discriminator<double> d(config, 9);
  randomize(d.params(), rng);
  auto d_in = rand_tensor({2, 6, 4, 8}, rng);
  std::vector<GradCheckResult> r;
  r.push_back(check(s, "discriminator",
                    [&](const auto& in) {
                      auto out = d.discriminate(in[0], true);
                      return add(add(project(out.patch_logits, 1), project(out.channel_logits, 2)),
                                 project(out.reconstruction, 3));
                    },
                    with({d_in}, d.params().trainable()), kComposedTolerance));
  // Gradient of the R1 term itself, which needs second derivatives.
  auto params = d.params().trainable();
  r.push_back(check(s, "r1_double_backward",
                    [&](const auto& in) { return r1_penalty(d.grad_norm_sq(in[0], 0.01), 10.0); },
                    with({d_in.clone()}, params), kComposedTolerance));
  return r;
}

}  // namespace detail

/// Every registered suite, in reporting order.
inline std::vector<GradCheckSuite> default_grad_suites() {
  return {
      {"ops", detail::suite_ops},
      {"depthwise", detail::suite_depthwise},
      {"layers", detail::suite_layers},
      {"transposed_conv", detail::suite_transposed_conv},
      {"losses", detail::suite_losses},
      {"generator", detail::suite_generator},
      {"discriminator", detail::suite_discriminator},
  };
}

/// Runs the suites whose name matches `only` (all when empty) and prints one
/// line per checked op. Returns the results; throws ConfigError on an unknown
/// filter.
/// Deliberately broken op (x² with a negated backward rule), used to show
/// that the harness reports failures.
inline GradCheckSuite wrong_sign_fixture_suite() {
  return {"fixture", [] {
            auto bad_square = [](const std::vector<Tensor<double>>& in) {
              const auto& x = in[0];
              auto y = record(Tensor<double>(x.shape(), mul(x.detach(), x.detach()).vec()), {x},
                              "wrong_sign_square",
                              [](const Tensor<double>& g, const std::vector<Tensor<double>>& ins,
                                 const std::vector<bool>&) {
                                return std::vector<Tensor<double>>{mul(g, scale(ins[0], -2.0))};
                              });
              return project(y);
            };
            Rng rng(3);
            return std::vector<GradCheckResult>{detail::check(
                "fixture", "wrong_sign_square", bad_square,
                {detail::rand_tensor({3, 4}, rng, 0.5, 1.5)}, kLayerTolerance)};
          }};
}

inline std::vector<GradCheckResult> run_grad_suites(const std::vector<GradCheckSuite>& suites,
                                                    const std::string& only, std::ostream& out) {
  std::vector<GradCheckResult> all;
  bool matched = false;
  for (const auto& suite : suites) {
    if (!only.empty() && suite.name != only) continue;
    matched = true;
    for (auto& res : suite.run()) {
      char line[256];
      std::snprintf(line, sizeof(line), "%-4s %-16s %-28s rel_error=%.3e tol=%.0e",
                    res.pass() ? "ok" : "FAIL", res.suite.c_str(), res.op.c_str(), res.rel_error,
                    res.tolerance);
      out << line << '\n';
      all.push_back(std::move(res));
    }
  }
  if (!matched) {
    std::string names;
    for (const auto& s : suites) names += (names.empty() ? "" : ", ") + s.name;
    throw ConfigError("no gradient suite named '" + only + "' (available: " + names + ")");
  }
  return all;
}

}  // namespace omnimix
