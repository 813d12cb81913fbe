#include <gtest/gtest.h>

#include <cmath>

#include "omnimix/discriminator.hpp"
#include "omnimix/losses.hpp"
#include "support.hpp"

using namespace omnimix;
using omnimix::testing::uniform;

namespace {

using LD = long double;

// Direct probability-space formulas, evaluated in long double.
LD sigma(LD v) { return 1 / (1 + std::exp(-v)); }
LD d_loss_ref(const Tensor<double>& r, const Tensor<double>& f) {
  LD a = 0, b = 0;
  for (double v : r.data()) a -= std::log(sigma(v));
  for (double v : f.data()) b -= std::log(1 - sigma(v));
  return a / r.size() + b / f.size();
}
LD g_loss_ref(const Tensor<double>& f) {
  LD a = 0;
  for (double v : f.data()) a -= std::log(sigma(v));
  return a / f.size();
}

double rel(double got, LD want) {
  return std::abs(got - (double)want) / std::max<double>(std::abs((double)want), 1e-12);
}

Tensor<double> mask_of(std::size_t h, std::size_t w, Rng& rng) {
  std::bernoulli_distribution coin(0.3);
  std::vector<double> m(h * w);
  for (auto& v : m) v = coin(rng);
  m[0] = 1;
  return Tensor<double>(Shape{1, h, w}, std::move(m));
}

}  // namespace

TEST(AdvLoss, SpotValuesAtHalfProbability) {
  auto zero = Tensor<double>::zeros(Shape{2, 3});
  EXPECT_NEAR(adv_loss_d(zero, zero).item(), 2 * std::log(2.0), 1e-15);
  EXPECT_NEAR(adv_loss_g(zero).item(), std::log(2.0), 1e-15);
}

TEST(AdvLoss, MatchesProbabilityFormulaOnRandomCases) {
  Rng rng(1);
  std::uniform_int_distribution<std::size_t> len(1, 12);
  for (int i = 0; i < 1000; ++i) {
    auto r = uniform<double>({len(rng)}, rng, -8, 8);
    auto f = uniform<double>({len(rng)}, rng, -8, 8);
    ASSERT_LT(rel(adv_loss_d(r, f).item(), d_loss_ref(r, f)), 1e-6) << i;
    ASSERT_LT(rel(adv_loss_g(f).item(), g_loss_ref(f)), 1e-6) << i;
  }
}

TEST(AdvLoss, FiniteForExtremeLogits) {
  Tensor<double> big(Shape{2}, {-1000, 1000});
  EXPECT_TRUE(std::isfinite(adv_loss_d(big, big).item()));
  EXPECT_NEAR(adv_loss_g(Tensor<double>(Shape{1}, {-1000})).item(), 1000, 1e-9);
}

TEST(AdvLoss, MonotoneInFakeLogit) {
  double prev_d = -1, prev_g = 1e9;
  auto real = Tensor<double>::zeros(Shape{1});
  for (double f = -6; f <= 6; f += 0.5) {
    Tensor<double> fake(Shape{1}, {f});
    const double d = adv_loss_d(real, fake).item(), g = adv_loss_g(fake).item();
    EXPECT_GT(d, prev_d);
    EXPECT_LT(g, prev_g);
    prev_d = d;
    prev_g = g;
  }
}

TEST(CombineAdv, WeightedSum) {
  EXPECT_NEAR(combine_adv(Tensor<double>::scalar(1.0), Tensor<double>::scalar(2.0), 0.1).item(), 1.2, 1e-15);
  Rng rng(2);
  std::uniform_real_distribution<double> u(-5, 5), l(0, 1);
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng), b = u(rng), lam = l(rng);
    const LD want = (LD)a + (LD)lam * b;
    ASSERT_LT(rel(combine_adv(Tensor<double>::scalar(a), Tensor<double>::scalar(b), lam).item(), want), 1e-6);
  }
}

TEST(RecLossG, MatchesMaskedMeanOnRandomCases) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    auto g = uniform<double>({2, 3, 3, 4}, rng), t = uniform<double>({2, 3, 3, 4}, rng);
    auto m = mask_of(3, 4, rng);
    LD num = 0, cnt = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 12; ++p) {
          const std::size_t k = (n * 3 + c) * 12 + p;
          num += m[p] * std::abs((LD)g[k] - t[k]);
          cnt += m[p];
        }
    ASSERT_LT(rel(rec_loss_g(g, t, m).item(), num / cnt), 1e-6) << i;
  }
}

TEST(RecLossG, IdentityConstantShiftAndMaskInvariance) {
  Rng rng(4);
  auto g = uniform<double>({2, 3, 4, 8}, rng);
  auto m = mask_of(4, 8, rng);
  EXPECT_EQ(rec_loss_g(g, g, m).item(), 0.0);
  EXPECT_NEAR(rec_loss_g(add_scalar(g, 0.2), g, m).item(), 0.2, 1e-12);
  const double base = rec_loss_g(g, Tensor<double>::zeros(g.shape()), m).item();
  for (int trial = 0; trial < 50; ++trial) {
    auto other = g.clone();
    auto v = other.mutable_data();
    auto noise = uniform<double>(g.shape(), rng, -5, 5);
    for (std::size_t k = 0; k < v.size(); ++k) {
      if (m[k % 32] == 0) v[k] = noise[k];
    }
    ASSERT_EQ(rec_loss_g(other, Tensor<double>::zeros(g.shape()), m).item(), base);
  }
  EXPECT_THROW(rec_loss_g(g, g, Tensor<double>::zeros(Shape{1, 4, 8})), ContractError);
  EXPECT_THROW(rec_loss_g(g, g, Tensor<double>::zeros(Shape{1, 4, 4})), ShapeError);
}

TEST(RecLossD, MeanAbsoluteErrorOnRandomCases) {
  Rng rng(5);
  auto d_in = uniform<double>({2, 6, 4, 8}, rng);
  EXPECT_NEAR(rec_loss_d(d_in, add_scalar(d_in, 0.5)).item(), 0.5, 1e-12);
  for (int i = 0; i < 1000; ++i) {
    auto a = uniform<double>({1, 6, 2, 4}, rng), b = uniform<double>({1, 6, 2, 4}, rng);
    LD s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += std::abs((LD)a[k] - b[k]);
    ASSERT_LT(rel(rec_loss_d(a, b).item(), s / a.size()), 1e-6);
  }
  EXPECT_THROW(rec_loss_d(d_in, Tensor<double>::zeros(Shape{1, 6, 4, 8})), ShapeError);
}

TEST(R1, HalfGammaTimesNorm) {
  EXPECT_NEAR(r1_penalty(Tensor<double>::scalar(25.0), 10.0).item(), 125.0, 1e-12);
  Rng rng(6);
  std::uniform_real_distribution<double> u(0, 100), gam(0, 20);
  for (int i = 0; i < 1000; ++i) {
    const double n = u(rng), g = gam(rng);
    ASSERT_LT(rel(r1_penalty(Tensor<double>::scalar(n), g).item(), (LD)g / 2 * n), 1e-6);
  }
}

TEST(R1, LinearDiscriminatorIsExact) {
  // s(x) = Σ_n w·x_n has ∇_{x_n} s = w for every sample, so the per-sample
  // squared gradient norm is ‖w‖² whatever the inputs.
  Rng rng(7);
  auto w = uniform<double>({6, 4, 8}, rng);
  Tensor<double> x = uniform<double>({3, 6, 4, 8}, rng);
  x.set_requires_grad(true);
  auto score = sum(mul(x, w));
  const double gamma = 10;
  auto penalty = r1_penalty(Discriminator<double>::grad_norm_sq_from(score, x), gamma);
  LD norm = 0;
  for (double v : w.data()) norm += (LD)v * v;
  EXPECT_NEAR(penalty.item(), (double)(gamma / 2 * norm), 1e-10);
}
