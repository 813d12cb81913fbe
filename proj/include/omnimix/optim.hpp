#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "omnimix/params.hpp"

namespace omnimix {

/// Adam over the trainable entries of one ParameterSet. Moment tensors are
/// kept in registry order so they can be checkpointed by name.
template <typename T>
class Adam {
 public:
  Adam(ParameterSet<T>& params, double lr, double beta1, double beta2, double eps)
      : params_(params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& e : params_.entries()) {
      if (!e.trainable) continue;
      names_.push_back(e.name);
      m_.push_back(Tensor<T>::zeros(e.tensor.shape()));
      v_.push_back(Tensor<T>::zeros(e.tensor.shape()));
    }
  }

  /// One update from the accumulated gradients. A zero learning rate leaves
  /// parameters bitwise unchanged.
  void step() {
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    std::size_t k = 0;
    for (const auto& e : params_.entries()) {
      if (!e.trainable) continue;
      Tensor<T> p = e.tensor;
      auto m = m_[k].mutable_data();
      auto v = v_[k].mutable_data();
      ++k;
      if (!p.has_grad()) continue;
      auto g = p.grad().data();
      auto w = p.mutable_data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const T gi = g[i];
        m[i] = static_cast<T>(beta1_) * m[i] + static_cast<T>(1.0 - beta1_) * gi;
        v[i] = static_cast<T>(beta2_) * v[i] + static_cast<T>(1.0 - beta2_) * gi * gi;
        if (lr_ == 0.0) continue;
        const T mhat = m[i] / static_cast<T>(c1);
        const T vhat = v[i] / static_cast<T>(c2);
        w[i] -= static_cast<T>(lr_) * mhat / (std::sqrt(vhat) + static_cast<T>(eps_));
      }
    }
  }

  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t s) { steps_ = s; }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

 private:
  ParameterSet<T>& params_;
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t steps_ = 0;
  std::vector<std::string> names_;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace omnimix
