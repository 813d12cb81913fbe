#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "omnimix/tensor.hpp"

namespace omnimix {

using Rng = std::mt19937_64;

/// Ordered registry of named model tensors. Trainable entries require
/// gradients; buffers (running statistics) do not.
template <typename T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable;
  };

  Tensor<T> add(const std::string& name, Tensor<T> tensor, bool trainable = true) {
    if (index_.count(name)) {
      throw ContractError("duplicate parameter name '" + name + "'");
    }
    tensor.set_requires_grad(trainable);
    index_.emplace(name, entries_.size());
    entries_.push_back({name, tensor, trainable});
    return tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw std::out_of_range("no parameter named '" + name + "'");
    }
    return entries_[it->second].tensor;
  }

  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& e : entries_) {
      if (e.trainable) out.push_back(e.tensor);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.trainable) n += e.tensor.size();
    }
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Freezes or unfreezes every trainable entry.
  void set_trainable(bool flag) {
    for (auto& e : entries_) {
      if (e.trainable) e.tensor.set_requires_grad(flag);
    }
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Freezes a parameter set for the lifetime of the guard.
template <typename T>
class FreezeGuard {
 public:
  explicit FreezeGuard(ParameterSet<T>& params) : params_(params) {
    params_.set_trainable(false);
  }
  ~FreezeGuard() { params_.set_trainable(true); }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParameterSet<T>& params_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)). Draws in double so float and
/// double models built from one seed hold the same values.
template <typename T>
Tensor<T> uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(data));
}

/// Standard normal draws (in double precision, then converted).
template <typename T>
Tensor<T> randn(Shape shape, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace omnimix
