#pragma once

#include <cstdint>
#include <random>

#include "monoformer/tensor.hpp"

namespace mftest {

inline monoformer::Tensor random_tensor(monoformer::Shape s, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  monoformer::Tensor t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline double max_abs_diff(const monoformer::Tensor& a, const monoformer::Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace mftest
