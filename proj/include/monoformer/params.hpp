#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "monoformer/tensor.hpp"

namespace monoformer {

// Named handles to trainable leaves. Handles share storage with the model, so
// updating a handle's data updates the model in place.
struct NamedParameter {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedParameter>;

inline void append(ParameterList& out, const std::string& name, const Tensor& t) {
  if (t.defined()) out.push_back({name, t});
}

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape, double stddev) {
    std::normal_distribution<double> n(0.0, stddev);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = n(rng_);
    return t.set_requires_grad();
  }

  // He-normal for a conv kernel [O, C, k, k].
  Tensor conv(std::size_t out, std::size_t in, std::size_t k, double gain = 1.0) {
    return normal({out, in, k, k}, gain * std::sqrt(2.0 / static_cast<double>(in * k * k)));
  }

  static Tensor constant(Shape shape, double value) { return Tensor(std::move(shape), value).set_requires_grad(); }

 private:
  std::mt19937_64 rng_;
};

}  // namespace monoformer
