#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "monoformer/ops.hpp"

namespace monoformer {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // Coordinates probed per input; 0 probes every coordinate. Sampled
  // coordinates are drawn deterministically from `seed`.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool passed = false;
  std::string worst;  // "input[i] coord j: analytic a vs numeric n"
};

using TensorFunction = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares backward() against central differences for every input.
//
// The per-coordinate error is |a - n| / max(|a|, |n|, floor), where floor is
// 1e-3 of the largest numeric gradient magnitude seen (and at least 1e-10).
// The floor keeps near-zero entries from dominating through cancellation
// noise; every other entry is held to a true relative tolerance.
inline GradCheckReport grad_check(const TensorFunction& f, std::vector<Tensor> inputs,
                                  const GradCheckOptions& opt = {}) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  Tensor loss = f(inputs);
  if (loss.numel() != 1) throw ContractError("grad_check: function must return a scalar");
  backward(loss);

  std::mt19937_64 rng(opt.seed);
  struct Probe {
    std::size_t input, coord;
    double analytic, numeric;
  };
  std::vector<Probe> probes;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& x = inputs[k];
    const auto analytic = x.grad();
    std::vector<std::size_t> coords(x.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opt.max_coords && coords.size() > opt.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    auto data = x.data();
    for (auto i : coords) {
      const double saved = data[i];
      double plus, minus;
      {
        NoGradGuard ng;
        data[i] = saved + opt.h;
        plus = f(inputs).item();
        data[i] = saved - opt.h;
        minus = f(inputs).item();
      }
      data[i] = saved;
      probes.push_back({k, i, analytic[i], (plus - minus) / (2.0 * opt.h)});
    }
  }

  double scale = 0.0;
  for (const auto& p : probes) scale = std::max(scale, std::abs(p.numeric));
  const double floor = std::max(1e-3 * scale, 1e-10);
  GradCheckReport rep;
  rep.coords_checked = probes.size();
  for (const auto& p : probes) {
    const double denom = std::max({std::abs(p.analytic), std::abs(p.numeric), floor});
    const double err = std::abs(p.analytic - p.numeric) / denom;
    if (!(err <= rep.max_rel_error)) {
      rep.max_rel_error = err;
      rep.worst = "input[" + std::to_string(p.input) + "] coord " + std::to_string(p.coord) + ": analytic " +
                  std::to_string(p.analytic) + " vs numeric " + std::to_string(p.numeric);
    }
  }
  rep.passed = std::isfinite(rep.max_rel_error) && rep.max_rel_error < opt.tol;
  for (auto& x : inputs) x.zero_grad();
  return rep;
}

inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                  const GradCheckOptions& opt = {}) {
  return grad_check([&](const std::vector<Tensor>& in) { return f(in[0]); }, std::vector<Tensor>{x}, opt);
}

// Fixed random weights in [-1, 1] for reducing a non-scalar output to a
// scalar probe loss sum(out * R).
inline Tensor probe_weights(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor r(shape);
  for (auto& v : r.data()) v = u(rng);
  return r;
}

inline Tensor probe_loss(const Tensor& out, std::uint64_t seed = 7) {
  return sum(mul(out, probe_weights(out.shape(), seed)));
}

}  // namespace monoformer
