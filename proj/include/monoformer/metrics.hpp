#pragma once

// Standard depth-evaluation metrics with per-image median scaling and
// clamping. Aggregates pool per-pixel terms, so every valid pixel carries the
// same weight regardless of which image it belongs to.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "monoformer/tensor.hpp"

namespace monoformer {

struct MetricsReport {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;
  std::size_t pixels = 0;
};

struct EvalOptions {
  bool median_scaling = true;
  double min_depth = 1e-3;
  double cap = 80.0;

  void validate() const {
    if (!(min_depth > 0) || !(cap > min_depth)) throw ConfigError("eval: require 0 < min_depth < cap");
  }
};

namespace detail {
inline double median(std::vector<double> v) {
  const std::size_t n = v.size(), h = n / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h), v.end());
  const double hi = v[h];
  if (n % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h));
  return (lo + hi) / 2;
}
}  // namespace detail

class MetricAccumulator {
 public:
  explicit MetricAccumulator(EvalOptions opt = {}) : opt_(opt) { opt_.validate(); }

  // mask: undefined tensor means every pixel; otherwise pixels with mask > 0.
  void add(const Tensor& pred, const Tensor& gt, const Tensor& mask = {}) {
    if (pred.shape() != gt.shape() || (mask.defined() && mask.shape() != gt.shape()))
      throw DimensionError("evaluate: pred " + shape_str(pred.shape()) + ", gt " + shape_str(gt.shape()) +
                           (mask.defined() ? ", mask " + shape_str(mask.shape()) : std::string()) + " differ");
    std::vector<double> p, g;
    for (std::size_t i = 0; i < gt.numel(); ++i) {
      if (mask.defined() && !(mask[i] > 0)) continue;
      if (!(gt[i] > 0)) throw DataError("evaluate: non-positive ground truth at pixel " + std::to_string(i));
      if (!std::isfinite(pred[i])) throw DataError("evaluate: non-finite prediction at pixel " + std::to_string(i));
      p.push_back(pred[i]);
      g.push_back(gt[i]);
    }
    if (p.empty()) throw ContractError("evaluate: empty mask");
    double ratio = 1.0;
    if (opt_.median_scaling) {
      const double mp = detail::median(p);
      if (!(mp > 0)) throw DataError("evaluate: non-positive median prediction");
      ratio = detail::median(g) / mp;
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = std::clamp(p[i] * ratio, opt_.min_depth, opt_.cap);
      const double t = std::clamp(g[i], opt_.min_depth, opt_.cap);
      const double e = d - t;
      abs_rel_ += std::abs(e) / t;
      sq_rel_ += e * e / t;
      sq_ += e * e;
      const double le = std::log(d) - std::log(t);
      sq_log_ += le * le;
      const double r = std::max(d / t, t / d);
      d1_ += r < 1.25;
      d2_ += r < 1.25 * 1.25;
      d3_ += r < 1.25 * 1.25 * 1.25;
    }
    n_ += p.size();
  }

  MetricsReport report() const {
    if (n_ == 0) throw ContractError("evaluate: no pixels accumulated");
    const double n = static_cast<double>(n_);
    return {abs_rel_ / n, sq_rel_ / n, std::sqrt(sq_ / n), std::sqrt(sq_log_ / n),
            d1_ / n,      d2_ / n,     d3_ / n,           n_};
  }

 private:
  EvalOptions opt_;
  double abs_rel_ = 0, sq_rel_ = 0, sq_ = 0, sq_log_ = 0, d1_ = 0, d2_ = 0, d3_ = 0;
  std::size_t n_ = 0;
};

inline MetricsReport evaluate(const Tensor& pred, const Tensor& gt, const Tensor& mask = {}, EvalOptions opt = {}) {
  MetricAccumulator acc(opt);
  acc.add(pred, gt, mask);
  return acc.report();
}

inline std::string metrics_csv_header() {
  return "name,Abs Rel,Sq Rel,RMSE,RMSElog,δ<1.25,δ<1.25²,δ<1.25³";
}

inline std::string metrics_csv_row(const std::string& name, const MetricsReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", name.c_str(), r.abs_rel, r.sq_rel, r.rmse,
                r.rmse_log, r.delta1, r.delta2, r.delta3);
  return buf;
}

}  // namespace monoformer
