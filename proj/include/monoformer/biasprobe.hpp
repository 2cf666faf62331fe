#pragma once

// Shape/texture dimensionality of encoder features.
//
// Each FeaturePair holds the flattened features of two images that share
// either shape (original vs pencil sketch) or texture (original vs patch
// shuffle). For every feature dimension d and concept c, rho_c[d] is the
// correlation, across the pairs of concept c, between z_a[d] and z_b[d].
// Dimension d is assigned to the concept with the larger rho when that rho
// exceeds the threshold. Dimensions whose responses do not vary across the
// pairs of a concept have no rho for that concept.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "monoformer/tensor.hpp"

namespace monoformer {

class DegenerateInputError : public DataError {
 public:
  using DataError::DataError;
};

enum class Concept { shape, texture };

struct FeaturePair {
  std::vector<double> z_a, z_b;
  Concept concept_tag = Concept::shape;
};

enum class Assignment { none, shape, texture };

struct BiasReport {
  std::size_t dimensions = 0;
  std::size_t shape_count = 0, texture_count = 0;
  std::vector<double> rho_shape, rho_texture;  // NaN where degenerate
  std::vector<Assignment> assignment;
};

namespace detail {
inline double sorted_total(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0;
  for (double x : v) s += x;
  return s;
}
}  // namespace detail

// Pearson correlation. Sums are taken over sorted terms, so the value does
// not depend on element order.
inline double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty())
    throw ContractError("correlation: vectors of length " + std::to_string(a.size()) + " and " +
                        std::to_string(b.size()));
  const double n = static_cast<double>(a.size());
  const double ma = detail::sorted_total(a) / n, mb = detail::sorted_total(b) / n;
  std::vector<double> ca(a.size()), cb(b.size()), cab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    ca[i] = da * da;
    cb[i] = db * db;
    cab[i] = da * db;
  }
  const double va = detail::sorted_total(ca) / n, vb = detail::sorted_total(cb) / n;
  if (va <= 1e-12 || vb <= 1e-12) throw DegenerateInputError("correlation: variance below 1e-12");
  const double rho = (detail::sorted_total(cab) / n) / (std::sqrt(va) * std::sqrt(vb));
  return std::clamp(rho, -1.0, 1.0);
}

inline BiasReport estimate_dimensionality(const std::vector<FeaturePair>& pairs, double threshold = 0.1) {
  if (pairs.empty()) throw ContractError("estimate_dimensionality: no pairs");
  const std::size_t D = pairs[0].z_a.size();
  std::size_t n_shape = 0, n_texture = 0;
  for (const auto& p : pairs) {
    if (p.z_a.size() != D || p.z_b.size() != D)
      throw ContractError("estimate_dimensionality: mixed feature lengths (" + std::to_string(p.z_a.size()) + "/" +
                          std::to_string(p.z_b.size()) + " vs " + std::to_string(D) + ")");
    (p.concept_tag == Concept::shape ? n_shape : n_texture)++;
  }
  if (n_shape < 2 || n_texture < 2)
    throw ContractError("estimate_dimensionality: need at least two pairs per concept");
  BiasReport r;
  r.dimensions = D;
  r.rho_shape.assign(D, std::numeric_limits<double>::quiet_NaN());
  r.rho_texture = r.rho_shape;
  r.assignment.assign(D, Assignment::none);
  std::vector<double> a, b;
  for (std::size_t d = 0; d < D; ++d) {
    for (Concept c : {Concept::shape, Concept::texture}) {
      a.clear();
      b.clear();
      for (const auto& p : pairs)
        if (p.concept_tag == c) {
          a.push_back(p.z_a[d]);
          b.push_back(p.z_b[d]);
        }
      try {
        (c == Concept::shape ? r.rho_shape : r.rho_texture)[d] = correlation(a, b);
      } catch (const DegenerateInputError&) {
      }
    }
    const double s = r.rho_shape[d], t = r.rho_texture[d];
    const double best = std::max(std::isnan(s) ? -INFINITY : s, std::isnan(t) ? -INFINITY : t);
    if (!(best > threshold)) continue;
    if (!std::isnan(s) && s == best && !(t == best)) {
      r.assignment[d] = Assignment::shape;
      ++r.shape_count;
    } else if (!std::isnan(t) && t == best && !(s == best)) {
      r.assignment[d] = Assignment::texture;
      ++r.texture_count;
    }
  }
  return r;
}

using FeatureEncoder = std::function<std::vector<double>(const Tensor&)>;

// Builds shape pairs (original, sketch) and texture pairs (original, shuffled).
inline std::vector<FeaturePair> encode_pairs(const FeatureEncoder& encoder, const std::vector<Tensor>& originals,
                                             const std::vector<Tensor>& shape_variants,
                                             const std::vector<Tensor>& texture_variants) {
  if (originals.size() != shape_variants.size() || originals.size() != texture_variants.size())
    throw ContractError("encode_pairs: unpaired corpora (" + std::to_string(originals.size()) + ", " +
                        std::to_string(shape_variants.size()) + ", " + std::to_string(texture_variants.size()) + ")");
  std::vector<FeaturePair> out;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    const auto z = encoder(originals[i]);
    out.push_back({z, encoder(shape_variants[i]), Concept::shape});
    out.push_back({z, encoder(texture_variants[i]), Concept::texture});
  }
  return out;
}

inline std::vector<double> flatten(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

inline std::string bias_csv(const BiasReport& r) {
  std::string out = "dimension,rho_shape,rho_texture,assignment\n";
  char buf[128];
  for (std::size_t d = 0; d < r.dimensions; ++d) {
    const char* a = r.assignment[d] == Assignment::shape ? "shape" : r.assignment[d] == Assignment::texture ? "texture" : "none";
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%s\n", d, r.rho_shape[d], r.rho_texture[d], a);
    out += buf;
  }
  return out;
}

inline double shape_texture_ratio(const BiasReport& r) {
  return r.texture_count == 0 ? (r.shape_count == 0 ? 0.0 : INFINITY)
                              : static_cast<double>(r.shape_count) / static_cast<double>(r.texture_count);
}

}  // namespace monoformer
