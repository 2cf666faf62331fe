#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "monoformer/biasprobe.hpp"
#include "monoformer/ops.hpp"
#include "monoformer/metrics.hpp"
#include "monoformer/textureshift.hpp"
#include "support.hpp"

using namespace monoformer;
using mftest::max_abs_diff;
using mftest::random_tensor;

namespace {

// Direct per-pixel recomputation with a full sort for the medians.
MetricsReport brute_force(const Tensor& pred, const Tensor& gt, const Tensor& mask, double cap) {
  std::vector<double> p, g;
  for (std::size_t i = 0; i < gt.numel(); ++i)
    if (mask[i] > 0) {
      p.push_back(pred[i]);
      g.push_back(gt[i]);
    }
  auto med = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  const double s = med(g) / med(p);
  MetricsReport r;
  const double n = static_cast<double>(p.size());
  double se = 0, sl = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double d = p[i] * s, t = g[i];
    d = d < 1e-3 ? 1e-3 : (d > cap ? cap : d);
    t = t < 1e-3 ? 1e-3 : (t > cap ? cap : t);
    r.abs_rel += std::fabs(d - t) / t / n;
    r.sq_rel += (d - t) * (d - t) / t / n;
    se += (d - t) * (d - t);
    sl += (std::log(d) - std::log(t)) * (std::log(d) - std::log(t));
    const double q = d > t ? d / t : t / d;
    if (q < 1.25) r.delta1 += 1 / n;
    if (q < 1.5625) r.delta2 += 1 / n;
    if (q < 1.953125) r.delta3 += 1 / n;
  }
  r.rmse = std::sqrt(se / n);
  r.rmse_log = std::sqrt(sl / n);
  return r;
}

void expect_reports_near(const MetricsReport& a, const MetricsReport& b, double tol) {
  EXPECT_NEAR(a.abs_rel, b.abs_rel, tol);
  EXPECT_NEAR(a.sq_rel, b.sq_rel, tol);
  EXPECT_NEAR(a.rmse, b.rmse, tol);
  EXPECT_NEAR(a.rmse_log, b.rmse_log, tol);
  EXPECT_NEAR(a.delta1, b.delta1, tol);
  EXPECT_NEAR(a.delta2, b.delta2, tol);
  EXPECT_NEAR(a.delta3, b.delta3, tol);
}

void expect_reports_equal(const MetricsReport& a, const MetricsReport& b) {
  EXPECT_EQ(a.abs_rel, b.abs_rel);
  EXPECT_EQ(a.sq_rel, b.sq_rel);
  EXPECT_EQ(a.rmse, b.rmse);
  EXPECT_EQ(a.rmse_log, b.rmse_log);
  EXPECT_EQ(a.delta1, b.delta1);
  EXPECT_EQ(a.delta2, b.delta2);
  EXPECT_EQ(a.delta3, b.delta3);
}

}  // namespace

TEST(Metrics, PerfectPredictionAndScaledPrediction) {
  const Tensor gt = random_tensor({8, 8}, 1, 1, 20);
  MetricsReport r = evaluate(gt, gt);
  EXPECT_EQ(r.abs_rel, 0.0);
  EXPECT_EQ(r.rmse, 0.0);
  EXPECT_EQ(r.delta1, 1.0);
  EXPECT_EQ(r.delta3, 1.0);
  MetricsReport s = evaluate(gt * 2.0, gt);
  EXPECT_EQ(s.abs_rel, 0.0);
  EXPECT_EQ(s.rmse_log, 0.0);
}

TEST(Metrics, HandExampleWithoutScaling) {
  EvalOptions opt;
  opt.median_scaling = false;
  MetricsReport r = evaluate(Tensor({2}, std::vector<double>{1, 2}), Tensor({2}, std::vector<double>{2, 2}), {}, opt);
  EXPECT_DOUBLE_EQ(r.abs_rel, 0.25);
  EXPECT_DOUBLE_EQ(r.rmse, std::sqrt(0.5));
  EXPECT_DOUBLE_EQ(r.delta1, 0.5);
  EXPECT_DOUBLE_EQ(r.sq_rel, 0.25);
}

TEST(Metrics, MatchesBruteForceOracle) {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution keep(0.8);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor gt = random_tensor({8, 8}, 100 + trial, 0.5, 90);
    const Tensor pred = random_tensor({8, 8}, 300 + trial, 0.01, 60);
    Tensor mask({8, 8});
    for (auto& m : mask.data()) m = keep(rng);
    mask[0] = 1;
    expect_reports_near(evaluate(pred, gt, mask), brute_force(pred, gt, mask, 80.0), 1e-12);
  }
}

TEST(Metrics, ScaleInvariance) {
  const Tensor gt = random_tensor({8, 8}, 7, 1, 30);
  const Tensor pred = random_tensor({8, 8}, 8, 1, 30);
  const MetricsReport base = evaluate(pred, gt);
  for (double c : {0.25, 2.0, 1024.0}) expect_reports_equal(evaluate(pred * c, gt), base);
  for (double c : {0.3, 1.7, 13.0}) expect_reports_near(evaluate(pred * c, gt), base, 1e-12);
}

TEST(Metrics, DeltasAreMonotone) {
  for (int t = 0; t < 20; ++t) {
    MetricsReport r = evaluate(random_tensor({8, 8}, 40 + t, 0.1, 10), random_tensor({8, 8}, 80 + t, 0.1, 10));
    EXPECT_LE(r.delta1, r.delta2);
    EXPECT_LE(r.delta2, r.delta3);
    EXPECT_LE(r.delta3, 1.0);
  }
}

TEST(Metrics, ErrorsAndPooling) {
  const Tensor gt({4}, 1.0);
  EXPECT_THROW(evaluate(gt, gt, Tensor({4}, 0.0)), ContractError);
  Tensor bad = gt.detach();
  bad[2] = 0;
  EXPECT_THROW(evaluate(gt, bad), DataError);

  // Pixel pooling: a one-pixel image weighs a quarter of a four-pixel one.
  EvalOptions opt;
  opt.median_scaling = false;
  MetricAccumulator acc(opt);
  acc.add(Tensor({1}, 2.0), Tensor({1}, 1.0));
  acc.add(Tensor({4}, 1.0), Tensor({4}, 1.0));
  EXPECT_DOUBLE_EQ(acc.report().abs_rel, 0.2);
  EXPECT_EQ(acc.report().pixels, 5u);
}

TEST(Metrics, CsvColumnOrder) {
  EXPECT_EQ(metrics_csv_header(), "name,Abs Rel,Sq Rel,RMSE,RMSElog,δ<1.25,δ<1.25²,δ<1.25³");
  EXPECT_EQ(metrics_csv_row("x", {0.5, 0.25, 1, 2, 0.1, 0.2, 0.3, 4}), "x,0.5,0.25,1,2,0.1,0.2,0.3");
}

TEST(TextureShift, WatercolorFixedPointAndSmoothing) {
  const Tensor flat({3, 12, 12}, 0.37);
  EXPECT_EQ(max_abs_diff(watercolor(flat), flat), 0.0);

  Tensor board({3, 16, 16});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) board[(c * 16 + y) * 16 + x] = (x + y) % 2 ? 0.55 : 0.45;
  auto variance = [](const Tensor& t) {
    double m = 0, v = 0;
    for (double x : t.values()) m += x / t.numel();
    for (double x : t.values()) v += (x - m) * (x - m) / t.numel();
    return v;
  };
  const Tensor smooth = watercolor(board);
  EXPECT_LT(variance(smooth), variance(board));
  EXPECT_EQ(max_abs_diff(watercolor(board), smooth), 0.0);
}

TEST(TextureShift, WatercolorKeepsStrongEdges) {
  Tensor step({3, 16, 16});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) step[(c * 16 + y) * 16 + x] = x < 8 ? 0.1 : 0.9;
  const Tensor out = watercolor(step);
  for (std::size_t y = 0; y < 16; ++y) {
    const double jump = out[y * 16 + 8] - out[y * 16 + 7];
    EXPECT_GE(jump, 0.5 * 0.8);
  }
  for (double v : out.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(TextureShift, PencilSketch) {
  const Tensor flat({3, 10, 10}, 0.4);
  const Tensor white = pencil_sketch(flat);
  for (double v : white.values()) EXPECT_NEAR(v, 1.0, 1e-12);

  const Tensor img = random_tensor({3, 12, 12}, 9, 0, 1);
  const Tensor s = pencil_sketch(img);
  for (std::size_t i = 0; i < 144; ++i) {
    EXPECT_EQ(s[i], s[144 + i]);
    EXPECT_EQ(s[i], s[288 + i]);
    EXPECT_GE(s[i], 0.0);
    EXPECT_LE(s[i], 1.0);
  }

  // Step edge: a dark band forms on the darker side next to the edge.
  Tensor step({3, 4, 24});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 24; ++x) step[(c * 4 + y) * 24 + x] = x < 12 ? 0.3 : 0.8;
  const Tensor e = pencil_sketch(step);
  EXPECT_LT(e[11], 0.8);
  EXPECT_NEAR(e[0], 1.0, 1e-3);
  EXPECT_NEAR(e[23], 1.0, 1e-9);
}

TEST(TextureShift, PatchShuffle) {
  const Tensor img = random_tensor({3, 16, 16}, 10, 0, 1);
  EXPECT_EQ(max_abs_diff(patch_shuffle(img, {16, 3}), img), 0.0);
  const Tensor a = patch_shuffle(img, {4, 3});
  EXPECT_EQ(max_abs_diff(a, patch_shuffle(img, {4, 3})), 0.0);
  EXPECT_GT(max_abs_diff(a, patch_shuffle(img, {4, 4})), 0.0);
  std::vector<double> x(img.values().begin(), img.values().end()), y(a.values().begin(), a.values().end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  EXPECT_EQ(x, y);
  EXPECT_THROW(patch_shuffle(img, {5, 0}), ConfigError);
}

TEST(TextureShift, UnknownStyleListsValidOnes) {
  try {
    apply_style("cubist", Tensor({3, 4, 4}), {});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("watercolor, pencil, shuffle"), std::string::npos);
  }
}

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

// Shape pairs repeat z_a, texture pairs draw independent z_b.
std::vector<FeaturePair> identity_construction(std::size_t pairs, std::size_t dims, bool swap) {
  std::vector<FeaturePair> out;
  for (std::size_t k = 0; k < pairs; ++k) {
    const auto z = noise(dims, k);
    out.push_back({z, z, swap ? Concept::texture : Concept::shape});
    out.push_back({noise(dims, 1000 + k), noise(dims, 2000 + k), swap ? Concept::shape : Concept::texture});
  }
  return out;
}

}  // namespace

TEST(BiasProbe, CorrelationProperties) {
  const auto z = noise(50, 1), w = noise(50, 2);
  std::vector<double> neg(z.size()), aff(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    neg[i] = -z[i];
    aff[i] = 3.5 * z[i] - 2.0;
  }
  EXPECT_NEAR(correlation(z, z), 1.0, 1e-12);
  EXPECT_NEAR(correlation(z, neg), -1.0, 1e-12);
  EXPECT_NEAR(correlation(aff, z), 1.0, 1e-12);
  EXPECT_NEAR(correlation(z, w), correlation(w, z), 1e-12);
  const double r = correlation(z, w);
  EXPECT_GE(r, -1.0);
  EXPECT_LE(r, 1.0);
  EXPECT_THROW(correlation(z, std::vector<double>(50, 1.0)), DegenerateInputError);
  EXPECT_THROW(correlation(z, noise(49, 3)), ContractError);
}

TEST(BiasProbe, IdentityConstructionAndSymmetry) {
  const BiasReport r = estimate_dimensionality(identity_construction(40, 12, false));
  EXPECT_EQ(r.shape_count, 12u);
  EXPECT_EQ(r.texture_count, 0u);
  const BiasReport s = estimate_dimensionality(identity_construction(40, 12, true));
  EXPECT_EQ(s.shape_count, 0u);
  EXPECT_EQ(s.texture_count, 12u);
  const BiasReport none = estimate_dimensionality(identity_construction(40, 12, false), 1.01);
  EXPECT_EQ(none.shape_count + none.texture_count, 0u);
}

TEST(BiasProbe, PairOrderDoesNotMatter) {
  auto pairs = identity_construction(30, 8, false);
  for (auto& p : pairs)
    if (p.concept_tag == Concept::shape) p.z_b[0] += 0.3 * p.z_a[1];
  const BiasReport a = estimate_dimensionality(pairs);
  std::mt19937_64 rng(4);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  const BiasReport b = estimate_dimensionality(pairs);
  EXPECT_EQ(a.rho_shape, b.rho_shape);
  EXPECT_EQ(a.rho_texture, b.rho_texture);
  EXPECT_EQ(a.shape_count, b.shape_count);
  EXPECT_LE(a.shape_count + a.texture_count, a.dimensions);
}

TEST(BiasProbe, ErrorsAndDegenerateDimensions) {
  auto pairs = identity_construction(10, 4, false);
  pairs[3].z_b.pop_back();
  EXPECT_THROW(estimate_dimensionality(pairs), ContractError);
  pairs = identity_construction(10, 4, false);
  for (auto& p : pairs) p.z_a[2] = p.z_b[2] = 1.0;
  const BiasReport r = estimate_dimensionality(pairs);
  EXPECT_TRUE(std::isnan(r.rho_shape[2]));
  EXPECT_EQ(r.assignment[2], Assignment::none);
  EXPECT_EQ(r.shape_count, 3u);
  EXPECT_THROW(encode_pairs(flatten, {Tensor({1})}, {}, {}), ContractError);
}
