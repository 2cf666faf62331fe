// Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails. Usage: acceptance [work-dir]

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "monoformer/cli.hpp"

using namespace monoformer;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and thresholds.
constexpr double kGradTol = 1e-4;
constexpr double kWarpGradTol = 1e-3;
constexpr double kGradcheckSeconds = 300;
constexpr double kIdentityTol = 1e-12;
constexpr double kRowSumTol = 1e-9;
constexpr int kPermutations = 100;
constexpr double kHomographyTol = 1e-6;
constexpr double kBoundarySlack = 1e-9;
constexpr double kPhotometricRatio = 0.5;
constexpr double kHeldOutAbsRel = 0.35;  // baseline run: 0.29
constexpr double kTrainSeconds = 1800;
constexpr double kMetricTol = 1e-12;
constexpr int kMetricTrials = 100;
constexpr double kProbeTol = 1e-12;
constexpr std::size_t kDeterminismTrainSteps = 50;

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, const char* f = "%.3g") {
  char b[64];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

Tensor random_tensor(Shape s, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct Workspace {
  fs::path root;
  RunConfig base;
  fs::path data() const { return root / "data"; }
  fs::path train() const { return root / "train"; }
  fs::path checkpoint() const { return train() / "checkpoint.mfc"; }
  RunConfig with_out(const std::string& name) const {
    RunConfig c = base;
    c.out = (root / name).string();
    fs::remove_all(c.out);
    c.data.dir = data().string();
    return c;
  }
};

Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  BlockCheckOptions opt;
  opt.tolerance = kGradTol;
  opt.warp_tolerance = kWarpGradTol;
  const auto checks = check_blocks(ModelConfig{}, opt);
  const double secs = seconds_since(t0);
  Outcome o;
  double worst = 0;
  for (const auto& c : checks) {
    worst = std::max(worst, c.report.max_rel_error);
    if (!c.report.passed) {
      o.pass = false;
      o.detail += c.block + " failed (" + num(c.report.max_rel_error) + "); ";
    }
  }
  o.pass = o.pass && checks.size() == 10 && secs < kGradcheckSeconds;
  o.detail += std::to_string(checks.size()) + " blocks, max rel error " + num(worst) + ", " + num(secs, "%.1f") + " s";
  return o;
}

Outcome gate_off_identity() {
  const std::size_t C = 16, g = 4, N = g * g;
  const Tensor tokens = random_tensor({N, C}, 1, -1, 1), a_p = random_tensor({N, C}, 2, -1, 1),
               a_c = random_tensor({N, C}, 3, -1, 1), x_prev = random_tensor({C, g, g}, 4, -1, 1);
  FusionStageWeights w{random_tensor({C, C, 3, 3}, 5, -0.3, 0.3), random_tensor({C}, 6, -0.1, 0.1), Tensor({1}, 0.6),
                       Tensor({1}, -0.3), random_tensor({C, 1}, 7, 0.5, 1.5), random_tensor({C, 1}, 8, -0.2, 0.2),
                       Tensor({C, 1}, 0.0)};
  const StageOutput gated = fuse_stage(tokens, a_p, a_c, x_prev, w, {});
  const double d1 = max_abs_diff(gated.output, gated.pre_gate);
  w.w_p = Tensor({1}, 0.0);
  w.w_c = Tensor({1}, 0.0);
  w.conv_w = Tensor({C, C, 3, 3}, 0.0);
  for (std::size_t c = 0; c < C; ++c) w.conv_w[((c * C + c) * 3 + 1) * 3 + 1] = 1.0;
  w.conv_b = Tensor({C}, 0.0);
  const StageOutput plain = fuse_stage(tokens, a_p, a_c, x_prev, w, {});
  // Z_l + X_prev written out index by index.
  double d2 = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t n = 0; n < N; ++n)
      d2 = std::max(d2, std::abs(plain.output[c * N + n] - (tokens[n * C + c] + x_prev[c * N + n])));
  return {d1 == 0.0 && d2 <= kIdentityTol, "gamma=0 diff " + num(d1) + ", identity path diff " + num(d2)};
}

Outcome attention_invariants() {
  ModelConfig cfg;
  cfg.backbone.positional_embedding = false;
  MonoFormer model(cfg, 3);
  ModelTrace trace;
  model.forward(random_tensor({3, 64, 64}, 9, 0, 1), &trace);
  double worst_row = 0;
  for (const auto& layer : trace.encoder.attention)
    for (const auto& a : layer) {
      const std::size_t n = a.dim(0);
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += a[i * n + j];
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }
    }
  // Encoder equivariance on the embedded input sequence.
  Initializer init(11);
  TransformerConfig tc = cfg.transformer;
  std::vector<LayerWeights> layers;
  for (std::size_t l = 0; l < tc.layers; ++l) layers.push_back(LayerWeights::init(tc, init));
  const Tensor base_tokens = random_tensor({17, 16}, 12, -2, 2);
  const Tensor base = encode({base_tokens, 4, 4}, layers, tc).layers.back().tokens;
  auto permute = [](const Tensor& z, const std::vector<std::size_t>& perm) {
    Tensor out = z.detach();
    const std::size_t c = z.dim(1);
    for (std::size_t r = 0; r < perm.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) out[(r + 1) * c + j] = z[(perm[r] + 1) * c + j];
    return out;
  };
  int exact = 0;
  for (int t = 0; t < kPermutations; ++t) {
    std::vector<std::size_t> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(static_cast<std::uint64_t>(t));
    std::shuffle(perm.begin(), perm.end(), rng);
    const Tensor out = encode({permute(base_tokens, perm), 4, 4}, layers, tc).layers.back().tokens;
    exact += max_abs_diff(out, permute(base, perm)) == 0.0;
  }
  return {worst_row <= kRowSumTol && exact == kPermutations,
          "max |row sum - 1| " + num(worst_row) + ", exact permutations " + std::to_string(exact) + "/" +
              std::to_string(kPermutations)};
}

double bilinear(const Tensor& img, std::size_t c, double u, double v) {
  const long H = static_cast<long>(img.dim(1)), W = static_cast<long>(img.dim(2));
  const long x0 = static_cast<long>(std::floor(u)), y0 = static_cast<long>(std::floor(v));
  const double fx = u - x0, fy = v - y0;
  auto px = [&](long x, long y) { return x < 0 || y < 0 || x >= W || y >= H ? 0.0 : img[(c * H + y) * W + x]; };
  return (1 - fx) * (1 - fy) * px(x0, y0) + fx * (1 - fy) * px(x0 + 1, y0) + (1 - fx) * fy * px(x0, y0 + 1) +
         fx * fy * px(x0 + 1, y0 + 1);
}

Outcome warp_correctness() {
  constexpr std::size_t S = 16;
  const CameraModel cam = CameraModel::centered(S, S);
  const Tensor src = random_tensor({3, S, S}, 21, 0, 1);
  const WarpResult id = warp(src, random_tensor({S, S}, 22, 1, 10), Pose::identity(), cam);
  const double id_diff = max_abs_diff(id.image, src);
  const double d = 4.0;
  double worst = 0;
  std::size_t mask_errors = 0;
  for (const Pose& pose : {Pose::from_axis_angle({0, 0, 0}, {0.4, 0, 0}),
                           Pose::from_axis_angle({0.02, -0.03, 0.01}, {0.3, -0.1, 0.2})}) {
    // Plane z = d: H = K (R + t n^T / d) K^-1, n = (0, 0, 1).
    const double K[9] = {cam.fx, 0, cam.cx, 0, cam.fy, cam.cy, 0, 0, 1};
    const double Ki[9] = {1 / cam.fx, 0, -cam.cx / cam.fx, 0, 1 / cam.fy, -cam.cy / cam.fy, 0, 0, 1};
    double M[9], T[9], Hm[9];
    for (int i = 0; i < 9; ++i) M[i] = pose.R[i];
    for (int i = 0; i < 3; ++i) M[i * 3 + 2] += pose.t[i] / d;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        T[i * 3 + j] = Hm[i * 3 + j] = 0;
        for (int k = 0; k < 3; ++k) T[i * 3 + j] += M[i * 3 + k] * Ki[k * 3 + j];
      }
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) Hm[i * 3 + j] += K[i * 3 + k] * T[k * 3 + j];
    const WarpResult w = warp(src, Tensor({S, S}, d), pose, cam);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double hz = Hm[6] * x + Hm[7] * y + Hm[8];
        const double u = (Hm[0] * x + Hm[1] * y + Hm[2]) / hz, v = (Hm[3] * x + Hm[4] * y + Hm[5]) / hz;
        const bool inside = u >= -kBoundarySlack && v >= -kBoundarySlack && u <= S - 1 + kBoundarySlack &&
                            v <= S - 1 + kBoundarySlack;
        mask_errors += w.mask[y * S + x] != (inside ? 1.0 : 0.0);
        for (std::size_t c = 0; c < 3; ++c)
          worst = std::max(worst, std::abs(w.image[(c * S + y) * S + x] - bilinear(src, c, u, v)));
      }
  }
  return {id_diff == 0.0 && worst <= kHomographyTol && mask_errors == 0,
          "identity diff " + num(id_diff) + ", homography max diff " + num(worst) + ", mask mismatches " +
              std::to_string(mask_errors)};
}

struct TrainingOutcome {
  Outcome outcome;
  double heldout_abs_rel = NAN;
};

TrainingOutcome desk_training(const Workspace& ws) {
  std::ostringstream log;
  RunConfig sc = ws.with_out("data");
  cmd_synth(sc, log);
  RunConfig tc = ws.with_out("train");
  const auto t0 = Clock::now();
  const TrainResult tr = cmd_train(tc, std::cout);
  const double secs = seconds_since(t0);
  RunConfig ec = ws.with_out("eval");
  ec.eval.checkpoint = ws.checkpoint().string();
  const EvalResult er = cmd_eval(ec, log);
  RunConfig tgt = ws.with_out("eval_target");
  tgt.eval.checkpoint = ec.eval.checkpoint;
  tgt.eval.frames = "target";
  const EvalResult et = cmd_eval(tgt, log);
  const double ratio = tr.final.photometric / tr.initial.photometric;
  const double abs_rel = er.rows.back().second.abs_rel;
  TrainingOutcome t;
  t.heldout_abs_rel = abs_rel;
  t.outcome.pass = ratio < kPhotometricRatio && abs_rel < kHeldOutAbsRel && secs < kTrainSeconds;
  t.outcome.detail = "photometric " + num(tr.initial.photometric, "%.5f") + " -> " + num(tr.final.photometric, "%.5f") +
                     " (ratio " + num(ratio) + " < " + num(kPhotometricRatio) + "), held-out Abs Rel " +
                     num(abs_rel, "%.4f") + " (< " + num(kHeldOutAbsRel) + "), target-frame Abs Rel " +
                     num(et.rows.back().second.abs_rel, "%.4f") + ", " + std::to_string(tc.train.steps) + " steps in " +
                     num(secs, "%.0f") + " s";
  return t;
}

Outcome metric_oracle() {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution keep(0.8);
  double worst = 0;
  for (int trial = 0; trial < kMetricTrials; ++trial) {
    const Tensor gt = random_tensor({8, 8}, 100 + trial, 0.5, 90), pred = random_tensor({8, 8}, 300 + trial, 0.01, 60);
    Tensor mask({8, 8});
    for (auto& m : mask.data()) m = keep(rng);
    mask[0] = 1;
    std::vector<double> p, g;
    for (std::size_t i = 0; i < 64; ++i)
      if (mask[i] > 0) {
        p.push_back(pred[i]);
        g.push_back(gt[i]);
      }
    auto med = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    };
    const double s = med(g) / med(p), n = static_cast<double>(p.size());
    double ar = 0, sr = 0, se = 0, sl = 0, d1 = 0, d2 = 0, d3 = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = std::min(std::max(p[i] * s, 1e-3), 80.0), t = std::min(std::max(g[i], 1e-3), 80.0);
      ar += std::fabs(d - t) / t;
      sr += (d - t) * (d - t) / t;
      se += (d - t) * (d - t);
      sl += std::pow(std::log(d / t), 2);
      const double q = std::max(d / t, t / d);
      d1 += q < 1.25;
      d2 += q < 1.5625;
      d3 += q < 1.953125;
    }
    const MetricsReport r = evaluate(pred, gt, mask);
    for (double diff : {r.abs_rel - ar / n, r.sq_rel - sr / n, r.rmse - std::sqrt(se / n), r.rmse_log - std::sqrt(sl / n),
                        r.delta1 - d1 / n, r.delta2 - d2 / n, r.delta3 - d3 / n})
      worst = std::max(worst, std::abs(diff));
  }
  const Tensor gt = random_tensor({8, 8}, 7, 1, 30), pred = random_tensor({8, 8}, 8, 1, 30);
  const MetricsReport base = evaluate(pred, gt);
  bool exact = true;
  for (double c : {0.25, 2.0, 1024.0}) {
    const MetricsReport r = evaluate(pred * c, gt);
    exact = exact && r.abs_rel == base.abs_rel && r.sq_rel == base.sq_rel && r.rmse == base.rmse &&
            r.rmse_log == base.rmse_log && r.delta1 == base.delta1 && r.delta2 == base.delta2 && r.delta3 == base.delta3;
  }
  return {worst <= kMetricTol && exact, "max oracle diff " + num(worst) + " over " + std::to_string(kMetricTrials) +
                                            " pairs, power-of-two rescaling " + (exact ? "exact" : "NOT exact")};
}

Outcome bias_probe(const Workspace& ws) {
  auto noise = [](std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    std::vector<double> v(n);
    for (auto& x : v) x = g(rng);
    return v;
  };
  std::vector<FeaturePair> pairs;
  for (std::size_t k = 0; k < 40; ++k) {
    const auto z = noise(12, k);
    pairs.push_back({z, z, Concept::shape});
    pairs.push_back({noise(12, 1000 + k), noise(12, 2000 + k), Concept::texture});
  }
  const BiasReport id = estimate_dimensionality(pairs);
  const bool construction = id.shape_count == 12 && id.texture_count == 0;
  const auto a = noise(50, 1), b = noise(50, 2);
  std::vector<double> aff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) aff[i] = 3.5 * a[i] - 2.0;
  const double r = correlation(a, b);
  const bool props = r >= -1 && r <= 1 && std::abs(correlation(b, a) - r) <= kProbeTol &&
                     std::abs(correlation(aff, b) - r) <= kProbeTol && std::abs(correlation(a, a) - 1) <= kProbeTol;

  std::ostringstream log;
  RunConfig pc = ws.with_out("probe");
  pc.probe.checkpoint = ws.checkpoint().string();
  pc.probe.corpus = ws.data().string();
  const ProbeResult pr = cmd_probe_bias(pc, log);
  const BiasReport& stem = pr.taps[0].second;
  const BiasReport& tr = pr.taps[1].second;
  const double rs = shape_texture_ratio(stem), rt = shape_texture_ratio(tr);
  return {construction && props && rt > rs,
          std::string("identity construction ") + (construction ? "exact" : "WRONG") + ", rho properties " +
              (props ? "hold" : "VIOLATED") + "; trained shape/texture: stem " + std::to_string(stem.shape_count) + "/" +
              std::to_string(stem.texture_count) + " = " + num(rs) + ", transformer " + std::to_string(tr.shape_count) +
              "/" + std::to_string(tr.texture_count) + " = " + num(rt)};
}

Outcome pencil_robustness(const Workspace& ws, double plain_abs_rel) {
  std::ostringstream log;
  RunConfig ec = ws.with_out("eval_pencil");
  ec.eval.checkpoint = ws.checkpoint().string();
  ec.eval.style = "pencil";
  const EvalResult r = cmd_eval(ec, log);
  const double abs_rel = r.rows.back().second.abs_rel;
  const bool in_range = r.finite && r.min_depth >= ec.model.ffd.min_depth && r.max_depth <= ec.model.ffd.max_depth;
  return {in_range && std::isfinite(abs_rel),
          "pencil Abs Rel " + num(abs_rel, "%.4f") + " vs " + num(plain_abs_rel, "%.4f") + " (factor " +
              num(abs_rel / plain_abs_rel) + "), depth range [" + num(r.min_depth) + ", " + num(r.max_depth) + "]"};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& f : detail::list_files(root)) out[f] = detail::read_file((root / f).string());
  return out;
}

Outcome determinism(const Workspace& ws) {
  std::ostringstream log;
  std::vector<std::string> same, differ;
  auto compare = [&](const std::string& what, const std::function<RunConfig(const std::string&)>& make,
                     const std::function<void(const RunConfig&)>& run) {
    const RunConfig a = make(what + "_a"), b = make(what + "_b");
    run(a);
    run(b);
    (tree(a.out) == tree(b.out) ? same : differ).push_back(what);
  };
  compare("synth", [&](const std::string& n) { return ws.with_out(n); }, [&](const RunConfig& c) { cmd_synth(c, log); });
  compare("train",
          [&](const std::string& n) {
            RunConfig c = ws.with_out(n);
            c.train.steps = kDeterminismTrainSteps;
            c.train.log_every = 0;
            return c;
          },
          [&](const RunConfig& c) { cmd_train(c, log); });
  compare("eval",
          [&](const std::string& n) {
            RunConfig c = ws.with_out(n);
            c.eval.checkpoint = ws.checkpoint().string();
            return c;
          },
          [&](const RunConfig& c) { cmd_eval(c, log); });
  for (const std::string style : {"watercolor", "pencil", "shuffle"})
    compare("stylize_" + style,
            [&](const std::string& n) {
              RunConfig c = ws.with_out(n);
              c.stylize.input = ws.data().string();
              c.stylize.style = style;
              return c;
            },
            [&](const RunConfig& c) { cmd_stylize(c, log); });
  std::string d = "byte-identical: ";
  for (const auto& s : same) d += s + " ";
  if (!differ.empty()) {
    d += "; differ: ";
    for (const auto& s : differ) d += s + " ";
  }
  d += "(train rerun at " + std::to_string(kDeterminismTrainSteps) + " steps)";
  return {differ.empty(), d};
}

}  // namespace

int main(int argc, char** argv) {
  Workspace ws;
  ws.root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "monoformer_acceptance";
  fs::create_directories(ws.root);
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& f) {
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %d %-26s %s  %s\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  };
  report(1, "gradient-integrity", gradient_integrity);
  report(2, "gate-off-identity", gate_off_identity);
  report(3, "attention-invariants", attention_invariants);
  report(4, "warp-correctness", warp_correctness);
  double heldout = NAN;
  report(5, "desk-scale-training", [&] {
    TrainingOutcome t = desk_training(ws);
    heldout = t.heldout_abs_rel;
    return t.outcome;
  });
  report(6, "metric-oracle", metric_oracle);
  report(7, "bias-probe", [&] { return bias_probe(ws); });
  report(8, "texture-shift-robustness", [&] { return pencil_robustness(ws, heldout); });
  report(9, "determinism", [&] { return determinism(ws); });
  std::printf("acceptance: %d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
