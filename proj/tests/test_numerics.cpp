#include <gtest/gtest.h>

#include <random>

#include "monoformer/gradcheck.hpp"
#include "monoformer/serialize.hpp"

using namespace monoformer;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

void expect_all_near(const Tensor& t, const std::vector<double>& want, double tol) {
  ASSERT_EQ(t.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t[i], want[i], tol) << "index " << i;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor b = random_tensor({3, 3}, 1);
  Tensor r = matmul(Tensor::eye(3), b);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(r[i], b[i]);
}

TEST(Matmul, HandComputedProduct) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {1, 1});
  Tensor r = matmul(a, b);
  EXPECT_EQ(r.shape(), (Shape{2, 1}));
  expect_all_near(r, {3, 7}, 0);
}

TEST(Matmul, ZeroAnnihilates) {
  Tensor r = matmul(Tensor::zeros({2, 2}), random_tensor({2, 2}, 2));
  for (double v : r.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] x [2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, AssociativeOnRandomTriples) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Tensor a = random_tensor({4, 4}, 3 * s), b = random_tensor({4, 4}, 3 * s + 1), c = random_tensor({4, 4}, 3 * s + 2);
    Tensor l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(l[i], r[i], 1e-9);
  }
}

TEST(Softmax, SymmetricPair) { expect_all_near(softmax(Tensor({2}, {0, 0}), 0), {0.5, 0.5}, 1e-15); }

TEST(Softmax, ExpNormalizeValues) {
  expect_all_near(softmax(Tensor({3}, {1, 2, 3}), 0), {0.09003057317038046, 0.24472847105479767, 0.6652409557748219},
                  1e-4);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Tensor s = softmax(Tensor({2}, {1000, 0}), 0);
  EXPECT_TRUE(s.all_finite());
  EXPECT_NEAR(s[0], 1.0, 1e-15);
  EXPECT_LT(s[1], 1e-300);
}

TEST(Softmax, SlicesSumToOneAlongAnyAxis) {
  Tensor x = random_tensor({3, 5, 4}, 11, -10, 10);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Tensor s = softmax(x, axis);
    Tensor t = sum_axis(s, axis);
    for (double v : t.values()) EXPECT_NEAR(v, 1.0, 1e-9);
    for (double v : s.values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tensor y = layer_norm(Tensor({1, 4}, 3.0), Tensor::ones({4}), Tensor::zeros({4}), 1e-5);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementRow) {
  Tensor y = layer_norm(Tensor({1, 2}, {1, 3}), Tensor::ones({2}), Tensor::zeros({2}), 1e-12);
  expect_all_near(y, {-1, 1}, 1e-9);
}

TEST(LayerNorm, ZeroGainGivesBias) {
  Tensor bias({3}, {0.5, -1, 2});
  Tensor y = layer_norm(random_tensor({4, 3}, 5), Tensor::zeros({3}), bias);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y.at({r, j}), bias[j]);
}

TEST(LayerNorm, PerRowMomentsAreStandardized) {
  Tensor x = random_tensor({6, 16}, 8, -3, 3);
  Tensor y = layer_norm(x, Tensor::ones({16}), Tensor::zeros({16}), 1e-12);
  for (std::size_t r = 0; r < 6; ++r) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < 16; ++j) mu += y.at({r, j});
    mu /= 16;
    for (std::size_t j = 0; j < 16; ++j) var += (y.at({r, j}) - mu) * (y.at({r, j}) - mu);
    var /= 16;
    EXPECT_LT(std::abs(mu), 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(LayerNorm, RejectsNonPositiveEps) {
  EXPECT_THROW(layer_norm(Tensor({1, 2}), Tensor::ones({2}), Tensor::zeros({2}), 0.0), ContractError);
}

TEST(Gelu, ReferenceValues) {
  Tensor g = gelu(Tensor({3}, {0.0, 10.0, 1.0}));
  EXPECT_EQ(g[0], 0.0);
  EXPECT_NEAR(g[1], 10.0, 1e-12);
  EXPECT_NEAR(g[2], 0.8413447460685429, 1e-4);
}

TEST(Gelu, MonotoneOnPositiveGrid) {
  // x * Phi(x) is increasing for x above its minimum near -0.75.
  std::vector<double> xs;
  for (int i = 0; i <= 400; ++i) xs.push_back(-0.7 + 0.02 * i);
  Tensor g = gelu(Tensor({xs.size()}, xs));
  for (std::size_t i = 1; i < xs.size(); ++i) EXPECT_GT(g[i], g[i - 1]);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Tensor x = random_tensor({1, 5, 4}, 9);
  Tensor w({1, 1, 1, 1}, 1.0);
  Tensor y = conv2d(x, w, Tensor::zeros({1}));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, OnesKernelSumsWindow) {
  Tensor y = conv2d(Tensor::ones({1, 3, 3}), Tensor::ones({1, 1, 3, 3}), Tensor(), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(y[0], 9.0);
}

TEST(Conv2d, BiasOnly) {
  Tensor y = conv2d(random_tensor({2, 4, 4}, 3), Tensor::zeros({3, 2, 3, 3}), Tensor({3}, {1, 2, 3}), 1, 1);
  EXPECT_EQ(y.shape(), (Shape{3, 4, 4}));
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y[o * 16 + i], static_cast<double>(o + 1));
}

TEST(Conv2d, OutputExtentFormula) {
  Tensor y = conv2d(Tensor::ones({1, 9, 7}), Tensor::ones({2, 1, 3, 3}), Tensor(), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, (9 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1}));
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  EXPECT_THROW(conv2d(Tensor::ones({1, 2, 2}), Tensor::ones({1, 1, 5, 5}), Tensor(), 1, 1), DimensionError);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = random_tensor({3, 2}, 1).set_requires_grad();
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  Tensor x = random_tensor({5}, 2).set_requires_grad();
  backward(sum(mul(x, x)));
  auto g = x.grad();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(g[i], 2 * x[i]);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x = random_tensor({4}, 3).set_requires_grad();
  backward(sum(x * 3.0));
  backward(sum(x * 3.0));
  for (double g : x.grad()) EXPECT_EQ(g, 6.0);
  x.zero_grad();
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor x = random_tensor({4}, 3).set_requires_grad();
  EXPECT_THROW(backward(x * 2.0), ContractError);
}

TEST(Backward, GraphIsReleasedAfterBackward) {
  Tensor x = random_tensor({4}, 3).set_requires_grad();
  Tensor y = exp(x);
  Tensor l = sum(y);
  EXPECT_FALSE(l.is_leaf());
  backward(l);
  EXPECT_TRUE(l.is_leaf());
  EXPECT_TRUE(y.is_leaf());
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = random_tensor({4}, 3).set_requires_grad();
  NoGradGuard ng;
  Tensor y = exp(x);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Graph, TopologicalOrderVisitsEachOpOnce) {
  Tensor x = random_tensor({3}, 4).set_requires_grad();
  Tensor a = exp(x);
  Tensor b = a * a + a;  // a has three consumers
  Tensor l = sum(b);
  Graph g = Graph::trace(l);
  std::vector<TensorImpl*> seen;
  for (auto* t : g.order) {
    EXPECT_EQ(std::count(seen.begin(), seen.end(), t), 0);
    if (t->node) {
      for (auto& in : t->node->inputs)
        EXPECT_NE(std::find(seen.begin(), seen.end(), in.get()), seen.end()) << "input not before consumer";
    }
    seen.push_back(t);
  }
  EXPECT_EQ(g.order.back(), l.impl().get());
}

TEST(Backward, SharedTensorSumsBothContributions) {
  auto f = [](const Tensor& x) {
    Tensor t = tanh(x);
    return sum(mul(exp(t), t));  // t feeds two consumers
  };
  auto rep = grad_check(f, random_tensor({6}, 10));
  EXPECT_TRUE(rep.passed) << rep.max_rel_error << " " << rep.worst;
}

TEST(Broadcasting, RowAndScalarOperandsReduceTheirGradients) {
  Tensor a = random_tensor({3, 4}, 1);
  Tensor row = random_tensor({1, 4}, 2);
  Tensor col = random_tensor({3, 1}, 3);
  Tensor s = random_tensor({1}, 4);
  auto rep = grad_check(
      [](const std::vector<Tensor>& in) { return sum(square((in[0] * in[1] + in[2]) / (in[3] + 5.0))); },
      {a, row, col, s});
  EXPECT_TRUE(rep.passed) << rep.worst;
  EXPECT_THROW(add(Tensor({2, 3}), Tensor({3, 2})), DimensionError);
}

// Finite-difference agreement for every primitive on inputs in [-2, 2].
TEST(GradCheck, EveryPrimitive) {
  const std::vector<std::pair<std::string, std::function<Tensor(const std::vector<Tensor>&)>>> cases = {
      {"add", [](auto& in) { return probe_loss(add(in[0], in[1])); }},
      {"sub", [](auto& in) { return probe_loss(sub(in[0], in[1])); }},
      {"mul", [](auto& in) { return probe_loss(mul(in[0], in[1])); }},
      {"div", [](auto& in) { return probe_loss(div(in[0], in[1] * in[1] + 1.0)); }},
      {"minimum", [](auto& in) { return probe_loss(minimum(in[0], in[1])); }},
      {"exp", [](auto& in) { return probe_loss(exp(in[0])); }},
      {"log", [](auto& in) { return probe_loss(log(in[0] * in[0] + 0.5)); }},
      {"sqrt", [](auto& in) { return probe_loss(sqrt(in[0] * in[0] + 0.5)); }},
      {"abs", [](auto& in) { return probe_loss(abs(in[0])); }},
      {"tanh", [](auto& in) { return probe_loss(tanh(in[0])); }},
      {"sigmoid", [](auto& in) { return probe_loss(sigmoid(in[0])); }},
      {"gelu", [](auto& in) { return probe_loss(gelu(in[0])); }},
      {"matmul", [](auto& in) { return probe_loss(matmul(in[0], transpose(in[1]))); }},
      {"softmax0", [](auto& in) { return probe_loss(softmax(in[0], 0)); }},
      {"softmax1", [](auto& in) { return probe_loss(softmax(in[0], 1)); }},
      {"layer_norm", [](auto& in) {
         return probe_loss(layer_norm(in[0], slice(in[1], 0, 0, 1), slice(in[1], 0, 1, 2), 1e-5));
       }},
      {"sum_axis", [](auto& in) { return probe_loss(square(sum_axis(in[0], 1))); }},
      {"mean_axis", [](auto& in) { return probe_loss(square(mean_axis(in[0], 0, false))); }},
      {"permute", [](auto& in) { return probe_loss(square(permute(reshape(in[0], {2, 2, 3}), {2, 0, 1}))); }},
      {"slice", [](auto& in) { return probe_loss(square(slice(in[0], 1, 1, 3))); }},
      {"concat", [](auto& in) { return probe_loss(square(concat({in[0], in[1]}, 0))); }},
  };
  for (const auto& [name, f] : cases) {
    Tensor a = random_tensor({4, 3}, 100), b = random_tensor({4, 3}, 200);
    if (name == "layer_norm") b = random_tensor({2, 3}, 200);
    auto rep = grad_check(f, {a, b});
    EXPECT_TRUE(rep.passed) << name << ": " << rep.max_rel_error << " " << rep.worst;
  }
}

TEST(GradCheck, SpatialPrimitives) {
  Tensor x = random_tensor({2, 6, 5}, 1);
  Tensor w = random_tensor({3, 2, 3, 3}, 2);
  Tensor b = random_tensor({3}, 3);
  for (std::size_t stride : {1, 2}) {
    auto rep = grad_check(
        [stride](const std::vector<Tensor>& in) { return probe_loss(conv2d(in[0], in[1], in[2], stride, 1)); },
        {x, w, b});
    EXPECT_TRUE(rep.passed) << "conv stride " << stride << ": " << rep.worst;
  }
  auto up = grad_check([](const Tensor& t) { return probe_loss(upsample2x(t)); }, x);
  EXPECT_TRUE(up.passed) << up.worst;

  // Sample points kept away from integer coordinates, where bilinear
  // interpolation has kinks.
  Tensor img = random_tensor({2, 5, 6}, 4, 0, 1);
  Tensor u({3, 3}), v({3, 3});
  for (std::size_t i = 0; i < 9; ++i) {
    u[i] = 0.37 + 0.53 * static_cast<double>(i);
    v[i] = 0.25 + 0.4 * static_cast<double>(i);
  }
  auto gs = grad_check([](const std::vector<Tensor>& in) { return probe_loss(grid_sample(in[0], in[1], in[2])); },
                       {img, u, v});
  EXPECT_TRUE(gs.passed) << gs.worst;
}

TEST(GradCheck, SoftmaxSumOfSquaresAndMatmulChain) {
  auto r1 = grad_check([](const Tensor& x) { return sum(square(softmax(x, 1))); }, random_tensor({3, 5}, 12));
  EXPECT_TRUE(r1.passed) << r1.worst;
  auto r2 = grad_check(
      [](const std::vector<Tensor>& in) { return sum(matmul(matmul(in[0], in[1]), in[2])); },
      {random_tensor({2, 3}, 1), random_tensor({3, 4}, 2), random_tensor({4, 2}, 3)});
  EXPECT_TRUE(r2.passed) << r2.worst;
}

TEST(GradCheck, CorruptedRuleFails) {
  // A hand-written op whose backward is off by a factor of two.
  auto bad_square = [](const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
    TensorImpl* xi = x.impl().get();
    return make_result("bad_square", x.shape(), std::move(out), {x}, [xi](TensorImpl& o) {
      double* g = xi->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * 4.0 * xi->data[i];
    });
  };
  auto rep = grad_check([&](const Tensor& x) { return sum(bad_square(x)); }, random_tensor({4}, 1));
  EXPECT_FALSE(rep.passed);

  GradientFaultInjection fault;
  auto rep2 = grad_check([](const Tensor& x) { return sum(tanh(x)); }, random_tensor({4}, 1));
  EXPECT_FALSE(rep2.passed);
}

TEST(Serialization, MagicAndLayout) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  const std::string bytes = encode_tensor(t);
  ASSERT_EQ(bytes.size(), 4u + 4 + 2 * 8 + 6 * 8);
  EXPECT_EQ(bytes.substr(0, 4), "MFT1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2);  // rank, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2);  // first extent
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 3);
  double first;
  std::memcpy(&first, bytes.data() + 24, 8);
  EXPECT_EQ(first, 1.0);
}

TEST(Serialization, RoundTripPreservesBits) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    std::mt19937_64 rng(s);
    Shape shape;
    for (std::size_t r = 0; r < 1 + s % 4; ++r) shape.push_back(1 + rng() % 5);
    Tensor t = random_tensor(shape, s, -1e6, 1e6);
    Tensor back = decode_tensor(encode_tensor(t));
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_EQ(back.values(), t.values());
  }
  NamedTensors entries{{"a.weight", random_tensor({2, 2}, 1)}, {"b", random_tensor({3}, 2)}};
  auto back = decode_container(encode_container(entries));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].first, "a.weight");
  EXPECT_EQ(back[1].second.values(), entries[1].second.values());
}

TEST(Serialization, RejectsCorruptRecords) {
  std::string bytes = encode_tensor(Tensor({2}, {1, 2}));
  EXPECT_THROW(decode_tensor(bytes.substr(0, bytes.size() - 1)), FormatError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_tensor(bytes), FormatError);
}
