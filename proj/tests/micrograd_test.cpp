#include <gtest/gtest.h>

#include <bitset>
#include <cmath>
#include <random>

#include "xq/micrograd/adam.hpp"
#include "xq/micrograd/gradcheck.hpp"

using namespace xq;
using namespace xq::mg;

namespace {

Var<double> random_tensor(Shape s, std::mt19937_64& rng, bool grad = true, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(s.size());
  for (auto& x : v) x = u(rng);
  return tensor<double>(s, std::move(v), grad);
}

}  // namespace

TEST(Autodiff, SquareDerivative) {
  auto x = tensor<double>({1, 1}, {3.0}, true);
  backward(mul(x, x));
  EXPECT_DOUBLE_EQ(x->grad[0], 6.0);
}

TEST(Autodiff, SoftmaxSumHasZeroGradient) {
  std::mt19937_64 rng(1);
  auto z = random_tensor({1, 7}, rng);
  auto y = sum(softmax_rows(z));
  EXPECT_NEAR(y->item(), 1.0, 1e-12);
  backward(y);
  for (double g : z->grad) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Autodiff, DenseGeluDenseMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto x = random_tensor({5, 4}, rng);
    auto w1 = random_tensor({4, 6}, rng), b1 = random_tensor({1, 6}, rng);
    auto w2 = random_tensor({6, 3}, rng), b2 = random_tensor({1, 3}, rng);
    auto r = random_tensor({5, 3}, rng, false);
    auto loss = [&] { return sum(mul(add_tiled(matmul(gelu(add_tiled(matmul(x, w1), b1)), w2), b2), r)); };
    EXPECT_LT(check_gradients({x, w1, b1, w2, b2}, loss), 1e-5) << "seed " << seed;
  }
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({3, 4}, rng);
  auto w = random_tensor({4, 4}, rng);
  auto shared = tanh(matmul(x, w));
  backward(sum(mul(shared, shared)));
  const auto g_shared = x->grad;
  const auto gw_shared = w->grad;
  x->zero_grad();
  w->zero_grad();
  auto a = tanh(matmul(x, w));
  auto b = tanh(matmul(x, w));
  backward(sum(mul(a, b)));
  for (std::size_t i = 0; i < g_shared.size(); ++i) EXPECT_NEAR(g_shared[i], x->grad[i], 1e-14);
  for (std::size_t i = 0; i < gw_shared.size(); ++i) EXPECT_NEAR(gw_shared[i], w->grad[i], 1e-14);
}

TEST(Autodiff, UnreachedGradientsStayZero) {
  auto x = tensor<double>({1, 2}, {1, 2}, true);
  auto unused = tensor<double>({1, 2}, {3, 4}, true);
  unused->ensure_grad();
  backward(sum(x));
  for (double g : unused->grad) EXPECT_EQ(g, 0.0);
}

TEST(Autodiff, NoGradRecordsNothing) {
  auto x = tensor<double>({1, 2}, {1, 2}, true);
  NoGrad off;
  auto y = mul(x, x);
  EXPECT_FALSE(y->requires_grad);
  EXPECT_TRUE(y->parents.empty());
}

TEST(Autodiff, ShapeMismatchAtBuild) {
  auto a = zeros<double>({2, 3});
  auto b = zeros<double>({2, 3});
  EXPECT_THROW(matmul(a, b), ShapeMismatch);
  EXPECT_THROW(add(a, zeros<double>({3, 2})), ShapeMismatch);
  EXPECT_THROW(tensor<double>({2, 2}, {1, 2, 3}), ShapeMismatch);
  EXPECT_THROW(infer_shape(Dense{4, 3}, FeatShape{1, 1, 5}), ShapeMismatch);
  EXPECT_THROW(infer_shape(Residual{{Dense{4, 3}}}, FeatShape{1, 1, 4}), ShapeMismatch);
  EXPECT_THROW(infer_shape(MultiHeadAttention{6, 4}, FeatShape{1, 1, 6}), ShapeMismatch);
  EXPECT_THROW(infer_shape(Conv2D{5, 1, 1, 1}, FeatShape{5, 5, 1}), ShapeMismatch);
}

TEST(Autodiff, ShapeInference) {
  EXPECT_EQ(infer_shape(Conv2D{7, 3, 8, 2}, FeatShape{10, 9, 3}), (FeatShape{5, 5, 8}));
  EXPECT_EQ(infer_shape(MaxPool2D{}, FeatShape{5, 5, 8}), (FeatShape{2, 2, 8}));
  EXPECT_EQ(infer_shape(Conv2D{3, 3, 8, 1}, FeatShape{10, 9, 3}), (FeatShape{10, 9, 8}));
  EXPECT_EQ(infer_shape(Dense{3, 5}, FeatShape{10, 9, 3}), (FeatShape{10, 9, 5}));
}

TEST(Autodiff, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(3);
  const int h = 5, w = 4, cin = 2, cout = 3, k = 3;
  auto x = random_tensor({2 * h * w, cin}, rng, false);
  auto wt = random_tensor({k * k * cin, cout}, rng, false);
  auto y = conv2d(x, wt, ConvGeom{2, h, w, k, 1, 1});
  for (int b = 0; b < 2; ++b)
    for (int oy = 0; oy < h; ++oy)
      for (int ox = 0; ox < w; ++ox)
        for (int o = 0; o < cout; ++o) {
          double s = 0;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy + ky - 1, ix = ox + kx - 1;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              for (int c = 0; c < cin; ++c)
                s += (*x)((b * h + iy) * w + ix, c) * (*wt)((ky * k + kx) * cin + c, o);
            }
          EXPECT_NEAR((*y)((b * h + oy) * w + ox, o), s, 1e-12);
        }
}

TEST(Softmax, SumsToOneAndShiftInvariant) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    auto z = random_tensor({3, 11}, rng, false, -20, 20);
    auto shifted = add_scalar(z, 37.5);
    auto p = softmax_rows(z), q = softmax_rows(shifted);
    for (int r = 0; r < 3; ++r) {
      double s = 0;
      for (int c = 0; c < 11; ++c) {
        s += (*p)(r, c);
        EXPECT_NEAR((*p)(r, c), (*q)(r, c), 1e-6);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(LayerNormRows, StandardizesEachRow) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({4, 16}, rng, false, -50, 50);
    auto y = layernorm_rows(x);
    for (int r = 0; r < 4; ++r) {
      double mu = 0, var = 0;
      for (int c = 0; c < 16; ++c) mu += (*y)(r, c) / 16;
      for (int c = 0; c < 16; ++c) var += ((*y)(r, c) - mu) * ((*y)(r, c) - mu) / 16;
      EXPECT_LT(std::abs(mu), 1e-6);
      EXPECT_NEAR(var, 1.0, 1e-4);
    }
  }
}

TEST(MaskedLogSoftmax, MaskedEntriesGetNothing) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({2, 10}, rng);
  std::vector<std::bitset<10>> masks{std::bitset<10>("0000100101"), std::bitset<10>("1000000000")};
  auto lp = masked_log_softmax(x, masks);
  for (int r = 0; r < 2; ++r) {
    double s = 0;
    for (int c = 0; c < 10; ++c)
      if (masks[r][c]) s += std::exp((*lp)(r, c));
      else EXPECT_EQ((*lp)(r, c), 0.0);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_DOUBLE_EQ((*lp)(1, 9), 0.0);  // single legal entry has log-prob 0
  auto w = random_tensor({2, 10}, rng, false);
  backward(sum(mul(lp, w)));
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 10; ++c)
      if (!masks[r][c]) EXPECT_EQ(x->grad[r * 10 + c], 0.0);
  auto fd = [&] { return sum(mul(masked_log_softmax(x, masks), w)); };
  EXPECT_LT(check_gradients({x}, fd), 1e-6);
}

TEST(Structural, OpsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto a = random_tensor({6, 4}, rng), b = random_tensor({6, 4}, rng), s = random_tensor({2, 3}, rng);
  auto d = random_tensor({2, 5}, rng);
  std::vector<std::vector<int>> slots{{0, -1, 2, 1}, {2, 2, -1, 0}};
  auto r1 = random_tensor({12, 4}, rng, false);
  auto r2 = random_tensor({2, 20}, rng, false);
  auto r3 = random_tensor({6, 6}, rng, false);
  auto loss = [&] {
    auto cat = concat_groups(a, b, 2);
    auto picked = group_rows(cat, 2, 1, 4);
    auto mixed = concat_cols<double>({slice_cols(picked, 1, 2), repeat_rows(slice_cols(s, 0, 2), 4)});
    auto att = group_matmul(softmax_rows(group_matmul_nt(a, b, 3)), b, 3);
    auto pair = pair_sum(s, d, slots);
    auto m = mean_groups(exp(scale(a, 0.3)), 2);
    return add(add(add(sum(mul(transpose(mixed), transpose(mixed))), sum(mul(att, a))), sum(mul(pair, r2))),
               add(sum(mul(matmul_nt(a, b), r3)), add(sum(square(m)), sum(mul(reshape(cat, {12, 4}), r1)))));
  };
  EXPECT_LT(check_gradients({a, b, s, d}, loss), 1e-6);
}

TEST(GradCheck, SpecExamples) {
  EXPECT_LT(grad_check(Dense{4, 3}, 1), 1e-6);
  EXPECT_LT(grad_check(MultiHeadAttention{8, 2}, 1), 1e-5);
  EXPECT_LT(grad_check(Conv2D{3, 2, 2, 1}, 1), 1e-5);
}

TEST(GradCheck, EveryLayerOverSeeds) {
  for (const auto& c : default_gradcheck_suite())
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
      const double err = grad_check(c.spec, seed);
      EXPECT_LT(err, c.tolerance) << describe(c.spec) << " seed " << seed;
      EXPECT_LT(err, 1e-4);
    }
}

TEST(GradCheck, CatchesSignFlippedBackwardRules) {
  const std::vector<std::pair<Op, LayerSpec>> cases{
      {Op::Gelu, GELU{}},          {Op::Relu, ReLU{}},           {Op::MatMul, Dense{4, 3}},
      {Op::Conv2D, Conv2D{3, 2, 2}}, {Op::SoftmaxRows, Softmax{}}, {Op::LayerNormRows, LayerNorm{6}},
      {Op::GroupMatMulNT, MultiHeadAttention{8, 2}}, {Op::MaxPool2D, MaxPool2D{}},
  };
  for (const auto& [op, spec] : cases) {
    FaultInjection fault(op);
    EXPECT_GT(grad_check(spec, 1), 1e-2) << describe(spec);
  }
  EXPECT_LT(grad_check(GELU{}, 1), 1e-6);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto p = tensor<float>({1, 3}, {1.0f, -2.0f, 3.5f}, true);
  p->ensure_grad();
  AdamState<float> st;
  st.cfg.lr = 0.1;
  for (int i = 0; i < 10; ++i) adam_step<float>({p}, st);
  EXPECT_EQ(p->value, (std::vector<float>{1.0f, -2.0f, 3.5f}));
}

TEST(Adam, MinimizesQuadratic) {
  auto x = tensor<double>({1, 1}, {0.0}, true);
  AdamState<double> st;
  st.cfg.lr = 0.1;
  for (int i = 0; i < 500; ++i) {
    x->zero_grad();
    backward(square(add_scalar(x, -5.0)));
    adam_step<double>({x}, st);
  }
  EXPECT_LT(std::abs(x->value[0] - 5.0), 1e-2);
}

TEST(Adam, Deterministic) {
  auto run = [] {
    auto p = tensor<float>({1, 4}, {0.1f, 0.2f, 0.3f, 0.4f}, true);
    AdamState<float> st;
    for (int i = 0; i < 50; ++i) {
      p->zero_grad();
      backward(sum(mul(p, p)));
      adam_step<float>({p}, st);
    }
    return p->value;
  };
  EXPECT_EQ(run(), run());
}
