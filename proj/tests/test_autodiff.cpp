#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "sif/autodiff.hpp"

using namespace sif;
using namespace sif::ad;

namespace {

Param random_param(const char* name, int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Param p{name, Matrix(r, c)};
  for (auto& x : p.value.data) x = d(rng);
  return p;
}

using Builder = std::function<Var(Graph&)>;

// Central differences on every entry of every param against backward().
double max_rel_error(std::vector<Param*> params, const Builder& loss) {
  GradStore grads;
  {
    Graph g(&grads);
    g.backward(loss(g));
  }
  double worst = 0.0;
  const double h = 1e-6;
  for (auto* p : params) {
    const Matrix* an = grads.find(*p);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data[i];
      p->value.data[i] = orig + h;
      double up, down;
      {
        Graph g;
        up = g.scalar(loss(g));
      }
      p->value.data[i] = orig - h;
      {
        Graph g;
        down = g.scalar(loss(g));
      }
      p->value.data[i] = orig;
      const double num = (up - down) / (2 * h);
      const double a = an ? an->data[i] : 0.0;
      worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
    }
  }
  return worst;
}

// Scalar probe with fixed random weights per output entry.
Var probe(Graph& g, Var x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  Matrix w(g.rows(x), g.cols(x));
  for (auto& v : w.data) v = d(rng);
  // sum(x * w) up to a constant: 0.5 * (|x + w|^2 - |x|^2)
  return g.weighted_sum({{g.sum_squares(g.add(x, g.constant(w))), 0.5}, {g.sum_squares(x), -0.5}});
}

}  // namespace

TEST(Autodiff, ElementwiseAndMatmul) {
  std::mt19937_64 rng(1);
  auto a = random_param("a", 3, 4, rng), b = random_param("b", 4, 2, rng), c = random_param("c", 3, 2, rng);
  auto row = random_param("row", 1, 2, rng);
  const double err = max_rel_error({&a, &b, &c, &row}, [&](Graph& g) {
    Var x = g.matmul(g.param(a), g.param(b));
    x = g.sub(g.add(x, g.param(c)), g.scale(g.param(c), 0.3));
    x = g.add_row(x, g.param(row));
    return probe(g, g.relu(x));
  });
  EXPECT_LT(err, 1e-6);
}

TEST(Autodiff, LayerNorm) {
  std::mt19937_64 rng(2);
  auto x = random_param("x", 5, 6, rng), gamma = random_param("g", 1, 6, rng), beta = random_param("b", 1, 6, rng);
  EXPECT_LT(max_rel_error({&x, &gamma, &beta},
                          [&](Graph& g) {
                            return probe(g, g.layer_norm(g.param(x), g.param(gamma), g.param(beta), 1e-5));
                          }),
            1e-5);
  Graph g;
  Var y = g.layer_norm(g.param(x), g.constant(Matrix(1, 6, 1.0)), g.constant(Matrix(1, 6, 0.0)), 1e-5);
  auto moments = [](std::span<const double> row) {
    double mean = 0, var = 0;
    for (double v : row) mean += v / row.size();
    for (double v : row) var += (v - mean) * (v - mean) / row.size();
    return std::pair{mean, var};
  };
  for (int r = 0; r < 5; ++r) {
    const auto [mean, var] = moments(g.value(y).row(r));
    const double in_var = moments(x.value.row(r)).second;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, in_var / (in_var + 1e-5), 1e-12);
  }
}

TEST(Autodiff, AttentionGradientsWithMask) {
  std::mt19937_64 rng(3);
  // 2 groups of 3 entries, strided as in the column mixer.
  auto q = random_param("q", 6, 4, rng), k = random_param("k", 6, 4, rng), v = random_param("v", 6, 4, rng);
  std::vector<std::uint8_t> mask{1, 1, 1, 1, 0, 0};
  AttentionLayout lay{2, 3, 1, 2};
  EXPECT_LT(max_rel_error({&q, &k, &v},
                          [&](Graph& g) {
                            return probe(g, g.attention(g.param(q), g.param(k), g.param(v), lay, 2, &mask));
                          }),
            1e-5);
}

TEST(Autodiff, AttentionWeightsSumToOneOverValidKeys) {
  std::mt19937_64 rng(4);
  auto q = random_param("q", 4, 2, rng), k = random_param("k", 4, 2, rng);
  Graph g;
  std::vector<std::uint8_t> mask{1, 1, 1, 0};
  Var ones = g.constant(Matrix(4, 2, 1.0));
  Var out = g.attention(g.param(q), g.param(k), ones, AttentionLayout{1, 4, 0, 1}, 1, &mask);
  for (double x : g.value(out).data) EXPECT_NEAR(x, 1.0, 1e-12);
  // A masked key with an enormous value never leaks.
  Matrix big(4, 2, 0.0);
  big(3, 0) = 1e9;
  Var leak = g.attention(g.param(q), g.param(k), g.constant(big), AttentionLayout{1, 4, 0, 1}, 1, &mask);
  for (double x : g.value(leak).data) EXPECT_EQ(x, 0.0);
}

TEST(Autodiff, SingleKeyAttentionIsIdentityOnValues) {
  std::mt19937_64 rng(5);
  auto q = random_param("q", 3, 4, rng), k = random_param("k", 3, 4, rng), v = random_param("v", 3, 4, rng);
  Graph g;
  Var out = g.attention(g.param(q), g.param(k), g.param(v), AttentionLayout{3, 1, 1, 1}, 2);
  for (std::size_t i = 0; i < v.value.size(); ++i) EXPECT_DOUBLE_EQ(g.value(out).data[i], v.value.data[i]);
}

TEST(Autodiff, ShapeOps) {
  std::mt19937_64 rng(6);
  auto a = random_param("a", 4, 3, rng), b = random_param("b", 4, 3, rng), t = random_param("t", 5, 3, rng);
  EXPECT_LT(max_rel_error({&a, &b, &t},
                          [&](Graph& g) {
                            Var x = g.interleave({g.param(a), g.param(b)});        // 8 x 3
                            Var y = g.group_mean(x, 2);                            // 4 x 3
                            Var z = g.concat_cols({y, g.slice_rows(x, 2, 4)});     // 4 x 6
                            Var w = g.reshape(z, 8, 3);
                            Var r = g.concat_rows({w, g.gather_rows(g.param(t), {4, 0, 4})});
                            return probe(g, r);
                          }),
            1e-6);
  Graph g;
  Var x = g.interleave({g.param(a), g.param(b)});
  EXPECT_EQ(g.value(x)(3, 1), b.value(1, 1));
  EXPECT_EQ(g.value(x)(2, 0), a.value(1, 0));
}

TEST(Autodiff, BceWithLogits) {
  Graph g;
  EXPECT_NEAR(g.scalar(g.bce_with_logits(g.constant(Matrix(1, 1, 0.0)), 1.0)), std::log(2.0), 1e-15);
  EXPECT_NEAR(g.scalar(g.bce_with_logits(g.constant(Matrix(1, 1, 800.0)), 0.0)), 800.0, 1e-9);
  EXPECT_TRUE(std::isfinite(g.scalar(g.bce_with_logits(g.constant(Matrix(1, 1, -800.0)), 1.0))));
  std::mt19937_64 rng(7);
  auto z = random_param("z", 1, 1, rng);
  EXPECT_LT(max_rel_error({&z}, [&](Graph& gg) { return gg.bce_with_logits(gg.param(z), 1.0); }), 1e-6);
}

TEST(Autodiff, StopGradientAndStraightThrough) {
  std::mt19937_64 rng(8);
  auto a = random_param("a", 2, 2, rng), b = random_param("b", 2, 2, rng);
  GradStore grads;
  Graph g(&grads);
  Var st = g.straight_through(g.param(a), g.stop_gradient(g.param(b)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g.value(st).data[i], b.value.data[i]);
  g.backward(g.sum_squares(st));
  ASSERT_NE(grads.find(a), nullptr);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(grads.find(a)->data[i], 2 * b.value.data[i], 1e-12);
  const Matrix* gb = grads.find(b);
  if (gb != nullptr)
    for (double x : gb->data) EXPECT_EQ(x, 0.0);
}

TEST(Autodiff, NearestRowTieBreak) {
  Matrix cb = Matrix::from_rows(4, 2, {5, 5, 1, 0, -1, 0, 1, 0});
  const std::vector<double> x{0, 0};
  EXPECT_EQ(nearest_row(x, cb), 1);
  const std::vector<double> y{1, 0};
  EXPECT_EQ(nearest_row(y, cb), 1);
}

TEST(Autodiff, MacCounting) {
  Graph g;
  Var a = g.constant(Matrix(3, 4, 1.0));
  Var b = g.constant(Matrix(4, 5, 1.0));
  g.matmul(a, b);
  EXPECT_EQ(g.macs(), 60u);
  Var q = g.constant(Matrix(6, 4, 0.1));
  g.attention(q, q, q, AttentionLayout{2, 3, 3, 1}, 2);
  // 2 groups x (3 queries x 3 keys x 4 wide) x 2 (scores + values)
  EXPECT_EQ(g.attention_macs(), 144u);
  EXPECT_EQ(g.macs(), 204u);
}

TEST(Autodiff, FreezeTapeReplaysIndices) {
  FreezeTape tape;
  tape.record();
  Param cb{"cb", Matrix::from_rows(3, 1, {0.0, 1.0, 2.0})};
  Param x{"x", Matrix::from_rows(1, 1, {0.9})};
  {
    Graph g(nullptr, &tape);
    EXPECT_EQ(g.nearest_rows(g.param(x), g.param(cb))[0], 1);
  }
  x.value(0, 0) = 1.8;
  tape.replay();
  {
    Graph g(nullptr, &tape);
    EXPECT_EQ(g.nearest_rows(g.param(x), g.param(cb))[0], 1);
  }
  EXPECT_TRUE(tape.index_flip());
}
