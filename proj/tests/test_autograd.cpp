#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qfae/autograd.hpp"
#include "qfae/gradcheck.hpp"
#include "qfae/imaging.hpp"
#include "qfae/nn.hpp"

using namespace qfae;
using ad::Matrix;
using ad::Param;
using ad::Tape;
using ad::Var;
using Md = Matrix<double>;

namespace {

Param<double> rnd(const std::string& name, int r, int c, std::uint64_t seed) {
  auto p = nn::make_param<double>(name, r, c, true);
  std::mt19937_64 rng(seed);
  nn::init_normal(p, 1.0, rng);
  return p;
}

// Weighted sum so every output coordinate matters.
Var reduce(Tape<double>& t, Var y) {
  Md w(t.rows(y), t.cols(y));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = std::sin(0.37 * static_cast<double>(i) + 0.1);
  return t.mean(t.mul(y, t.constant(w)));
}

double check(const std::function<Var(Tape<double>&)>& f, const nn::ParamList<double>& ps) {
  std::mt19937_64 rng(0);
  return gradcheck::compare(f, ps, {}, rng);
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
  auto a = rnd("a", 3, 4, 1), b = rnd("b", 3, 4, 2);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.add(t.param(a), t.param(b))); }, {&a, &b}), 1e-7);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.sub(t.param(a), t.param(b))); }, {&a, &b}), 1e-7);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.mul(t.param(a), t.param(b))); }, {&a, &b}), 1e-7);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.scale(t.param(a), -1.7)); }, {&a}), 1e-7);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.gelu(t.param(a))); }, {&a}), 1e-7);
}

TEST(Autograd, ReusedOperandAccumulates) {
  auto a = rnd("a", 2, 3, 3);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.mul(t.param(a), t.param(a))); }, {&a}), 1e-7);
}

TEST(Autograd, LinearAlgebra) {
  auto x = rnd("x", 5, 4, 4), w = rnd("w", 3, 4, 5), bias = rnd("b", 1, 3, 6), m = rnd("m", 4, 2, 7);
  auto row = rnd("r", 1, 4, 8);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.linear(t.param(x), t.param(w), t.param(bias))); },
                  {&x, &w, &bias}),
            1e-7);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.matmul(t.param(x), t.param(m))); }, {&x, &m}), 1e-7);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.add_row(t.param(x), t.param(row))); }, {&x, &row}),
            1e-7);
}

TEST(Autograd, LayerNorm) {
  auto x = rnd("x", 4, 6, 9), g = rnd("g", 1, 6, 10), b = rnd("b", 1, 6, 11);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.layer_norm(t.param(x), t.param(g), t.param(b))); },
                  {&x, &g, &b}),
            1e-6);
  Tape<double> t;
  auto ones = nn::make_param<double>("o", 1, 6, false);
  ones.value.setOnes();
  auto zeros = nn::make_param<double>("z", 1, 6, false);
  const Md& y = t.value(t.layer_norm(t.param(x), t.param(ones), t.param(zeros)));
  for (int r = 0; r < 4; ++r) {
    EXPECT_NEAR(y.row(r).mean(), 0.0, 1e-12);
    EXPECT_NEAR(y.row(r).squaredNorm() / 6, 1.0, 1e-5);
  }
}

TEST(Autograd, Attention) {
  auto q = rnd("q", 3, 8, 12), k = rnd("k", 5, 8, 13), v = rnd("v", 5, 8, 14);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.attention(t.param(q), t.param(k), t.param(v), 2)); },
                  {&q, &k, &v}),
            1e-6);
  Tape<double> t;
  ad::AttentionProbs<double> probs;
  (void)t.attention(t.param(q), t.param(k), t.param(v), 4, &probs);
  ASSERT_EQ(probs.heads.size(), 4u);
  for (const auto& p : probs.heads) {
    EXPECT_EQ(p.rows(), 3);
    EXPECT_EQ(p.cols(), 5);
    for (int r = 0; r < 3; ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
  }
}

TEST(Autograd, SlicingAndReshaping) {
  auto a = rnd("a", 4, 6, 15), b = rnd("b", 2, 6, 16);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.slice_cols(t.param(a), 1, 3)); }, {&a}), 1e-7);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.slice_rows(t.param(a), 2, 2)); }, {&a}), 1e-7);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.reshape(t.param(a), 3, 8)); }, {&a}), 1e-7);
  EXPECT_LT(check(
                [&](Tape<double>& t) {
                  const Var parts[] = {t.param(a), t.param(b), t.param(a)};
                  return reduce(t, t.concat_rows(parts));
                },
                {&a, &b}),
            1e-7);
}

TEST(Autograd, GatherPatchifyMatchesImagingPath) {
  imaging::ImageTensor img(3, 8, 8);
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<float> u(0, 1);
  for (float& v : img.data) v = u(rng);
  auto [tokens, grid] = imaging::patchify(img, 4);
  Tape<float> t;
  Matrix<float> planes = Eigen::Map<const Matrix<float>>(img.data.data(), 24, 8);
  const Var x = t.constant(planes);
  const Var g = t.gather(x, imaging::patchify_index(3, 8, 8, 4), grid.tokens(), grid.token_dim());
  EXPECT_EQ(t.value(g), tokens);

  auto p = rnd("p", 24, 8, 18);
  EXPECT_LT(check([&](Tape<double>& tt) { return reduce(tt, tt.gather(tt.param(p), imaging::patchify_index(3, 8, 8, 4), 4, 48)); },
                  {&p}),
            1e-7);
}

TEST(Autograd, CosineDistanceRows) {
  auto a = rnd("a", 6, 5, 19), b = rnd("b", 6, 5, 20);
  EXPECT_LT(check([&](Tape<double>& t) { return reduce(t, t.cosine_distance_rows(t.param(a), t.param(b))); },
                  {&a, &b}),
            1e-6);
  Tape<double> t;
  Md x(3, 2), y(3, 2);
  x << 1, 0, 1, 2, 0, 0;
  y << 0, 3, -2, -4, 1, 1;
  const Md& d = t.value(t.cosine_distance_rows(t.constant(x), t.constant(y)));
  EXPECT_DOUBLE_EQ(d(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(d(1, 0), 2.0);
  EXPECT_DOUBLE_EQ(d(2, 0), 1.0);  // zero norm
}

TEST(Autograd, MeanAbsDiff) {
  auto a = rnd("a", 3, 3, 21), b = rnd("b", 3, 3, 22);
  EXPECT_LT(check([&](Tape<double>& t) { return t.mean_abs_diff(t.param(a), t.param(b)); }, {&a, &b}), 1e-7);
  Tape<double> t;
  EXPECT_DOUBLE_EQ(t.value(t.mean_abs_diff(t.param(a), t.param(a)))(0, 0), 0.0);
}

TEST(Autograd, FrozenParamsGetNoGradient) {
  auto w = rnd("w", 2, 2, 23), x = rnd("x", 1, 2, 24);
  w.trainable = false;
  Tape<double> t;
  const Var wv = t.param(w);
  t.backward(t.mean(t.linear(t.param(x), wv)));
  EXPECT_EQ(t.grad(wv).size(), 0);
  const auto grads = t.param_grads();
  ASSERT_EQ(grads.size(), 1u);
  EXPECT_EQ(grads[0].first, &x);
}

TEST(Autograd, ParamLeafIsShared) {
  auto w = rnd("w", 2, 2, 25);
  Tape<double> t;
  EXPECT_EQ(t.param(w).id, t.param(w).id);
}

TEST(Autograd, ShapeMismatchThrows) {
  Tape<double> t;
  const Var a = t.constant(Md::Zero(2, 3));
  const Var b = t.constant(Md::Zero(3, 2));
  EXPECT_THROW(t.add(a, b), ValidationError);
  EXPECT_THROW(t.linear(a, b), ValidationError);
  EXPECT_THROW(t.attention(a, a, a, 2), ValidationError);
}
