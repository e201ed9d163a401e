#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "qfae/errors.hpp"
#include "qfae/perceptual.hpp"

using namespace qfae;
using namespace qfae::perceptual;

namespace {

encoder::BackboneSpec toy_spec(int depth, int patch) {
  encoder::BackboneSpec s;
  s.name = "toy_perceptual";
  s.depth = depth;
  s.width = 16;
  s.heads = 2;
  s.patch_size = patch;
  s.special_tokens = 1;
  return s;
}

imaging::ImageTensor random_normalized(int side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  imaging::ImageTensor img(3, side, side);
  for (float& v : img.data) v = g(rng);
  img.normalized = true;
  return img;
}

Map random_map(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 2.0);
  Map m(h, w);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

std::vector<Eigen::MatrixXd> as_vector(const AnomalyMapStack& s) { return {s.maps.begin(), s.maps.end()}; }

}  // namespace

TEST(Perceptual, PyramidGridsAtFullSide) {
  const auto bb = encoder::make_toy_backbone(2, toy_spec(21, 16), 4);
  const PerceptualModel<float> model(bb, 224, {32, 56});
  const ScaleSet s{{16, 20}, {32, 56}};
  const auto x = random_normalized(224, 1);
  const auto pyr = model.features(x, s);
  ASSERT_EQ(pyr.features.size(), 4u);
  EXPECT_EQ(pyr.grids, (std::vector<int>{7, 4, 7, 4}));
  EXPECT_EQ(pyr.keys[1], (FeatureKey{16, 56}));
  EXPECT_EQ(pyr.features[0].rows(), 49);
  EXPECT_EQ(pyr.features[1].rows(), 16);
  const auto again = model.features(x, s);
  EXPECT_EQ(again.features[3], pyr.features[3]);
  const auto maps = anomaly_maps(pyr, model.features(random_normalized(224, 2), s));
  ASSERT_EQ(maps.size(), 4u);
  EXPECT_EQ(maps.maps[0].rows(), 7);
  EXPECT_EQ(maps.maps[1].rows(), 4);
}

TEST(Perceptual, SinglePatchGrid) {
  const auto bb = encoder::make_toy_backbone(2, toy_spec(2, 16), 4);
  const PerceptualModel<float> model(bb, 224, {16});
  EXPECT_EQ(model.features(random_normalized(224, 3), ScaleSet{{1}, {16}}).grids[0], 14);
  EXPECT_THROW(model.variant(32), ValidationError);
}

TEST(AnomalyMap, FixedPoints) {
  std::mt19937_64 rng(4);
  Eigen::MatrixXd f = Eigen::MatrixXd::Random(12, 5);
  EXPECT_EQ(layer_anomaly_map(f, f, 3, 4).maxCoeff(), 0.0);
  const Map anti = layer_anomaly_map(f, -f, 3, 4);
  for (Eigen::Index i = 0; i < anti.size(); ++i) EXPECT_NEAR(anti.data()[i], 2.0, 1e-12);
  Eigen::MatrixXd a(1, 2), b(1, 2);
  a << 1, 0;
  b << 0, 1;
  EXPECT_DOUBLE_EQ(layer_anomaly_map(a, b, 1, 1)(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(layer_anomaly_map(a, Eigen::MatrixXd::Zero(1, 2), 1, 1)(0, 0), 1.0);
}

TEST(AnomalyMap, BoundedAndScaleInvariant) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> lam(0.01, 100.0);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::MatrixXd f(16, 8), h(16, 8);
    for (Eigen::Index i = 0; i < f.size(); ++i) {
      f.data()[i] = g(rng);
      h.data()[i] = g(rng);
    }
    const Map m = layer_anomaly_map(f, h, 4, 4);
    EXPECT_GE(m.minCoeff(), 0.0);
    EXPECT_LE(m.maxCoeff(), 2.0);
    Eigen::MatrixXd hs = h;
    for (int r = 0; r < 16; ++r) hs.row(r) *= lam(rng);
    EXPECT_LT((layer_anomaly_map(f, hs, 4, 4) - m).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Combine, ConstantProductAndZeroAbsorbs) {
  const Map c = combine_across_scales({Map::Constant(7, 7, 0.5), Map::Constant(4, 4, 0.2)}, 7, 7);
  for (Eigen::Index i = 0; i < c.size(); ++i) EXPECT_NEAR(c.data()[i], 0.1, 1e-12);
  std::mt19937_64 rng(6);
  const Map z = combine_across_scales({random_map(5, 5, rng), Map::Zero(3, 3)}, 5, 5);
  EXPECT_EQ(z.cwiseAbs().maxCoeff(), 0.0);
  const Map single = random_map(4, 4, rng);
  EXPECT_EQ(combine_across_scales({single}, 4, 4), single);
  EXPECT_THROW(combine_across_scales({}, 4, 4), ValidationError);
}

TEST(Score, WorkedExamples) {
  AnomalyMapStack s;
  s.maps = {Map{{0, 1}, {2, 3}}, Map{{1, 1}, {1, 1}}};
  EXPECT_DOUBLE_EQ(image_score(s, ScoreMode::MaxThenMean), 2.0);
  EXPECT_DOUBLE_EQ(image_score(s, ScoreMode::MeanThenMax), 1.5);
  AnomalyMapStack c;
  c.maps = {Map::Constant(3, 3, 0.7)};
  EXPECT_DOUBLE_EQ(image_score(c, ScoreMode::MaxThenMean), 0.7);
  EXPECT_DOUBLE_EQ(image_score(c, ScoreMode::MeanThenMax), 0.7);
  EXPECT_THROW(image_score(AnomalyMapStack{}, ScoreMode::MaxThenMean), ValidationError);
}

TEST(Score, MaxThenMeanDominatesMeanOfMeans) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    AnomalyMapStack s;
    for (int n = 0; n < 1 + trial % 5; ++n) s.maps.push_back(random_map(3 + n, 3 + n, rng));
    double mean_of_means = 0;
    for (const auto& m : s.maps) mean_of_means += m.mean();
    mean_of_means /= static_cast<double>(s.size());
    EXPECT_GE(image_score(s, ScoreMode::MaxThenMean), mean_of_means);
    EXPECT_NEAR(image_score(s, ScoreMode::MaxThenMean), oracle::score_max_then_mean(as_vector(s)), 1e-12);
    EXPECT_NEAR(image_score(s, ScoreMode::MeanThenMax), oracle::score_mean_then_max(as_vector(s)), 1e-12);
  }
}

TEST(PixelMap, WorkedExamples) {
  AnomalyMapStack s;
  s.maps = {Map{{0, 2}}, Map{{2, 0}}};
  EXPECT_EQ(pixel_map(s, MapMode::Mean), (Map{{1, 1}}));
  EXPECT_EQ(pixel_map(s, MapMode::Max), (Map{{2, 2}}));
  AnomalyMapStack one;
  one.maps = {Map{{0.3, 0.4}}};
  EXPECT_EQ(pixel_map(one, MapMode::Mean), one.maps[0]);
  EXPECT_EQ(pixel_map(one, MapMode::Max), one.maps[0]);
  AnomalyMapStack mixed;
  mixed.maps = {Map::Zero(2, 2), Map::Zero(3, 3)};
  EXPECT_THROW(pixel_map(mixed, MapMode::Mean), ValidationError);
}

TEST(PixelMap, ResizedStackMatchesOracle) {
  std::mt19937_64 rng(8);
  AnomalyMapStack s;
  s.maps = {random_map(4, 4, rng), random_map(7, 7, rng), random_map(2, 2, rng)};
  for (bool use_max : {false, true}) {
    const Map got = pixel_map(resize_stack(s, 28, 28), use_max ? MapMode::Max : MapMode::Mean);
    const Map want = oracle::pixel(as_vector(s), 28, 28, use_max);
    EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(HierarchicalLoss, MatchesOracle) {
  std::mt19937_64 rng(9);
  AnomalyMapStack s;
  std::vector<std::vector<Eigen::MatrixXd>> nested;
  for (int layer : {12, 16, 20}) {
    nested.emplace_back();
    for (auto [p, g] : {std::pair{16, 14}, {32, 7}, {56, 4}}) {
      s.maps.push_back(random_map(g, g, rng));
      s.keys.push_back({layer, p});
      nested.back().push_back(s.maps.back());
    }
  }
  EXPECT_NEAR(hierarchical_loss(s), oracle::hierarchical(nested), 1e-9);
}

class PerceptualLossTest : public ::testing::Test {
 protected:
  PerceptualLossTest()
      : bb_(encoder::make_toy_backbone(2, toy_spec(3, 8), 8)), model_(bb_, 32, {8, 16}), scales_{{0, 2}, {8, 16}} {}

  encoder::FrozenBackbone bb_;
  PerceptualModel<float> model_;
  ScaleSet scales_;
};

TEST_F(PerceptualLossTest, IdenticalImagesGiveExactZero) {
  const auto x = random_normalized(32, 10);
  EXPECT_EQ(perceptual_loss(model_, x, x, scales_, LossForm::Hierarchical), 0.0f);
  EXPECT_EQ(perceptual_loss(model_, x, x, scales_, LossForm::Simple), 0.0f);
  const auto maps = anomaly_maps(model_.features(x, scales_), model_.features(x, scales_));
  for (const auto& m : maps.maps) EXPECT_EQ(m.cwiseAbs().maxCoeff(), 0.0);
}

TEST_F(PerceptualLossTest, TapeLossEqualsMapLoss) {
  const auto x = random_normalized(32, 11);
  const auto y = random_normalized(32, 12);
  const double via_tape = perceptual_loss(model_, x, y, scales_, LossForm::Hierarchical);
  const double via_maps = hierarchical_loss(anomaly_maps(model_.features(x, scales_), model_.features(y, scales_)));
  EXPECT_NEAR(via_tape, via_maps, 1e-5);
  EXPECT_GT(via_tape, 0.0);
}

TEST_F(PerceptualLossTest, SingleScaleIsMeanOfOneMap) {
  const ScaleSet one{{1}, {8}};
  const auto x = random_normalized(32, 13);
  const auto y = random_normalized(32, 14);
  const auto maps = anomaly_maps(model_.features(x, one), model_.features(y, one));
  EXPECT_NEAR(perceptual_loss(model_, x, y, one, LossForm::Hierarchical), maps.maps[0].mean(), 1e-5);
}

TEST(ScoreModes, ParseAndPrint) {
  EXPECT_EQ(parse_score_mode("mean_then_max"), ScoreMode::MeanThenMax);
  EXPECT_EQ(to_string(ScoreMode::MaxThenMean), "max_then_mean");
  EXPECT_EQ(parse_map_mode(to_string(MapMode::Max)), MapMode::Max);
  EXPECT_EQ(parse_loss_form("simple"), LossForm::Simple);
  EXPECT_THROW(parse_score_mode("median"), ValidationError);
}

TEST(ScaleSet, Validation) {
  EXPECT_THROW((ScaleSet{{}, {8}}.validate(64, 4)), ValidationError);
  EXPECT_THROW((ScaleSet{{4}, {8}}.validate(64, 4)), ValidationError);
  EXPECT_THROW((ScaleSet{{1}, {12}}.validate(64, 4)), ValidationError);
  EXPECT_NO_THROW((ScaleSet{{1, 3}, {8, 16}}.validate(64, 4)));
}
