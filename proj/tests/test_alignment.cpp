#include "oracles.hpp"
#include "test_util.hpp"

using namespace sscbm;
using namespace sscbm::testing;

namespace {

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

std::vector<double> row_major(const Mat<double>& m) {
  std::vector<double> out;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  }
  return out;
}

}  // namespace

TEST(Heatmap, ParallelAndOrthogonal) {
  Mat<double> v(2, 3), e(1, 3);
  v << 2, 0, 0, 0, 5, 0;
  e << 0.5, 0, 0;
  const auto st = concept_heatmaps(v, 1, 2, e);
  EXPECT_NEAR(st.at(0, 0, 0), 1.0, 1e-11);
  EXPECT_NEAR(st.at(0, 1, 0), 0.0, 1e-15);
}

TEST(Heatmap, ZeroFeatureScoresZero) {
  Mat<double> v = Mat<double>::Zero(1, 3), e = Mat<double>::Ones(2, 3);
  const auto st = concept_heatmaps(v, 1, 1, e);
  EXPECT_EQ(st.values(0, 0), 0.0);
  EXPECT_EQ(st.values(0, 1), 0.0);
}

TEST(Heatmap, MatchesLoopOracle) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const int h = 1 + static_cast<int>(rng.below(4)), w = 1 + static_cast<int>(rng.below(4));
    const int m = 1 + static_cast<int>(rng.below(6)), k = 1 + static_cast<int>(rng.below(5));
    const auto v = random_mat(h * w, m, rng);
    const auto e = random_mat(k, m, rng);
    const auto st = concept_heatmaps(v, h, w, e);
    const auto expect = loop_heatmap(row_major(v), h, w, m, row_major(e), k);
    for (int p = 0; p < h; ++p) {
      for (int q = 0; q < w; ++q) {
        for (int i = 0; i < k; ++i) {
          EXPECT_NEAR(st.at(p, q, i), expect[(static_cast<std::size_t>(p) * w + q) * k + i], 1e-6);
        }
      }
    }
    const auto s = pool_scores(st);
    const auto s_loop = loop_pool(expect, h, w, k);
    for (int i = 0; i < k; ++i) EXPECT_NEAR(s(i), s_loop[i], 1e-7);
  }
}

TEST(Heatmap, RejectsShapeMismatch) {
  EXPECT_THROW(concept_heatmaps(Mat<double>(Mat<double>::Ones(4, 3)), 2, 3, Mat<double>(Mat<double>::Ones(1, 3))),
               ShapeError);
  EXPECT_THROW(concept_heatmaps(Mat<double>(Mat<double>::Ones(4, 3)), 2, 2, Mat<double>(Mat<double>::Ones(1, 2))),
               ShapeError);
}

TEST(Heatmap, ScaleInvariantAndNegationFlips) {
  Rng rng(9);
  const auto v = random_mat(9, 4, rng);
  const auto e = random_mat(3, 4, rng);
  const auto base = concept_heatmaps(v, 3, 3, e);
  Mat<double> scaled = e;
  scaled.row(1) *= 7.5;
  const auto st = concept_heatmaps(v, 3, 3, scaled);
  EXPECT_TRUE(st.values.isApprox(base.values, 1e-12));
  Mat<double> neg = e;
  neg.row(2) = -neg.row(2);
  const auto sn = concept_heatmaps(v, 3, 3, neg);
  EXPECT_EQ(sn.values.col(2), (-base.values.col(2)).eval());
  const auto a = alignment_scores(base, 0.6, 10.0);
  const auto b = alignment_scores(st, 0.6, 10.0);
  EXPECT_EQ(a.hard, b.hard);
  EXPECT_TRUE(a.soft.isApprox(b.soft, 1e-12));
}

TEST(Pooling, HandExamples) {
  HeatmapStack<double> st{2, 2, Mat<double>(4, 2)};
  st.values << 0.1, 0.4, 0.3, 0.4, 0.5, 0.4, 0.1, 0.4;
  const auto s = pool_scores(st);
  EXPECT_NEAR(s(0), 0.25, 1e-15);
  EXPECT_NEAR(s(1), 0.4, 1e-15);
}

TEST(Harden, StrictThreshold) {
  Vec<double> s(4);
  s << -0.2, 0.61, 0.6, 0.7;
  EXPECT_EQ(harden(s, 0.6), (std::vector<std::uint8_t>{0, 1, 0, 1}));
}

TEST(Soften, Values) {
  Vec<double> s(2);
  s << 0.7, 0.6;
  const auto soft = soften(s, 0.6, 10.0);
  EXPECT_NEAR(soft(0), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(soft(0), 0.7311, 1e-4);
  EXPECT_DOUBLE_EQ(soft(1), 0.5);
  EXPECT_THROW(soften(s, 0.6, 0.0), ConfigError);
}

TEST(Soften, AgreesWithHardenOffTheBoundary) {
  Rng rng(10);
  Vec<double> s(200);
  for (Eigen::Index i = 0; i < s.size(); ++i) s(i) = 2 * rng.uniform() - 1;
  const auto hard = harden(s, 0.6);
  const auto soft = soften(s, 0.6, 10.0);
  const auto sharp = soften(s, 0.6, 1e4);
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) == 0.6) continue;
    EXPECT_EQ(soft(i) > 0.5, hard[i] == 1);
    if (std::abs(s(i) - 0.6) > 1e-2) EXPECT_NEAR(sharp(i), hard[i], 1e-6);
    if (i > 0 && s(i) > s(i - 1)) EXPECT_GE(soft(i), soft(i - 1));
  }
}

TEST(Saliency, ConstantSliceIsHalf) {
  HeatmapStack<double> st{3, 3, Mat<double>::Constant(9, 2, 0.42)};
  const auto sm = render_saliency(st, 1, 12, 12);
  ASSERT_EQ(sm.map.size(), 144u);
  for (float v : sm.map) EXPECT_EQ(v, 0.5f);
  EXPECT_THROW(render_saliency(st, 2, 12, 12), ConfigError);
}

TEST(Saliency, HotCellArgmaxStaysInItsCell) {
  const int side = 8, img = 32, cell = img / side;
  for (int p = 0; p < side; ++p) {
    for (int q = 0; q < side; ++q) {
      HeatmapStack<double> st{side, side, Mat<double>::Zero(side * side, 1)};
      st.values(p * side + q, 0) = 1.0;
      const auto sm = render_saliency(st, 0, img, img);
      const auto [y, x] = sm.argmax();
      EXPECT_GE(y, p * cell);
      EXPECT_LT(y, (p + 1) * cell);
      EXPECT_GE(x, q * cell);
      EXPECT_LT(x, (q + 1) * cell);
      EXPECT_FLOAT_EQ(*std::max_element(sm.map.begin(), sm.map.end()), 1.0f);
      EXPECT_FLOAT_EQ(*std::min_element(sm.map.begin(), sm.map.end()), 0.0f);
    }
  }
}
