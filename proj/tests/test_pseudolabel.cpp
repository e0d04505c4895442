#include "oracles.hpp"
#include "test_util.hpp"

using namespace sscbm;
using namespace sscbm::testing;

namespace {

void expect_close(const std::vector<double>& a, const std::vector<double>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12) << "entry " << i;
}

LabeledReference ref(const std::string& id, std::vector<double> v, ConceptVector c) {
  return {{id, Eigen::Map<const Vec<double>>(v.data(), static_cast<Eigen::Index>(v.size()))}, std::move(c)};
}

ReferenceFeature feat(const std::string& id, std::vector<double> v) {
  return {id, Eigen::Map<const Vec<double>>(v.data(), static_cast<Eigen::Index>(v.size()))};
}

}  // namespace

TEST(CosineDistance, SpecialCases) {
  Vec<double> a(2), b(2), c(2);
  a << 1, 0;
  b << 0, 1;
  c << -1, 0;
  EXPECT_NEAR(cosine_distance(a, a), 0.0, 1e-15);
  EXPECT_NEAR(cosine_distance(a, b), 1.0, 1e-15);
  EXPECT_NEAR(cosine_distance(a, c), 2.0, 1e-15);
  EXPECT_THROW(cosine_distance(a, Vec<double>(Vec<double>::Zero(2))), Error);
  EXPECT_THROW(cosine_distance(a, Vec<double>(Vec<double>::Ones(3))), ShapeError);
}

TEST(Knn, SingleNeighborCopiesItsConcepts) {
  std::vector<LabeledReference> refs = {ref("a", {1, 0}, {1, 0, 1}), ref("b", {0, 1}, {0, 1, 0})};
  const auto pl = knn_pseudo_label(feat("u", {0.9, 0.1}), refs, 1);
  EXPECT_EQ(pl.c_img, (std::vector<double>{1, 0, 1}));
  EXPECT_EQ(pl.neighbor_ids, (std::vector<std::string>{"a"}));
}

TEST(Knn, ReciprocalWeightsByHand) {
  // distances 0.2 and 0.4 from the target
  const double t1 = 0.8, t2 = 0.6;  // cosines
  std::vector<LabeledReference> refs = {
      ref("n1", {t1, std::sqrt(1 - t1 * t1)}, {1, 0}),
      ref("n2", {t2, -std::sqrt(1 - t2 * t2)}, {0, 1}),
      ref("far", {-1, 0}, {1, 1}),
  };
  const auto pl = knn_pseudo_label(feat("u", {1, 0}), refs, 2);
  ASSERT_EQ(pl.weights.size(), 2u);
  EXPECT_NEAR(pl.weights[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(pl.weights[1], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(pl.c_img[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(pl.c_img[1], 1.0 / 3.0, 1e-12);
}

TEST(Knn, ExactDuplicateDominates) {
  std::vector<LabeledReference> refs = {ref("dup", {0.3, 0.7, 0.1}, {1, 0, 1}),
                                        ref("other", {0.7, 0.3, 0.1}, {0, 1, 0})};
  const auto pl = knn_pseudo_label(feat("u", {0.3, 0.7, 0.1}), refs, 2);
  EXPECT_NEAR(pl.c_img[0], 1.0, 1e-6);
  EXPECT_NEAR(pl.c_img[1], 0.0, 1e-6);
  EXPECT_NEAR(pl.c_img[2], 1.0, 1e-6);
}

TEST(Knn, TiesBreakById) {
  std::vector<LabeledReference> refs = {ref("b", {1, 0}, {0}), ref("a", {1, 0}, {1})};
  const auto pl = knn_pseudo_label(feat("u", {1, 0}), refs, 1);
  EXPECT_EQ(pl.neighbor_ids[0], "a");
}

TEST(Knn, RejectsTooFewLabeled) {
  std::vector<LabeledReference> refs = {ref("a", {1, 0}, {1})};
  EXPECT_THROW(knn_pseudo_label(feat("u", {1, 0}), refs, 2), ConfigError);
  EXPECT_THROW(knn_pseudo_label(feat("u", {1, 0}), refs, 0), ConfigError);
}

TEST(Knn, MatchesBruteForceOnRandomInstances) {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const int k_nn = std::array{1, 2, 5}[trial % 3];
    const int d = 2 + static_cast<int>(rng.below(6));
    const int k = 1 + static_cast<int>(rng.below(5));
    const int nl = k_nn + static_cast<int>(rng.below(12));
    std::vector<std::vector<double>> vecs;
    std::vector<std::string> ids;
    std::vector<std::vector<int>> cons;
    std::vector<LabeledReference> refs;
    for (int j = 0; j < nl; ++j) {
      std::vector<double> v(d);
      // a coarse grid makes exact distance ties likely
      for (auto& x : v) x = static_cast<double>(static_cast<int>(rng.below(5))) - 2.0 + 0.5;
      std::vector<int> c(k);
      ConceptVector cv(k);
      for (int i = 0; i < k; ++i) cv[i] = static_cast<std::uint8_t>(c[i] = static_cast<int>(rng.below(2)));
      ids.push_back("l" + std::to_string(rng.below(1000)) + "-" + std::to_string(j));
      vecs.push_back(v);
      cons.push_back(c);
      refs.push_back(ref(ids.back(), v, cv));
    }
    for (int u = 0; u < 5; ++u) {
      std::vector<double> t(d);
      for (auto& x : t) x = static_cast<double>(static_cast<int>(rng.below(5))) - 2.0 + 0.5;
      std::vector<std::string> nb;
      const auto expect = brute_force_pseudo_label(t, vecs, ids, cons, k_nn, &nb);
      const auto got = knn_pseudo_label(feat("u", t), refs, k_nn);
      expect_close(got.c_img, expect);
      EXPECT_EQ(got.neighbor_ids, nb);
    }
  }
}

TEST(ReferenceEncoder, DeterministicAndShaped) {
  const auto cfg = TrainConfig{}.model_config(10, 9, 3, 32);
  const ReferenceEncoder enc(cfg.backbone, 7);
  EXPECT_EQ(enc.dim(), cfg.n_h());
  Rng rng(1);
  const auto img = random_image(3, 32, rng);
  const auto a = enc.encode("x", img);
  const auto b = enc.encode("y", img);
  EXPECT_EQ(a.vec.size(), enc.dim());
  EXPECT_EQ(a.vec, b.vec);
  EXPECT_NEAR(cosine_distance(a.vec, b.vec), 0.0, 1e-12);
}

TEST(PseudoLabels, OnePerUnlabeledExampleAndRoundTrip) {
  SyntheticSpec spec;
  spec.n_examples = 200;
  const auto ds = generate_synthetic(spec);
  const auto split = split_semi(ds.examples, {SplitSpec::Mode::ratio, 0.1, 0});
  EXPECT_EQ(split.unlabeled.size(), 180u);
  const auto mc = TrainConfig{}.model_config(10, 9, 3, 32);
  const auto labels = make_pseudo_labels(mc, TrainConfig{}, split.labeled, split.unlabeled);
  EXPECT_EQ(labels.size(), 180u);
  EXPECT_EQ(TrainConfig{}.k_nn, 2);
  for (const auto& [id, pl] : labels) {
    EXPECT_EQ(pl.neighbor_ids.size(), 2u);
    double wsum = 0;
    for (double w : pl.weights) wsum += w;
    EXPECT_NEAR(wsum, 1.0, 1e-12);
    for (double c : pl.c_img) {
      EXPECT_GE(c, 0.0);
      EXPECT_LE(c, 1.0 + 1e-12);
    }
  }
  TempDir dir;
  std::vector<std::string> order;
  for (const auto& e : split.unlabeled) order.push_back(e.id);
  write_pseudo_labels(dir / "pl.jsonl", labels, order);
  const auto back = read_pseudo_labels(dir / "pl.jsonl");
  EXPECT_EQ(back, labels);
}

TEST(PseudoLabels, BatchBuilderMatchesBruteForce) {
  SyntheticSpec spec;
  spec.n_examples = 60;
  const auto ds = generate_synthetic(spec);
  const auto split = split_semi(ds.examples, {SplitSpec::Mode::ratio, 0.2, 4});
  const auto mc = TrainConfig{}.model_config(10, 9, 3, 32);
  const ReferenceEncoder enc(mc.backbone, 3);
  const auto labels = build_pseudo_labels(enc, split.labeled, split.unlabeled, 2);
  std::vector<std::vector<double>> vecs;
  std::vector<std::string> ids;
  std::vector<std::vector<int>> cons;
  for (const auto& e : split.labeled) {
    const auto f = enc.encode(e.id, e.input);
    vecs.emplace_back(f.vec.data(), f.vec.data() + f.vec.size());
    ids.push_back(e.id);
    cons.emplace_back(e.concepts->begin(), e.concepts->end());
  }
  for (const auto& e : split.unlabeled) {
    const auto f = enc.encode(e.id, e.input);
    const auto expect =
        brute_force_pseudo_label({f.vec.data(), f.vec.data() + f.vec.size()}, vecs, ids, cons, 2);
    expect_close(labels.at(e.id).c_img, expect);
  }
}

TEST(PseudoLabels, MalformedFileNamesTheLine) {
  TempDir dir;
  detail::write_text(dir / "pl.jsonl", "{\"id\":\"a\",\"c_img\":[1],\"neighbors\":[\"b\"],\"weights\":[1]}\n{oops\n");
  try {
    read_pseudo_labels(dir / "pl.jsonl");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}
