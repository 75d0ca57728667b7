#include <gtest/gtest.h>

#include <random>

#include "../support/gradcheck.hpp"
#include "../support/oracles.hpp"
#include "crossret/segment_filter.hpp"

using namespace crossret;

namespace {

std::vector<SegmentInput> with_areas(std::initializer_list<double> areas) {
  std::vector<SegmentInput> s;
  for (double a : areas) s.push_back({a, Vector::Zero(2)});
  return s;
}

std::vector<ScoredSegment> scored(std::initializer_list<double> scores) {
  std::vector<ScoredSegment> out;
  std::size_t i = 0;
  for (double s : scores) out.push_back({i++, Vector::Unit(2, 0), s});
  return out;
}

Vector v2(double a, double b) { return (Vector(2) << a, b).finished(); }

}  // namespace

TEST(AreaFilter, KeepsStrictlyLarger) {
  EXPECT_EQ(area_filter_indices(with_areas({0.1, 0.3, 0.25}), 0.2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(area_filter_indices(with_areas({0.2, 0.2000001}), 0.2), (std::vector<std::size_t>{1}));
}

TEST(AreaFilter, ZeroThresholdDropsOnlyEmptySegments) {
  EXPECT_EQ(area_filter_indices(with_areas({0.0, 0.01, 1.0}), 0.0), (std::vector<std::size_t>{1, 2}));
}

TEST(AreaFilter, EmptyInput) { EXPECT_TRUE(filter_by_area({}, 0.2).empty()); }

TEST(AreaFilter, MonotoneInThreshold) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<SegmentInput> segs;
    for (int i = 0; i < 10; ++i) segs.push_back({u(rng), Vector::Zero(1)});
    const double lo = u(rng), hi = lo + (1.0 - lo) * u(rng);
    const auto a = area_filter_indices(segs, lo), b = area_filter_indices(segs, hi);
    for (std::size_t i : b) EXPECT_NE(std::find(a.begin(), a.end(), i), a.end());
  }
}

TEST(Score, InnerProducts) {
  const Vector t = v2(1, 0);
  const std::vector<Vector> e = {v2(1, 0), v2(0, 1), v2(0.6, 0.8)};
  const auto s = score_segments(e, t);
  EXPECT_DOUBLE_EQ(s[0], 1.0);
  EXPECT_DOUBLE_EQ(s[1], 0.0);
  EXPECT_DOUBLE_EQ(s[2], 0.6);
}

TEST(Score, DimensionMismatch) {
  const std::vector<Vector> e = {Vector::Zero(3)};
  EXPECT_THROW(score_segments(e, v2(1, 0)), DimensionMismatch);
}

TEST(ScoreFilter, ThresholdAndOrder) {
  const auto out = filter_by_score(scored({0.5, 0.1, 0.3}), 0.2, 6);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_DOUBLE_EQ(out[0].score, 0.5);
  EXPECT_DOUBLE_EQ(out[1].score, 0.3);
}

TEST(ScoreFilter, CapBreaksTiesByIndex) {
  const auto out = filter_by_score(scored({0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9}), 0.2, 6);
  ASSERT_EQ(out.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(out[i].index, i);
}

TEST(ScoreFilter, AllRejected) { EXPECT_TRUE(filter_by_score(scored({0.2, 0.1, -0.5}), 0.2, 6).empty()); }

TEST(Aggregate, Singleton) {
  const std::vector<ScoredSegment> s = {{0, v2(0.6, 0.8), 0.4}};
  EXPECT_TRUE(aggregate_segments(s).isApprox(v2(0.6, 0.8)));
}

TEST(Aggregate, EqualScoresAverage) {
  const std::vector<ScoredSegment> s = {{0, v2(1, 0), 0.3}, {1, v2(0, 1), 0.3}};
  EXPECT_TRUE(aggregate_segments(s).isApprox(v2(0.5, 0.5)));
}

TEST(Aggregate, ScoreWeighted) {
  const std::vector<ScoredSegment> s = {{0, v2(1, 0), 0.75}, {1, v2(0, 1), 0.25}};
  const Vector e = aggregate_segments(s);
  EXPECT_NEAR(e(0), 0.75, 1e-15);
  EXPECT_NEAR(e(1), 0.25, 1e-15);
}

TEST(Aggregate, EmptyThrows) { EXPECT_THROW(aggregate_segments(std::span<const ScoredSegment>{}), EmptySegmentSet); }

TEST(Aggregate, DifferentiableMatchesPlain) {
  const Vector text = v2(0.8, 0.6);
  Matrix rows(2, 2);
  rows << 1, 0, 0.6, 0.8;
  const std::vector<ScoredSegment> s = {{0, rows.row(0).transpose(), rows.row(0).dot(text)},
                                        {1, rows.row(1).transpose(), rows.row(1).dot(text)}};
  ad::Tape tape;
  const ad::Var agg = aggregate_segments(tape.variable(rows), tape.variable(text.transpose()));
  EXPECT_TRUE(agg.value().row(0).transpose().isApprox(aggregate_segments(s), 1e-15));
}

TEST(Aggregate, GradientThroughScoresMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  const Vector t = oracle::random_unit(rng, 5);
  Matrix rows(3, 5);
  for (int i = 0; i < 3; ++i) rows.row(i) = (oracle::random_unit(rng, 5) + 2.0 * t).normalized().transpose();
  const Matrix probe = oracle::random_matrix(rng, 1, 5);
  ParamStore s = {{"rows", rows}, {"text", Matrix(t.transpose())}};
  const auto errors = gradcheck::check(
      [&](ad::Tape&, const Bound& p) { return ad::dot(aggregate_segments(p("rows"), p("text")), probe); }, s);
  EXPECT_LT(gradcheck::worst(errors), 1e-6);
}

TEST(Pipeline, MatchesBruteForceOracle) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  FilterConfig cfg;
  for (int trial = 0; trial < 500; ++trial) {
    const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng() % 6);
    const std::size_t n = rng() % 12;
    oracle::SegmentCase c;
    c.text = oracle::random_unit(rng, d);
    for (std::size_t i = 0; i < n; ++i) {
      c.areas.push_back(u(rng));
      // Bias towards the text so some segments pass the score filter.
      Vector e = oracle::random_unit(rng, d) + u(rng) * 1.5 * c.text;
      c.embeddings.push_back(e / e.norm());
    }
    std::vector<SegmentInput> segs;
    std::vector<Vector> survivors;
    for (std::size_t i = 0; i < n; ++i) {
      segs.push_back({c.areas[i], c.embeddings[i]});
      if (c.areas[i] > cfg.area_threshold) survivors.push_back(c.embeddings[i]);
    }
    const auto got = select_segments(segs, survivors, c.text, cfg);
    const auto want = oracle::segment_pipeline(c, cfg.area_threshold, cfg.score_threshold, cfg.max_segments);
    ASSERT_EQ(got.size(), want.kept.size());
    for (std::size_t k = 0; k < got.size(); ++k) ASSERT_EQ(got[k].index, want.kept[k]);
    if (!got.empty()) {
      const Vector e = aggregate_segments(got);
      ASSERT_LT((e - want.aggregate).cwiseAbs().maxCoeff(), 1e-12);
      // Convex combination: weights nonnegative and summing to one.
      double wsum = 0.0;
      for (const auto& s : got) {
        ASSERT_GT(s.score, 0.0);
        wsum += s.score;
      }
      Vector recomposed = Vector::Zero(d);
      for (const auto& s : got) recomposed += (s.score / wsum) * s.embedding;
      ASSERT_LT((recomposed - e).norm(), 1e-12);
    }
  }
}

TEST(Pipeline, SyntheticDistractorsAlwaysRejected) {
  SyntheticCorpusConfig cfg;
  cfg.n_pairs = 300;
  const auto corpus = generate_synthetic_corpus(cfg);
  FilterConfig f;
  for (const auto& r : corpus.domain_a) {
    for (std::size_t i : area_filter_indices(r.segments, f.area_threshold)) {
      // Every survivor carries prototype signal, never an orthogonal distractor.
      double best = 0.0;
      for (Eigen::Index k = 0; k < corpus.prototypes_a.rows(); ++k)
        best = std::max(best, std::abs(r.segments[i].feature.dot(corpus.prototypes_a.row(k))));
      EXPECT_GT(best, 0.1);
    }
  }
}
