#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "../support/oracles.hpp"
#include "crossret/eval.hpp"

using namespace crossret;

namespace {

std::vector<std::size_t> identity(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.feature_dim = 8;
  c.embed_dim = 8;
  c.n_heads = 2;
  c.vocab_size = 16;
  c.max_seq_len = 10;
  c.seed = 6;
  return c;
}

std::vector<PairRecord> small_corpus(std::size_t n) {
  SyntheticCorpusConfig cfg;
  cfg.n_pairs = n;
  cfg.feature_dim = 8;
  cfg.n_concepts = 4;
  cfg.attribute_slots = 2;
  cfg.attribute_values = 2;
  cfg.seed = 8;
  return generate_synthetic_corpus(cfg).domain_b;
}

}  // namespace

TEST(Rank, SelfRetrievalFirst) {
  std::mt19937_64 rng(1);
  const Matrix q = oracle::unit_rows(oracle::random_matrix(rng, 6, 5));
  const auto r = rank(q, q);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(r[i][0], i);
}

TEST(Rank, SingleGalleryItem) {
  std::mt19937_64 rng(2);
  const auto r = rank(oracle::random_matrix(rng, 4, 3), oracle::random_matrix(rng, 1, 3));
  for (const auto& row : r) EXPECT_EQ(row, std::vector<std::size_t>{0});
}

TEST(Rank, MatchesFullSortOracle) {
  std::mt19937_64 rng(3);
  const Matrix q = oracle::random_matrix(rng, 5, 4), g = oracle::random_matrix(rng, 7, 4);
  EXPECT_EQ(rank(q, g), oracle::rank(q, g));
}

TEST(Rank, TiesByAscendingIndex) {
  const Matrix q = Matrix::Ones(1, 2);
  const Matrix g = Matrix::Ones(4, 2);
  EXPECT_EQ(rank(q, g)[0], (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Rank, EmptyGalleryAndMismatch) {
  EXPECT_THROW(rank(Matrix::Ones(2, 3), Matrix(0, 3)), EmptyGallery);
  EXPECT_THROW(rank(Matrix::Ones(2, 3), Matrix::Ones(2, 4)), DimensionMismatch);
}

TEST(Rank, InvariantToPositiveRescaling) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> pos(0.01, 100.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix q = oracle::random_matrix(rng, 6, 5), g = oracle::random_matrix(rng, 9, 5);
    Matrix q2 = q, g2 = g;
    for (Eigen::Index i = 0; i < q2.rows(); ++i) q2.row(i) *= pos(rng);
    for (Eigen::Index i = 0; i < g2.rows(); ++i) g2.row(i) *= pos(rng);
    ASSERT_EQ(rank(q, g), rank(q2, g2));
  }
}

// ---------------------------------------------------------------------------

TEST(Recall, PerfectAlignment) {
  const Matrix e = Matrix::Identity(5, 5);
  const auto r = rank(e, e);
  EXPECT_EQ(recall_at_k(r, identity(5), 1), 100.0);
}

TEST(Recall, GroundTruthJustOutsideK) {
  // Ground truth always at position k (0-based), i.e. rank k+1.
  const std::vector<std::vector<std::size_t>> r = {{1, 2, 0}, {2, 0, 1}};
  const std::vector<std::size_t> gt = {0, 1};
  EXPECT_EQ(recall_at_k(r, gt, 2), 0.0);
  EXPECT_EQ(recall_at_k(r, gt, 3), 100.0);
}

TEST(Recall, KMustBePositive) { EXPECT_THROW(recall_at_k({{0}}, std::vector<std::size_t>{0}, 0), Error); }

TEST(Recall, MatchesSetMembershipOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index m = 1 + static_cast<Eigen::Index>(rng() % 50);
    const Eigen::Index g = 1 + static_cast<Eigen::Index>(rng() % 50);
    const Matrix q = oracle::random_matrix(rng, m, 4), gal = oracle::random_matrix(rng, g, 4);
    std::vector<std::size_t> gt(static_cast<std::size_t>(m));
    for (auto& x : gt) x = rng() % static_cast<std::size_t>(g);
    const auto got = rank(q, gal), want = oracle::rank(q, gal);
    ASSERT_EQ(got, want);
    double prev = 0.0;
    for (std::size_t k : {1u, 5u, 10u, 20u}) {
      const double r = recall_at_k(got, gt, k);
      ASSERT_DOUBLE_EQ(r, oracle::recall_at_k(want, gt, k));
      ASSERT_GE(r, prev);
      prev = r;
    }
  }
}

// ---------------------------------------------------------------------------

TEST(Report, MatchesOracleAndInvariants) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng() % 50);
    const Matrix im = oracle::random_matrix(rng, n, 6);
    // Texts correlated with images so recalls are spread across the range.
    const Matrix tx = im + oracle::random_matrix(rng, n, 6, 0.1 + 0.2 * static_cast<double>(trial % 10));
    const RecallReport r = recall_report(im, tx);
    ASSERT_NEAR(r.mean_recall, oracle::mean_recall(im, tx), 1e-9);
    const auto i2t = oracle::rank(im, tx), t2i = oracle::rank(tx, im);
    const auto gt = identity(static_cast<std::size_t>(n));
    ASSERT_DOUBLE_EQ(r.i2t_r1, oracle::recall_at_k(i2t, gt, 1));
    ASSERT_DOUBLE_EQ(r.t2i_r10, oracle::recall_at_k(t2i, gt, 10));
    ASSERT_LE(r.i2t_r1, r.i2t_r5);
    ASSERT_LE(r.i2t_r5, r.i2t_r10);
    ASSERT_LE(r.t2i_r1, r.t2i_r5);
    ASSERT_LE(r.t2i_r5, r.t2i_r10);
    ASSERT_LE(r.i2t_r10, 100.0);
    ASSERT_NEAR(r.mean_recall, (r.i2t_r1 + r.i2t_r5 + r.i2t_r10 + r.t2i_r1 + r.t2i_r5 + r.t2i_r10) / 6.0, 1e-9);
    ASSERT_EQ(r.n_queries, static_cast<std::size_t>(n));
  }
}

TEST(Report, JsonFields) {
  const auto j = to_json(recall_report(Matrix::Identity(3, 3), Matrix::Identity(3, 3)));
  for (const char* k : {"i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10", "mean_recall", "n_queries"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["mean_recall"], 100.0);
}

// ---------------------------------------------------------------------------

TEST(Evaluate, SingletonIsPerfect) {
  const Model m = Model::initialize(small_encoder());
  const auto corpus = small_corpus(1);
  const RecallReport r = evaluate(m, corpus);
  EXPECT_EQ(r.i2t_r1, 100.0);
  EXPECT_EQ(r.t2i_r1, 100.0);
  EXPECT_EQ(r.mean_recall, 100.0);
}

TEST(Evaluate, EmptyTestSet) {
  const Model m = Model::initialize(small_encoder());
  EXPECT_THROW(evaluate(m, std::vector<PairRecord>{}), EmptyGallery);
}

TEST(Evaluate, ReproducibleBitExact) {
  const auto corpus = small_corpus(40);
  const RecallReport a = evaluate(Model::initialize(small_encoder()), corpus);
  const RecallReport b = evaluate(Model::initialize(small_encoder()), corpus);
  EXPECT_EQ(a, b);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

TEST(Transfer, IdenticalModelsGiveZeroDelta) {
  const Model m = Model::initialize(small_encoder());
  const auto corpus = small_corpus(30);
  const auto t = transfer_eval(m, m, corpus);
  EXPECT_EQ(t.delta_mean_recall, 0.0);
  EXPECT_EQ(t.direct, t.adapted);
}

TEST(Transfer, DeltaIsDifferenceOfReports) {
  const auto corpus = small_corpus(30);
  EncoderConfig other = small_encoder();
  other.seed = 99;
  const auto t = transfer_eval(Model::initialize(small_encoder()), Model::initialize(other), corpus);
  EXPECT_EQ(t.delta_mean_recall, t.adapted.mean_recall - t.direct.mean_recall);
  const auto j = to_json(t);
  EXPECT_EQ(j["delta_mean_recall"], t.delta_mean_recall);
}
