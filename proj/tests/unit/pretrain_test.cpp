#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "../support/gradcheck.hpp"
#include "../support/oracles.hpp"
#include "crossret/checkpoint.hpp"
#include "crossret/pretrain.hpp"

using namespace crossret;

namespace {

/// Symmetric InfoNCE written from the definition.
double infonce_oracle(const Matrix& left, const Matrix& right, double tau) {
  const Eigen::Index n = left.rows();
  Matrix logits(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) logits(i, j) = oracle::dot(left.row(i).transpose(), right.row(j).transpose()) / tau;
  double rows = 0.0, cols = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double zr = 0.0, zc = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      zr += std::exp(logits(i, j));
      zc += std::exp(logits(j, i));
    }
    rows += -std::log(std::exp(logits(i, i)) / zr);
    cols += -std::log(std::exp(logits(i, i)) / zc);
  }
  return 0.5 * (rows / static_cast<double>(n) + cols / static_cast<double>(n));
}

std::vector<PairRecord> toy_corpus(std::size_t n, std::uint64_t seed, std::size_t dim = 16) {
  SyntheticCorpusConfig cfg;
  cfg.n_pairs = n;
  cfg.feature_dim = dim;
  cfg.n_concepts = 4;
  cfg.attribute_slots = 2;
  cfg.attribute_values = 2;
  cfg.seed = seed;
  return generate_synthetic_corpus(cfg).domain_a;
}

EncoderConfig toy_encoder(std::size_t dim = 16) {
  EncoderConfig c;
  c.feature_dim = dim;
  c.embed_dim = 16;
  c.n_heads = 2;
  c.vocab_size = 16;
  c.max_seq_len = 10;
  c.seed = 1;
  return c;
}

}  // namespace

TEST(Contrastive, OrthonormalPairsClosedForm) {
  const Matrix e = Matrix::Identity(2, 2);
  EXPECT_NEAR(contrastive_loss(e, e, 1.0), std::log(1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(std::log(1.0 + std::exp(-1.0)), 0.3133, 1e-4);
}

TEST(Contrastive, UniformLogitsGiveLogN) {
  for (Eigen::Index n : {2, 3, 7}) {
    const Matrix e = Matrix::Constant(n, 4, 0.5);
    EXPECT_NEAR(contrastive_loss(e, e, 0.07), std::log(static_cast<double>(n)), 1e-12);
  }
}

TEST(Contrastive, SymmetricInArguments) {
  std::mt19937_64 rng(1);
  const Matrix a = oracle::unit_rows(oracle::random_matrix(rng, 5, 4)), b = oracle::unit_rows(oracle::random_matrix(rng, 5, 4));
  EXPECT_NEAR(contrastive_loss(a, b, 0.07), contrastive_loss(b, a, 0.07), 1e-12);
}

TEST(Contrastive, MatchesDefinitionAndIsNonNegative) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng() % 8);
    const Matrix a = oracle::unit_rows(oracle::random_matrix(rng, n, 6)), b = oracle::unit_rows(oracle::random_matrix(rng, n, 6));
    const double got = contrastive_loss(a, b, 0.5);
    ASSERT_NEAR(got, infonce_oracle(a, b, 0.5), 1e-10);
    ASSERT_GE(got, 0.0);
  }
}

TEST(Contrastive, ShiftInvariantLogits) {
  std::mt19937_64 rng(3);
  const Matrix logits = oracle::random_matrix(rng, 4, 4);
  const double base = contrastive_from_logits(logits).loss;
  EXPECT_NEAR(contrastive_from_logits(logits.array() + 3.7).loss, base, 1e-12);
}

TEST(Contrastive, BatchTooSmall) {
  EXPECT_THROW(contrastive_loss(Matrix::Ones(1, 3), Matrix::Ones(1, 3), 0.07), BatchTooSmall);
}

TEST(Contrastive, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  ParamStore s = {{"left", oracle::unit_rows(oracle::random_matrix(rng, 4, 8))},
                  {"right", oracle::unit_rows(oracle::random_matrix(rng, 4, 8))}};
  const auto errors = gradcheck::check(
      [](ad::Tape&, const Bound& p) { return contrastive_loss(p("left"), p("right"), 0.07); }, s);
  EXPECT_LT(gradcheck::worst(errors), 1e-4);
}

TEST(PretrainLoss, AllSegmentsMaskedOut) {
  std::mt19937_64 rng(5);
  const Matrix im = oracle::unit_rows(oracle::random_matrix(rng, 4, 3)), tx = oracle::unit_rows(oracle::random_matrix(rng, 4, 3));
  const bool mask[4] = {false, false, false, false};
  const auto l = pretrain_loss(im, Matrix::Zero(4, 3), tx, 0.07, mask);
  EXPECT_EQ(l.seg2text, 0.0);
  EXPECT_EQ(l.total, l.img2text);
}

TEST(PretrainLoss, SegmentsEqualImages) {
  std::mt19937_64 rng(6);
  const Matrix im = oracle::unit_rows(oracle::random_matrix(rng, 4, 3)), tx = oracle::unit_rows(oracle::random_matrix(rng, 4, 3));
  const bool mask[4] = {true, true, true, true};
  const auto l = pretrain_loss(im, im, tx, 0.07, mask);
  EXPECT_NEAR(l.seg2text, l.img2text, 1e-12);
}

TEST(PretrainLoss, RecomposesFromTwoCalls) {
  std::mt19937_64 rng(7);
  const Matrix im = oracle::unit_rows(oracle::random_matrix(rng, 5, 4)), tx = oracle::unit_rows(oracle::random_matrix(rng, 5, 4));
  const Matrix seg = oracle::random_matrix(rng, 5, 4);
  const bool mask[5] = {true, false, true, true, false};
  const auto l = pretrain_loss(im, seg, tx, 0.07, mask);
  Matrix s_sub(3, 4), t_sub(3, 4);
  int k = 0;
  for (int i : {0, 2, 3}) {
    s_sub.row(k) = seg.row(i) / seg.row(i).norm();
    t_sub.row(k++) = tx.row(i);
  }
  const double want = infonce_oracle(im, tx, 0.07) + infonce_oracle(s_sub, t_sub, 0.07);
  EXPECT_NEAR(l.total, want, 1e-12);
  EXPECT_NEAR(l.total, l.img2text + l.seg2text, 1e-9);
}

TEST(PretrainForward, GradientsMatchFiniteDifferences) {
  // Small model, segments built to pass both filters so the segment term is active.
  EncoderConfig c;
  c.feature_dim = 3;
  c.embed_dim = 4;
  c.n_heads = 2;
  c.vocab_size = 8;
  c.max_seq_len = 5;
  c.seed = 2;
  Model m = Model::initialize(c);
  std::vector<PairRecord> batch(3);
  std::mt19937_64 rng(8);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    batch[i].image = Vector(oracle::random_matrix(rng, 3, 1));
    batch[i].caption_tokens = {2 + static_cast<int>(i), 5};
    batch[i].segments = {{0.5, Vector(oracle::random_matrix(rng, 3, 1))}, {0.4, Vector(oracle::random_matrix(rng, 3, 1))}};
  }
  FilterConfig f;
  f.score_threshold = -1.0;  // keep every segment so the aggregate is exercised
  std::vector<const PairRecord*> ptrs;
  for (const auto& r : batch) ptrs.push_back(&r);
  const auto via_model = gradcheck::check(
      [&](ad::Tape& t, const Bound& p) {
        ParamStore current;
        for (const auto& [name, value] : m.params) current[name] = p(name).value();
        Model local{c, current};
        // Rebinding by name on the same tape reuses the checker's nodes.
        return pretrain_forward(t, local, ptrs, f, 0.5).total;
      },
      m.params);
  EXPECT_LT(gradcheck::worst(via_model), 1e-4);
}

TEST(Pretrain, ZeroLearningRateLeavesParameters) {
  const auto corpus = toy_corpus(24, 1);
  const Model m = Model::initialize(toy_encoder());
  ContrastiveConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  const auto r = pretrain(m, corpus, {}, cfg, FilterConfig{}, 1);
  EXPECT_EQ(r.last.params, m.params);
  EXPECT_EQ(r.best.params, m.params);
}

TEST(Pretrain, OneLogEntryPerBatch) {
  const auto corpus = toy_corpus(4, 2);
  ContrastiveConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  const auto r = pretrain(Model::initialize(toy_encoder()), corpus, {}, cfg, FilterConfig{}, 1);
  ASSERT_EQ(r.log.size(), 2u);
  EXPECT_EQ(r.log[0].batch, 0u);
  EXPECT_EQ(r.log[1].batch, 1u);
  EXPECT_EQ(r.log[1].epoch, 1u);
}

TEST(Pretrain, ToyCorpusLossDecreases) {
  const auto corpus = toy_corpus(64, 3);
  ContrastiveConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 16;
  const auto r = pretrain(Model::initialize(toy_encoder()), corpus, {}, cfg, FilterConfig{}, 5);
  ASSERT_EQ(r.log.size(), 15u * 4u);
  auto epoch_mean = [&](std::size_t e) {
    double s = 0.0;
    for (const auto& l : r.log)
      if (l.epoch == e) s += l.loss_img2text + l.loss_seg2text;
    return s / 4.0;
  };
  EXPECT_LT(epoch_mean(15), epoch_mean(1));
}

TEST(Pretrain, DeterministicPerSeed) {
  const auto corpus = toy_corpus(32, 4);
  ContrastiveConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  const auto a = pretrain(Model::initialize(toy_encoder()), corpus, corpus, cfg, FilterConfig{}, 9);
  const auto b = pretrain(Model::initialize(toy_encoder()), corpus, corpus, cfg, FilterConfig{}, 9);
  EXPECT_EQ(serialize_checkpoint(a.best), serialize_checkpoint(b.best));
  EXPECT_EQ(a.val_mean_recall, b.val_mean_recall);
}

TEST(Pretrain, LearningRateDecaySchedule) {
  ContrastiveConfig cfg;
  EXPECT_DOUBLE_EQ(cfg.lr_at(1), 1e-5);
  EXPECT_DOUBLE_EQ(cfg.lr_at(10), 1e-5);
  EXPECT_DOUBLE_EQ(cfg.lr_at(11), 1e-5 * 0.3);
  EXPECT_DOUBLE_EQ(cfg.lr_at(21), 1e-5 * 0.09);
}

TEST(Pretrain, DivergenceDumpsStateAndThrows) {
  auto corpus = toy_corpus(8, 5);
  ContrastiveConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  Model m = Model::initialize(toy_encoder());
  m.params["text.tok"](3, 0) = std::numeric_limits<double>::quiet_NaN();
  for (auto& r : corpus) r.caption_tokens[0] = 3;
  PretrainOptions opt;
  opt.divergence_dump_path = ::testing::TempDir() + "diverged.bin";
  EXPECT_THROW(pretrain(m, corpus, {}, cfg, FilterConfig{}, 1, opt), DivergedLoss);
  EXPECT_NO_THROW(load_checkpoint(opt.divergence_dump_path));
}
