#pragma once

// Weighted adversarial cross-domain fine-tuning.
//
// The encoders are fine-tuned on source pairs picked by the curriculum sampler
// with a per-sample weighted triplet loss, while a three-layer MLP
// discriminator learns to tell source pairs from target pairs. Discriminator
// and encoder updates alternate; the encoder gets the label-flipped objective.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossret/acss.hpp"
#include "crossret/autodiff.hpp"
#include "crossret/checkpoint.hpp"
#include "crossret/data_corpus.hpp"
#include "crossret/encoders.hpp"
#include "crossret/errors.hpp"
#include "crossret/optimizer.hpp"
#include "crossret/rng.hpp"

namespace crossret {

enum class NegativeMining { kHardest, kRandom };

struct TripletConfig {
  double margin = 0.2;
  NegativeMining mining = NegativeMining::kHardest;
};

struct AdaptConfig {
  double beta = 1.0;
  double finetune_lr = 1e-7;
  double disc_lr = 1e-6;
  std::size_t epochs = 5;
  std::size_t target_batch = 16;
  std::size_t source_batch = 80;
  bool enforce_source_ratio = true;  ///< require source_batch == 5 * target_batch
  bool adv_weight_target = true;     ///< apply W_vec to the target term as well
  TripletConfig triplet;
  CurriculumMode curriculum_mode = CurriculumMode::kWindow;
  double curriculum_increment = 0.20;

  void validate() const {
    if (!(beta >= 0)) throw ConfigError("adapt.beta", "must be >= 0");
    if (!(finetune_lr >= 0)) throw ConfigError("adapt.lr", "must be >= 0");
    if (!(disc_lr >= 0)) throw ConfigError("adapt.disc_lr", "must be >= 0");
    if (target_batch < 2) throw ConfigError("adapt.target_batch", "must be >= 2");
    if (source_batch < target_batch) throw ConfigError("adapt.source_batch", "must be >= target_batch");
    if (enforce_source_ratio && source_batch != 5 * target_batch)
      throw ConfigError("adapt.source_batch", "must equal 5 * target_batch unless the ratio check is disabled");
    if (!(triplet.margin > 0)) throw ConfigError("adapt.margin", "must be > 0");
  }
};

/// Ablation switches: source sampling, curriculum, adversarial training.
struct Toggles {
  bool ss = true;
  bool cl = true;
  bool at = true;
  bool operator==(const Toggles&) const = default;
};

// ---------------------------------------------------------------------------
// Weighted triplet loss

inline double cosine_distance(const Vector& a, const Vector& b) { return 1.0 - a.dot(b); }

struct TripletResult {
  double loss = 0.0;
  std::vector<std::size_t> text_negatives;   ///< image index used as negative for text anchor i
  std::vector<std::size_t> image_negatives;  ///< text index used as negative for image anchor i
  std::vector<double> text_hinges;
  std::vector<double> image_hinges;
};

namespace detail {

/// Negative index for each anchor row: the closest (highest dot) non-matching
/// candidate, or a uniformly random non-matching one.
inline std::vector<std::size_t> mine_negatives(const Matrix& sims, NegativeMining mining, Rng* rng) {
  const auto n = static_cast<std::size_t>(sims.rows());
  std::vector<std::size_t> neg(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (mining == NegativeMining::kRandom) {
      if (!rng) throw Error("random negative mining needs an RNG");
      std::size_t j = static_cast<std::size_t>((*rng)() % (n - 1));
      neg[i] = j >= i ? j + 1 : j;
      continue;
    }
    std::size_t best = i == 0 ? 1 : 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (sims(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) >
          sims(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(best)))
        best = j;
    }
    neg[i] = best;
  }
  return neg;
}

}  // namespace detail

/// Rows of `texts` and `images` are aligned unit embeddings. Loss is the mean
/// over i of w_i * (text-anchor hinge + image-anchor hinge), with
/// d(a, b) = 1 - <a, b>.
inline TripletResult weighted_triplet_terms(const Matrix& texts, const Matrix& images, std::span<const double> weights,
                                            const TripletConfig& cfg, Rng* rng = nullptr) {
  const auto n = static_cast<std::size_t>(texts.rows());
  if (n < 2) throw BatchTooSmall(n);
  if (images.rows() != texts.rows() || images.cols() != texts.cols())
    throw DimensionMismatch(static_cast<std::size_t>(texts.size()), static_cast<std::size_t>(images.size()));
  if (weights.size() != n) throw DimensionMismatch(n, weights.size());
  const Matrix t2i = texts * images.transpose();  // row: text anchor, col: image
  const Matrix i2t = t2i.transpose();
  TripletResult r;
  r.text_negatives = detail::mine_negatives(t2i, cfg.mining, rng);
  r.image_negatives = detail::mine_negatives(i2t, cfg.mining, rng);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const double dpos = 1.0 - t2i(ii, ii);
    const double ht = std::max(0.0, dpos - (1.0 - t2i(ii, static_cast<Eigen::Index>(r.text_negatives[i]))) + cfg.margin);
    const double hi = std::max(0.0, dpos - (1.0 - i2t(ii, static_cast<Eigen::Index>(r.image_negatives[i]))) + cfg.margin);
    r.text_hinges.push_back(ht);
    r.image_hinges.push_back(hi);
    total += weights[i] * (ht + hi);
  }
  r.loss = total / static_cast<double>(n);
  return r;
}

inline double weighted_triplet_loss(const Matrix& texts, const Matrix& images, std::span<const double> weights,
                                    const TripletConfig& cfg, Rng* rng = nullptr) {
  return weighted_triplet_terms(texts, images, weights, cfg, rng).loss;
}

/// Differentiable form. Negatives are mined on the forward values and held fixed.
inline ad::Var weighted_triplet_loss(ad::Var texts, ad::Var images, std::vector<double> weights, const TripletConfig& cfg,
                                     Rng* rng = nullptr) {
  TripletResult r = weighted_triplet_terms(texts.value(), images.value(), weights, cfg, rng);
  Matrix out(1, 1);
  out(0, 0) = r.loss;
  return texts.tape()->record(
      std::move(out), {texts, images},
      [texts, images, weights = std::move(weights), r = std::move(r)](ad::Tape& t, std::size_t self) {
        const Matrix& T = texts.value();
        const Matrix& I = images.value();
        const auto n = static_cast<Eigen::Index>(weights.size());
        const double up = t.grad(self)(0, 0) / static_cast<double>(n);
        Matrix gT = Matrix::Zero(T.rows(), T.cols());
        Matrix gI = Matrix::Zero(I.rows(), I.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
          const double w = up * weights[static_cast<std::size_t>(i)];
          if (r.text_hinges[static_cast<std::size_t>(i)] > 0.0) {
            // h = -<t_i, I_i> + <t_i, I_neg> + margin
            const auto j = static_cast<Eigen::Index>(r.text_negatives[static_cast<std::size_t>(i)]);
            gT.row(i) += w * (I.row(j) - I.row(i));
            gI.row(i) -= w * T.row(i);
            gI.row(j) += w * T.row(i);
          }
          if (r.image_hinges[static_cast<std::size_t>(i)] > 0.0) {
            const auto j = static_cast<Eigen::Index>(r.image_negatives[static_cast<std::size_t>(i)]);
            gI.row(i) += w * (T.row(j) - T.row(i));
            gT.row(i) -= w * I.row(i);
            gT.row(j) += w * I.row(i);
          }
        }
        if (texts.requires_grad()) t.grad(texts.id()) += gT;
        if (images.requires_grad()) t.grad(images.id()) += gI;
      });
}

// ---------------------------------------------------------------------------
// Discriminator

/// Hidden widths d and max(1, d/2); input is the 2d concatenation [text; image].
inline ParamStore init_discriminator(std::size_t embed_dim, std::uint64_t seed) {
  const auto d = static_cast<Eigen::Index>(embed_dim);
  const Eigen::Index h2 = std::max<Eigen::Index>(1, d / 2);
  Rng rng = make_rng(seed, "disc.init");
  ParamStore p;
  auto uniform = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    std::uniform_real_distribution<double> u(-1.0 / std::sqrt(static_cast<double>(r)), 1.0 / std::sqrt(static_cast<double>(r)));
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index k = 0; k < c; ++k) m(i, k) = u(rng);
    p.emplace(name, std::move(m));
  };
  uniform("disc.w1", 2 * d, d);
  p.emplace("disc.b1", Matrix::Zero(1, d));
  uniform("disc.w2", d, h2);
  p.emplace("disc.b2", Matrix::Zero(1, h2));
  uniform("disc.w3", h2, 1);
  p.emplace("disc.b3", Matrix::Zero(1, 1));
  return p;
}

/// n x 1 logits for n rows of [text | image].
inline ad::Var discriminator_logits(const Bound& p, ad::Var pairs) {
  ad::Var h = ad::relu(ad::add_row(ad::matmul(pairs, p("disc.w1")), p("disc.b1")));
  h = ad::relu(ad::add_row(ad::matmul(h, p("disc.w2")), p("disc.b2")));
  return ad::add_row(ad::matmul(h, p("disc.w3")), p("disc.b3"));
}

/// Probability that the (text, image) pair comes from the source domain.
inline double discriminator_forward(const Vector& text_emb, const Vector& image_emb, const ParamStore& params) {
  const auto d = params.at("disc.w1").rows() / 2;
  if (text_emb.size() != d || image_emb.size() != d)
    throw DimensionMismatch(static_cast<std::size_t>(d), static_cast<std::size_t>(std::max(text_emb.size(), image_emb.size())));
  ad::Tape t(false);
  Matrix x(1, 2 * d);
  x << text_emb.transpose(), image_emb.transpose();
  return ad::sigmoid(discriminator_logits(Bound(t, params), t.constant(std::move(x)))).scalar();
}

// ---------------------------------------------------------------------------
// Adversarial losses

inline constexpr double kProbabilityClamp = 1e-7;

struct AdversarialLosses {
  double disc_loss = 0.0;
  double enc_loss = 0.0;
};

namespace detail {

inline double clamp_prob(double p) { return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp); }

}  // namespace detail

/// From discriminator probabilities on aligned source/target rows.
///   disc = -mean_i w_i [log D(src_i) + log(1 - D(tgt_i))]
///   enc  = -mean_i w_i [log D(tgt_i) + log(1 - D(src_i))]
/// Target terms use weight 1 when `weight_target` is false.
inline AdversarialLosses adversarial_losses(std::span<const double> d_src, std::span<const double> d_tgt,
                                            std::span<const double> weights, bool weight_target = true) {
  const std::size_t n = d_src.size();
  if (d_tgt.size() != n || weights.size() != n) throw DimensionMismatch(n, std::min(d_tgt.size(), weights.size()));
  AdversarialLosses l;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = detail::clamp_prob(d_src[i]), t = detail::clamp_prob(d_tgt[i]);
    const double wt = weight_target ? weights[i] : 1.0;
    l.disc_loss -= weights[i] * std::log(s) + wt * std::log(1.0 - t);
    l.enc_loss -= wt * std::log(t) + weights[i] * std::log(1.0 - s);
  }
  l.disc_loss /= static_cast<double>(n);
  l.enc_loss /= static_cast<double>(n);
  return l;
}

/// -(1/n) sum_i w_i log p_i (label 1) or log(1 - p_i) (label 0), p = clamp(sigmoid(logit)).
/// Gradient is zero where the clamp is active.
inline ad::Var weighted_log_likelihood(ad::Var logits, std::vector<double> weights, bool label) {
  const auto n = static_cast<Eigen::Index>(weights.size());
  assert(logits.rows() == n && logits.cols() == 1);
  Matrix out = Matrix::Zero(1, 1);
  Eigen::VectorXd dz(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double z = logits.value()(i, 0);
    const double p = 1.0 / (1.0 + std::exp(-z));
    const double pc = detail::clamp_prob(p);
    const bool clamped = pc != p;
    const double w = weights[static_cast<std::size_t>(i)];
    if (label) {
      out(0, 0) -= w * std::log(pc);
      dz(i) = clamped ? 0.0 : -w * (1.0 - p);
    } else {
      out(0, 0) -= w * std::log(1.0 - pc);
      dz(i) = clamped ? 0.0 : w * p;
    }
  }
  out /= static_cast<double>(n);
  dz /= static_cast<double>(n);
  return logits.tape()->record(std::move(out), {logits}, [logits, dz](ad::Tape& t, std::size_t self) {
    t.grad(logits.id()).col(0) += t.grad(self)(0, 0) * dz;
  });
}

struct AdversarialGraph {
  ad::Var disc_loss;
  ad::Var enc_loss;
};

inline AdversarialGraph adversarial_losses(ad::Var src_logits, ad::Var tgt_logits, const std::vector<double>& weights,
                                           bool weight_target = true) {
  const std::vector<double> tw = weight_target ? weights : std::vector<double>(weights.size(), 1.0);
  return {ad::add(weighted_log_likelihood(src_logits, weights, true), weighted_log_likelihood(tgt_logits, tw, false)),
          ad::add(weighted_log_likelihood(tgt_logits, tw, true), weighted_log_likelihood(src_logits, weights, false))};
}

// ---------------------------------------------------------------------------
// Fine-tuning loop

struct FinetuneLogEntry {
  std::size_t step = 0;
  std::size_t epoch = 0;
  RankWindow window;
  double triplet = 0.0;
  double adv_enc = 0.0;
  double adv_disc = 0.0;
  double wvec_min = 0.0;
  double wvec_max = 0.0;
  double total = 0.0;
};

inline nlohmann::json to_json(const FinetuneLogEntry& e) {
  return {{"step", e.step},         {"epoch", e.epoch},       {"window", {e.window.lo, e.window.hi}},
          {"triplet", e.triplet},   {"adv_enc", e.adv_enc},   {"adv_disc", e.adv_disc},
          {"wvec_min", e.wvec_min}, {"wvec_max", e.wvec_max}, {"total", e.total}};
}

struct FinetuneResult {
  Model adapted;
  ParamStore discriminator;
  std::vector<FinetuneLogEntry> log;
  std::vector<nlohmann::json> sampler_debug;  ///< one record per step when SS is on
};

namespace detail {

inline Matrix pair_features(const Model& frozen, std::span<const PairRecord> records) {
  Matrix out(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(frozen.config.embed_dim));
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) =
        aggregate_pair_feature(frozen.image_embedding(records[i].image), frozen.text_embedding(records[i].caption_tokens))
            .transpose();
  }
  return out;
}

inline Matrix gather(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

struct PairBatch {
  ad::Var texts;
  ad::Var images;
};

inline PairBatch encode_pairs(const Bound& p, const EncoderConfig& cfg, std::span<const PairRecord> records,
                              const std::vector<std::size_t>& idx) {
  std::vector<ad::Var> t, im;
  for (std::size_t i : idx) {
    t.push_back(encode_text(p, cfg, TokenSequence::wrap(records[i].caption_tokens, cfg.max_seq_len)));
    im.push_back(encode_image(p, cfg, records[i].image));
  }
  return {ad::concat_rows(t), ad::concat_rows(im)};
}

inline void check_compatible(const Model& model, std::span<const PairRecord> records) {
  for (const auto& r : records) {
    if (const auto* f = std::get_if<Vector>(&r.image)) {
      if (model.config.input_mode != ImageInputMode::kFeatures || static_cast<std::size_t>(f->size()) != model.config.feature_dim)
        throw IncompatibleCheckpoint("checkpoint does not match feature records of dimension " + std::to_string(f->size()));
    } else if (model.config.input_mode != ImageInputMode::kPixels) {
      throw IncompatibleCheckpoint("checkpoint expects feature vectors but corpus has pixel images");
    }
  }
}

}  // namespace detail

/// Source batches cycle through reshuffled passes over the source training set;
/// target batches follow build_batches with drop-last.
inline FinetuneResult finetune(const Model& pretrained, std::span<const PairRecord> source,
                               std::span<const PairRecord> target, const AdaptConfig& cfg, const Toggles& toggles,
                               std::uint64_t seed) {
  cfg.validate();
  if (source.size() < cfg.source_batch) throw InsufficientSources(source.size(), cfg.source_batch);
  detail::check_compatible(pretrained, source);
  detail::check_compatible(pretrained, target);

  FinetuneResult result;
  result.adapted = pretrained;
  Model& model = result.adapted;
  result.discriminator = init_discriminator(pretrained.config.embed_dim, seed);
  Adam enc_opt, disc_opt;

  // Sampler features come from the frozen pre-trained encoders.
  const Matrix src_feats = detail::pair_features(pretrained, source);
  const Matrix tgt_feats = detail::pair_features(pretrained, target);

  Rng source_rng = make_rng(seed, "adapt.source");
  Rng pick_rng = make_rng(seed, "adapt.random_subset");
  Rng mining_rng = make_rng(seed, "adapt.mining");
  std::vector<std::size_t> source_order(source.size());
  std::iota(source_order.begin(), source_order.end(), std::size_t{0});
  deterministic_shuffle(source_order, source_rng);
  std::size_t source_cursor = 0;
  auto next_source_batch = [&] {
    if (source_cursor + cfg.source_batch > source_order.size()) {
      deterministic_shuffle(source_order, source_rng);
      source_cursor = 0;
    }
    std::vector<std::size_t> b(source_order.begin() + static_cast<std::ptrdiff_t>(source_cursor),
                               source_order.begin() + static_cast<std::ptrdiff_t>(source_cursor + cfg.source_batch));
    source_cursor += cfg.source_batch;
    return b;
  };

  const std::size_t n = cfg.target_batch;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    RankWindow window{0.0, 1.0};
    if (toggles.ss && toggles.cl) {
      const std::size_t horizon = std::max<std::size_t>(cfg.epochs, 1);
      window = curriculum_window({std::min(epoch, horizon), horizon, cfg.curriculum_increment, cfg.curriculum_mode});
    }
    const auto target_batches = build_batches(target.size(), n, mix64(seed ^ (epoch * 0x9e37ULL)), BatchMode::kTraining);
    for (const auto& tgt_idx : target_batches) {
      ++step;
      const auto src_batch = next_source_batch();
      std::vector<std::size_t> chosen;  // indices into `source`
      std::vector<double> wvec(n, 1.0);
      if (toggles.ss) {
        const Matrix w1 = compute_w1(detail::gather(tgt_feats, tgt_idx), detail::gather(src_feats, src_batch));
        const auto sel = select_source_subset(w1, window, n);
        for (std::size_t s : sel) chosen.push_back(src_batch[s]);
        const Matrix w2 = compute_w2(detail::gather(src_feats, chosen), detail::gather(tgt_feats, tgt_idx));
        wvec = compute_weight_vector(w2);
        result.sampler_debug.push_back(acss_debug_json(w1, window, sel, wvec));
      } else {
        std::vector<std::size_t> pool = src_batch;
        deterministic_shuffle(pool, pick_rng);
        chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
      }

      FinetuneLogEntry entry;
      entry.step = step;
      entry.epoch = epoch;
      entry.window = window;
      entry.wvec_min = *std::min_element(wvec.begin(), wvec.end());
      entry.wvec_max = *std::max_element(wvec.begin(), wvec.end());

      if (toggles.at) {
        ad::Tape tape;
        Bound disc(tape, result.discriminator);
        // Encoder outputs enter the discriminator step as constants.
        ad::Tape frozen(false);
        Bound fenc(frozen, model.params);
        auto s = detail::encode_pairs(fenc, model.config, source, chosen);
        auto t = detail::encode_pairs(fenc, model.config, target, tgt_idx);
        const ad::Var sp[] = {s.texts, s.images};
        const ad::Var tp[] = {t.texts, t.images};
        ad::Var src_in = tape.constant(ad::concat_cols(sp).value());
        ad::Var tgt_in = tape.constant(ad::concat_cols(tp).value());
        auto adv = adversarial_losses(discriminator_logits(disc, src_in), discriminator_logits(disc, tgt_in), wvec,
                                      cfg.adv_weight_target);
        entry.adv_disc = adv.disc_loss.scalar();
        if (!std::isfinite(entry.adv_disc)) throw DivergedLoss(epoch, step);
        tape.backward(adv.disc_loss);
        disc_opt.step(result.discriminator, tape.parameter_gradients(), cfg.disc_lr);
      }

      ad::Tape tape;
      Bound enc(tape, model.params);
      auto s = detail::encode_pairs(enc, model.config, source, chosen);
      ad::Var triplet = weighted_triplet_loss(s.texts, s.images, wvec, cfg.triplet, &mining_rng);
      ad::Var total = triplet;
      entry.triplet = triplet.scalar();
      if (toggles.at) {
        // Discriminator weights are bound but never stepped here.
        Bound disc(tape, result.discriminator);
        auto t = detail::encode_pairs(enc, model.config, target, tgt_idx);
        const ad::Var sp[] = {s.texts, s.images};
        const ad::Var tp[] = {t.texts, t.images};
        auto adv = adversarial_losses(discriminator_logits(disc, ad::concat_cols(sp)),
                                      discriminator_logits(disc, ad::concat_cols(tp)), wvec, cfg.adv_weight_target);
        entry.adv_enc = adv.enc_loss.scalar();
        total = ad::add(triplet, ad::scale(adv.enc_loss, cfg.beta));
      }
      entry.total = total.scalar();
      if (!std::isfinite(entry.total)) throw DivergedLoss(epoch, step);
      tape.backward(total);
      ParamStore grads = tape.parameter_gradients();
      std::erase_if(grads, [](const auto& kv) { return kv.first.rfind("disc.", 0) == 0; });
      enc_opt.step(model.params, grads, cfg.finetune_lr);
      result.log.push_back(entry);
    }
  }
  return result;
}

}  // namespace crossret
