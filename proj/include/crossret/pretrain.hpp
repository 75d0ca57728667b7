#pragma once

// Multi-modal pre-training: symmetric contrastive alignment of images and of
// segment aggregates with their captions, optimized with Adam under a stepwise
// learning-rate decay.

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossret/autodiff.hpp"
#include "crossret/checkpoint.hpp"
#include "crossret/data_corpus.hpp"
#include "crossret/encoders.hpp"
#include "crossret/errors.hpp"
#include "crossret/eval.hpp"
#include "crossret/optimizer.hpp"
#include "crossret/segment_filter.hpp"

namespace crossret {

struct ContrastiveConfig {
  double temperature = 0.07;
  double learning_rate = 1e-5;
  double lr_decay_factor = 0.3;
  std::size_t lr_decay_every = 10;
  std::size_t epochs = 15;
  std::size_t batch_size = 40;
  double weight_decay = 0.0;  ///< true L2 coefficient, off by default

  void validate() const {
    if (!(temperature > 0)) throw ConfigError("pretrain.temperature", "must be > 0");
    if (!(learning_rate >= 0)) throw ConfigError("pretrain.lr", "must be >= 0");
    if (batch_size < 2) throw ConfigError("pretrain.batch_size", "must be >= 2");
    if (lr_decay_every == 0) throw ConfigError("pretrain.lr_decay_every", "must be >= 1");
  }

  /// Learning rate in effect during a 1-based epoch.
  double lr_at(std::size_t epoch) const {
    const auto decays = static_cast<double>((epoch - 1) / lr_decay_every);
    return learning_rate * std::pow(lr_decay_factor, decays);
  }
};

// ---------------------------------------------------------------------------
// Contrastive loss

/// Loss value and the gradient with respect to the logit matrix.
struct ContrastiveTerms {
  double loss = 0.0;
  Matrix dlogits;
};

/// Symmetric InfoNCE on a logit matrix whose diagonal holds the positives.
inline ContrastiveTerms contrastive_from_logits(const Matrix& logits) {
  const Eigen::Index n = logits.rows();
  const Matrix prow = ad::softmax_rows_value(logits);
  const Matrix pcol = ad::softmax_rows_value(logits.transpose()).transpose();
  double row_ce = 0.0, col_ce = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double rmax = logits.row(i).maxCoeff();
    row_ce += rmax + std::log((logits.row(i).array() - rmax).exp().sum()) - logits(i, i);
    const double cmax = logits.col(i).maxCoeff();
    col_ce += cmax + std::log((logits.col(i).array() - cmax).exp().sum()) - logits(i, i);
  }
  const double nd = static_cast<double>(n);
  ContrastiveTerms t;
  t.loss = 0.5 * (row_ce / nd + col_ce / nd);
  t.dlogits = (prow + pcol - 2.0 * Matrix::Identity(n, n)) * (0.5 / nd);
  return t;
}

/// Rows of `left` and `right` are unit embeddings; pair i <-> i is positive.
inline double contrastive_loss(const Matrix& left, const Matrix& right, double temperature) {
  if (left.rows() < 2) throw BatchTooSmall(static_cast<std::size_t>(left.rows()));
  if (left.rows() != right.rows() || left.cols() != right.cols())
    throw DimensionMismatch(static_cast<std::size_t>(left.size()), static_cast<std::size_t>(right.size()));
  return contrastive_from_logits(left * right.transpose() / temperature).loss;
}

inline ad::Var contrastive_loss(ad::Var left, ad::Var right, double temperature) {
  if (left.rows() < 2) throw BatchTooSmall(static_cast<std::size_t>(left.rows()));
  if (left.rows() != right.rows() || left.cols() != right.cols())
    throw DimensionMismatch(static_cast<std::size_t>(left.value().size()), static_cast<std::size_t>(right.value().size()));
  ContrastiveTerms terms = contrastive_from_logits(left.value() * right.value().transpose() / temperature);
  Matrix out(1, 1);
  out(0, 0) = terms.loss;
  return left.tape()->record(
      std::move(out), {left, right},
      [left, right, temperature, g = std::move(terms.dlogits)](ad::Tape& t, std::size_t self) {
        const double up = t.grad(self)(0, 0) / temperature;
        if (left.requires_grad()) t.grad(left.id()).noalias() += up * g * right.value();
        if (right.requires_grad()) t.grad(right.id()).noalias() += up * g.transpose() * left.value();
      });
}

// ---------------------------------------------------------------------------
// Combined pre-training objective

struct PretrainLoss {
  double img2text = 0.0;
  double seg2text = 0.0;
  double total = 0.0;
};

/// Segment aggregates are L2-normalized here. Rows with seg_mask[i] == false
/// (no surviving segments) are left out of the segment term, which is 0 when
/// fewer than two rows remain.
inline PretrainLoss pretrain_loss(const Matrix& images, const Matrix& segment_aggs, const Matrix& texts, double temperature,
                                  std::span<const bool> seg_mask) {
  PretrainLoss l;
  l.img2text = contrastive_loss(images, texts, temperature);
  std::vector<Eigen::Index> keep;
  for (std::size_t i = 0; i < seg_mask.size(); ++i)
    if (seg_mask[i]) keep.push_back(static_cast<Eigen::Index>(i));
  if (keep.size() >= 2) {
    Matrix s(static_cast<Eigen::Index>(keep.size()), segment_aggs.cols());
    Matrix t(static_cast<Eigen::Index>(keep.size()), texts.cols());
    for (std::size_t k = 0; k < keep.size(); ++k) {
      s.row(static_cast<Eigen::Index>(k)) = segment_aggs.row(keep[k]).normalized();
      t.row(static_cast<Eigen::Index>(k)) = texts.row(keep[k]);
    }
    l.seg2text = contrastive_loss(s, t, temperature);
  }
  l.total = l.img2text + l.seg2text;
  return l;
}

struct PretrainGraph {
  ad::Var img2text;
  std::optional<ad::Var> seg2text;
  ad::Var total;
  std::size_t segment_pairs = 0;  ///< pairs contributing to the segment term
};

/// Records the batch forward pass on `tape`: encodes images, captions and the
/// area-surviving segments, selects and weights segments against the caption
/// embedding, and builds both contrastive terms.
inline PretrainGraph pretrain_forward(ad::Tape& tape, const Model& model, std::span<const PairRecord* const> batch,
                                      const FilterConfig& filter, double temperature) {
  Bound p(tape, model.params);
  const EncoderConfig& cfg = model.config;
  std::vector<ad::Var> images, texts, seg_aggs, seg_texts;
  for (const PairRecord* rec : batch) {
    ad::Var img = encode_image(p, cfg, rec->image);
    ad::Var txt = encode_text(p, cfg, model.tokens(rec->caption_tokens));
    images.push_back(img);
    texts.push_back(txt);

    const auto kept = area_filter_indices(rec->segments, filter.area_threshold);
    if (kept.empty()) continue;
    std::vector<ad::Var> seg_vars;
    std::vector<Vector> seg_vals;
    for (std::size_t k : kept) {
      seg_vars.push_back(encode_image(p, cfg, segment_as_image(rec->segments[k], cfg)));
      seg_vals.push_back(seg_vars.back().value().row(0).transpose());
    }
    const Vector text_vec = txt.value().row(0).transpose();
    const auto selected = select_segments(rec->segments, seg_vals, text_vec, filter);
    if (selected.empty()) continue;
    std::vector<ad::Var> rows;
    for (const auto& s : selected) {
      const auto pos = static_cast<std::size_t>(std::find(kept.begin(), kept.end(), s.index) - kept.begin());
      rows.push_back(seg_vars[pos]);
    }
    seg_aggs.push_back(aggregate_segments(ad::concat_rows(rows), txt));
    seg_texts.push_back(txt);
  }
  PretrainGraph g;
  g.img2text = contrastive_loss(ad::concat_rows(images), ad::concat_rows(texts), temperature);
  g.total = g.img2text;
  g.segment_pairs = seg_aggs.size();
  if (seg_aggs.size() >= 2) {
    g.seg2text = contrastive_loss(ad::l2_normalize_rows(ad::concat_rows(seg_aggs)), ad::concat_rows(seg_texts), temperature);
    g.total = ad::add(g.img2text, *g.seg2text);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Training loop

struct PretrainLogEntry {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double loss_img2text = 0.0;
  double loss_seg2text = 0.0;
  double val_mean_recall = 0.0;  ///< validation MeanR at the end of this epoch
};

inline nlohmann::json to_json(const PretrainLogEntry& e) {
  return {{"epoch", e.epoch},
          {"batch", e.batch},
          {"loss_img2text", e.loss_img2text},
          {"loss_seg2text", e.loss_seg2text},
          {"val_mean_recall", e.val_mean_recall}};
}

struct PretrainResult {
  Model best;  ///< highest validation MeanR (earliest epoch on ties)
  Model last;
  std::size_t best_epoch = 0;
  std::vector<PretrainLogEntry> log;
  std::vector<double> val_mean_recall;  ///< one per epoch
};

struct PretrainOptions {
  /// When set, the parameters are written here before DivergedLoss is thrown.
  std::string divergence_dump_path;
};

inline PretrainResult pretrain(Model model, std::span<const PairRecord> train, std::span<const PairRecord> val,
                               const ContrastiveConfig& cfg, const FilterConfig& filter, std::uint64_t seed,
                               const PretrainOptions& options = {}) {
  cfg.validate();
  filter.validate();
  Adam adam(AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  PretrainResult result;
  double best_val = -1.0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    const auto batches = build_batches(train.size(), cfg.batch_size, mix64(seed + epoch), BatchMode::kTraining);
    const std::size_t first_entry = result.log.size();
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::vector<const PairRecord*> batch;
      for (std::size_t i : batches[b]) batch.push_back(&train[i]);
      ad::Tape tape;
      PretrainGraph g = pretrain_forward(tape, model, batch, filter, cfg.temperature);
      if (!std::isfinite(g.total.scalar())) {
        if (!options.divergence_dump_path.empty()) save_checkpoint(options.divergence_dump_path, model);
        throw DivergedLoss(epoch, b);
      }
      tape.backward(g.total);
      adam.step(model.params, tape.parameter_gradients(), lr);
      result.log.push_back({epoch, b, g.img2text.scalar(), g.seg2text ? g.seg2text->scalar() : 0.0, 0.0});
    }
    const double val_mr = val.empty() ? 0.0 : evaluate(model, val).mean_recall;
    for (std::size_t k = first_entry; k < result.log.size(); ++k) result.log[k].val_mean_recall = val_mr;
    result.val_mean_recall.push_back(val_mr);
    if (val_mr > best_val) {
      best_val = val_mr;
      result.best = model;
      result.best_epoch = epoch;
    }
  }
  result.last = model;
  if (val.empty() || result.best_epoch == 0) {
    result.best = model;
    result.best_epoch = cfg.epochs;
  }
  return result;
}

}  // namespace crossret
