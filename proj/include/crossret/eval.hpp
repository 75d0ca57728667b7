#pragma once

// Retrieval evaluation: cosine ranking, R@K in both directions and mean recall.

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossret/data_corpus.hpp"
#include "crossret/encoders.hpp"
#include "crossret/errors.hpp"

namespace crossret {

struct RecallReport {
  double i2t_r1 = 0, i2t_r5 = 0, i2t_r10 = 0;
  double t2i_r1 = 0, t2i_r5 = 0, t2i_r10 = 0;
  double mean_recall = 0;
  std::size_t n_queries = 0;

  bool operator==(const RecallReport&) const = default;
};

inline nlohmann::json to_json(const RecallReport& r) {
  return {{"i2t_r1", r.i2t_r1}, {"i2t_r5", r.i2t_r5}, {"i2t_r10", r.i2t_r10},         {"t2i_r1", r.t2i_r1},
          {"t2i_r5", r.t2i_r5}, {"t2i_r10", r.t2i_r10}, {"mean_recall", r.mean_recall}, {"n_queries", r.n_queries}};
}

namespace detail {

inline Matrix normalized_rows(const Matrix& m) {
  Eigen::VectorXd n = m.rowwise().norm().cwiseMax(1e-300);
  return m.array().colwise() / n.array();
}

}  // namespace detail

/// Per query, gallery indices by descending cosine similarity; ties by ascending index.
inline std::vector<std::vector<std::size_t>> rank(const Matrix& queries, const Matrix& gallery) {
  if (gallery.rows() == 0) throw EmptyGallery();
  if (queries.cols() != gallery.cols())
    throw DimensionMismatch(static_cast<std::size_t>(gallery.cols()), static_cast<std::size_t>(queries.cols()));
  const Matrix sims = detail::normalized_rows(queries) * detail::normalized_rows(gallery).transpose();
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(queries.rows()));
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    auto& order = out[static_cast<std::size_t>(q)];
    order.resize(static_cast<std::size_t>(gallery.rows()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return sims(q, static_cast<Eigen::Index>(a)) > sims(q, static_cast<Eigen::Index>(b));
    });
  }
  return out;
}

/// Percentage of queries whose ground-truth gallery index is within the first k.
inline double recall_at_k(const std::vector<std::vector<std::size_t>>& rankings, std::span<const std::size_t> ground_truth,
                          std::size_t k) {
  if (k == 0) throw Error("k must be >= 1");
  if (rankings.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& r = rankings[q];
    const auto end = r.begin() + static_cast<std::ptrdiff_t>(std::min(k, r.size()));
    if (std::find(r.begin(), end, ground_truth[q]) != end) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(rankings.size());
}

/// 0-based rank of each query's aligned item (query i <-> gallery i) under the
/// same ordering as rank(), without sorting.
inline std::vector<std::size_t> aligned_positions(const Matrix& queries, const Matrix& gallery) {
  if (gallery.rows() == 0) throw EmptyGallery();
  const Matrix sims = detail::normalized_rows(queries) * detail::normalized_rows(gallery).transpose();
  std::vector<std::size_t> pos(static_cast<std::size_t>(queries.rows()));
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    const double s = sims(q, q);
    std::size_t ahead = 0;
    for (Eigen::Index g = 0; g < gallery.rows(); ++g) {
      const double v = sims(q, g);
      if (v > s || (v == s && g < q)) ++ahead;
    }
    pos[static_cast<std::size_t>(q)] = ahead;
  }
  return pos;
}

/// Report for aligned embedding matrices (row i of images matches row i of texts).
inline RecallReport recall_report(const Matrix& images, const Matrix& texts) {
  if (images.rows() != texts.rows())
    throw DimensionMismatch(static_cast<std::size_t>(images.rows()), static_cast<std::size_t>(texts.rows()));
  if (images.rows() == 0) throw EmptyGallery();
  auto pct = [](const std::vector<std::size_t>& pos, std::size_t k) {
    const auto hits = std::count_if(pos.begin(), pos.end(), [k](std::size_t p) { return p < k; });
    return 100.0 * static_cast<double>(hits) / static_cast<double>(pos.size());
  };
  const auto i2t = aligned_positions(images, texts);
  const auto t2i = aligned_positions(texts, images);
  RecallReport r;
  r.i2t_r1 = pct(i2t, 1);
  r.i2t_r5 = pct(i2t, 5);
  r.i2t_r10 = pct(i2t, 10);
  r.t2i_r1 = pct(t2i, 1);
  r.t2i_r5 = pct(t2i, 5);
  r.t2i_r10 = pct(t2i, 10);
  r.mean_recall = (r.i2t_r1 + r.i2t_r5 + r.i2t_r10 + r.t2i_r1 + r.t2i_r5 + r.t2i_r10) / 6.0;
  r.n_queries = i2t.size();
  return r;
}

struct EncodedCorpus {
  Matrix images;  ///< n x d, unit rows
  Matrix texts;
};

inline EncodedCorpus encode_corpus(const Model& model, std::span<const PairRecord> records) {
  const auto n = static_cast<Eigen::Index>(records.size());
  const auto d = static_cast<Eigen::Index>(model.config.embed_dim);
  EncodedCorpus out{Matrix(n, d), Matrix(n, d)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& rec = records[static_cast<std::size_t>(i)];
    out.images.row(i) = model.image_embedding(rec.image).transpose();
    out.texts.row(i) = model.text_embedding(rec.caption_tokens).transpose();
  }
  return out;
}

inline RecallReport evaluate(const Model& model, std::span<const PairRecord> test) {
  if (test.empty()) throw EmptyGallery();
  const auto enc = encode_corpus(model, test);
  return recall_report(enc.images, enc.texts);
}

struct TransferReport {
  RecallReport direct;
  RecallReport adapted;
  double delta_mean_recall = 0;
};

inline TransferReport transfer_eval(const Model& pretrained, const Model& adapted, std::span<const PairRecord> target_test) {
  TransferReport r{evaluate(pretrained, target_test), evaluate(adapted, target_test), 0.0};
  r.delta_mean_recall = r.adapted.mean_recall - r.direct.mean_recall;
  return r;
}

inline nlohmann::json to_json(const TransferReport& r) {
  return {{"direct", to_json(r.direct)}, {"adapted", to_json(r.adapted)}, {"delta_mean_recall", r.delta_mean_recall}};
}

}  // namespace crossret
