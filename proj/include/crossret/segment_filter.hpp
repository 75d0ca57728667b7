#pragma once

// Segment selection and weighting: area threshold, segment-text scoring,
// score threshold with a top-count cap, and score-weighted aggregation.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "crossret/autodiff.hpp"
#include "crossret/data_corpus.hpp"
#include "crossret/errors.hpp"

namespace crossret {

struct FilterConfig {
  double area_threshold = 0.2;
  double score_threshold = 0.2;
  std::size_t max_segments = 6;

  void validate() const {
    if (!(area_threshold >= 0.0 && area_threshold < 1.0)) throw ConfigError("filter.area_threshold", "must be in [0,1)");
    if (max_segments < 1) throw ConfigError("filter.max_segments", "must be >= 1");
  }
};

struct ScoredSegment {
  std::size_t index = 0;  ///< position in the caller's segment list
  Vector embedding;       ///< unit norm
  double score = 0.0;
};

/// Indices of segments whose area strictly exceeds the threshold, in input order.
inline std::vector<std::size_t> area_filter_indices(std::span<const SegmentInput> segments, double area_threshold) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (segments[i].area > area_threshold) keep.push_back(i);
  }
  return keep;
}

inline std::vector<SegmentInput> filter_by_area(std::span<const SegmentInput> segments, double area_threshold) {
  std::vector<SegmentInput> out;
  for (std::size_t i : area_filter_indices(segments, area_threshold)) out.push_back(segments[i]);
  return out;
}

inline std::vector<double> score_segments(std::span<const Vector> segment_embeddings, const Vector& text_embedding) {
  std::vector<double> scores;
  scores.reserve(segment_embeddings.size());
  for (const Vector& e : segment_embeddings) {
    if (e.size() != text_embedding.size())
      throw DimensionMismatch(static_cast<std::size_t>(text_embedding.size()), static_cast<std::size_t>(e.size()));
    scores.push_back(e.dot(text_embedding));
  }
  return scores;
}

/// Keeps score > threshold, caps at `max_segments` by highest score (ties: lower
/// index first), and returns the survivors in descending score order.
inline std::vector<ScoredSegment> filter_by_score(std::vector<ScoredSegment> scored, double score_threshold,
                                                  std::size_t max_segments) {
  std::erase_if(scored, [&](const ScoredSegment& s) { return !(s.score > score_threshold); });
  std::stable_sort(scored.begin(), scored.end(), [](const ScoredSegment& a, const ScoredSegment& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  if (scored.size() > max_segments) scored.resize(max_segments);
  return scored;
}

/// Score-weighted mean of the segment embeddings. Not re-normalized.
inline Vector aggregate_segments(std::span<const ScoredSegment> scored) {
  if (scored.empty()) throw EmptySegmentSet();
  Vector acc = Vector::Zero(scored.front().embedding.size());
  double wsum = 0.0;
  for (const auto& s : scored) {
    acc += s.score * s.embedding;
    wsum += s.score;
  }
  return acc / wsum;
}

/// Differentiable aggregate of the kept segment rows (k x d) against the 1 x d
/// text embedding: weights are the scores <e_i, t> normalized to sum to one, and
/// gradients flow through both the embeddings and the scores.
inline ad::Var aggregate_segments(ad::Var embeddings, ad::Var text) {
  if (embeddings.rows() == 0) throw EmptySegmentSet();
  if (embeddings.cols() != text.cols())
    throw DimensionMismatch(static_cast<std::size_t>(text.cols()), static_cast<std::size_t>(embeddings.cols()));
  const Matrix& e = embeddings.value();
  const Vector scores = e * text.value().transpose();
  const double total = scores.sum();
  const Vector w = scores / total;
  Matrix out = w.transpose() * e;
  return embeddings.tape()->record(std::move(out), {embeddings, text}, [embeddings, text, w, total](ad::Tape& t, std::size_t self) {
    const RowVector g = t.grad(self).row(0);
    const Matrix& e = embeddings.value();
    const Vector dw = e * g.transpose();
    const Vector ds = (dw.array() - w.dot(dw)) / total;
    if (embeddings.requires_grad()) {
      Matrix& ge = t.grad(embeddings.id());
      ge.noalias() += w * g;
      ge.noalias() += ds * text.value();
    }
    if (text.requires_grad()) t.grad(text.id()).noalias() += ds.transpose() * e;
  });
}

/// Area filter, scoring and score filter in one pass given already computed
/// embeddings for the area survivors. Returned indices refer to `segments`.
inline std::vector<ScoredSegment> select_segments(std::span<const SegmentInput> segments,
                                                  std::span<const Vector> area_survivor_embeddings,
                                                  const Vector& text_embedding, const FilterConfig& cfg) {
  const auto kept = area_filter_indices(segments, cfg.area_threshold);
  if (kept.size() != area_survivor_embeddings.size())
    throw DimensionMismatch(kept.size(), area_survivor_embeddings.size());
  const auto scores = score_segments(area_survivor_embeddings, text_embedding);
  std::vector<ScoredSegment> scored;
  scored.reserve(kept.size());
  for (std::size_t k = 0; k < kept.size(); ++k) scored.push_back({kept[k], area_survivor_embeddings[k], scores[k]});
  return filter_by_score(std::move(scored), cfg.score_threshold, cfg.max_segments);
}

}  // namespace crossret
