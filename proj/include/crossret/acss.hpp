#pragma once

// Curriculum-based source sampling: target x source similarity (W1), a
// per-epoch rank window, round-robin selection of one source per target, the
// selected-source x target similarity (W2) and the weight vector derived from
// its row sums.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossret/autodiff.hpp"
#include "crossret/errors.hpp"

namespace crossret {

/// Normalized mean of an image and a text embedding.
inline Vector aggregate_pair_feature(const Vector& image_emb, const Vector& text_emb) {
  if (image_emb.size() != text_emb.size())
    throw DimensionMismatch(static_cast<std::size_t>(image_emb.size()), static_cast<std::size_t>(text_emb.size()));
  Vector mean = 0.5 * (image_emb + text_emb);
  const double n = mean.norm();
  if (n == 0.0) throw ZeroVector();
  return mean / n;
}

/// Cosine similarity of every row of `rows` with every row of `cols`.
inline Matrix cosine_matrix(const Matrix& rows, const Matrix& cols) {
  if (rows.cols() != cols.cols())
    throw DimensionMismatch(static_cast<std::size_t>(rows.cols()), static_cast<std::size_t>(cols.cols()));
  const Eigen::VectorXd rn = rows.rowwise().norm();
  const Eigen::VectorXd cn = cols.rowwise().norm();
  Matrix m = rows * cols.transpose();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = std::clamp(m(i, j) / (rn(i) * cn(j)), -1.0, 1.0);
  return m;
}

/// n_t x n_s; entry (j, i) is the cosine of target j with source i.
inline Matrix compute_w1(const Matrix& target_feats, const Matrix& source_feats) {
  return cosine_matrix(target_feats, source_feats);
}

/// n x n; entry (i, j) is the cosine of selected source i with target j.
inline Matrix compute_w2(const Matrix& selected_source_feats, const Matrix& target_feats) {
  if (selected_source_feats.rows() != target_feats.rows())
    throw DimensionMismatch(static_cast<std::size_t>(target_feats.rows()),
                            static_cast<std::size_t>(selected_source_feats.rows()));
  return cosine_matrix(selected_source_feats, target_feats);
}

// ---------------------------------------------------------------------------
// Curriculum

enum class CurriculumMode { kWindow, kCumulative };

struct CurriculumState {
  std::size_t epoch = 1;  ///< 1-based
  std::size_t n_epochs = 5;
  double increment = 0.20;
  CurriculumMode mode = CurriculumMode::kWindow;

  void validate() const {
    if (epoch < 1 || epoch > n_epochs) throw ConfigError("curriculum.epoch", "must be in [1, n_epochs]");
    if (!(increment > 0) || increment * static_cast<double>(n_epochs) > 1.0 + 1e-9)
      throw ConfigError("curriculum.increment", "increment * n_epochs must be <= 1");
  }
};

/// Half-open rank-percentile interval (lo, hi].
struct RankWindow {
  double lo = 0.0;
  double hi = 1.0;
  bool operator==(const RankWindow&) const = default;
};

inline RankWindow curriculum_window(const CurriculumState& s) {
  s.validate();
  const double hi = static_cast<double>(s.epoch) * s.increment;
  const double lo = s.mode == CurriculumMode::kWindow ? static_cast<double>(s.epoch - 1) * s.increment : 0.0;
  return {lo, std::min(hi, 1.0)};
}

/// Whether the 0-based rank position lies in the window: lo < (rank+1)/n <= hi.
inline bool rank_in_window(std::size_t rank, std::size_t n, const RankWindow& w) {
  const double pos = static_cast<double>(rank + 1);
  const double nd = static_cast<double>(n);
  return pos > w.lo * nd + 1e-9 && pos <= w.hi * nd + 1e-9;
}

/// Source indices sorted by descending similarity, ties to the lower index.
inline std::vector<std::size_t> rank_sources(const Matrix& w1, Eigen::Index target) {
  std::vector<std::size_t> order(static_cast<std::size_t>(w1.cols()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return w1(target, static_cast<Eigen::Index>(a)) > w1(target, static_cast<Eigen::Index>(b));
  });
  return order;
}

/// Picks exactly `count` distinct sources. Each target holds a candidate list
/// (its ranked sources inside the window); targets take turns in index order,
/// each taking its next not-yet-selected candidate. Once every window list is
/// spent, the same round-robin continues over the ranks just below the window
/// (nearest first), then over the ranks above it.
inline std::vector<std::size_t> select_source_subset(const Matrix& w1, const RankWindow& window, std::size_t count) {
  const auto n_t = static_cast<std::size_t>(w1.rows());
  const auto n_s = static_cast<std::size_t>(w1.cols());
  if (n_s < count) throw InsufficientSources(n_s, count);
  if (count == 0) return {};
  if (n_t == 0) throw Error("select_source_subset needs at least one target row");

  std::vector<std::vector<std::size_t>> ranked(n_t);
  for (std::size_t j = 0; j < n_t; ++j) ranked[j] = rank_sources(w1, static_cast<Eigen::Index>(j));

  std::size_t first_in = n_s, last_in = 0;  // rank band of the window
  for (std::size_t r = 0; r < n_s; ++r) {
    if (rank_in_window(r, n_s, window)) {
      first_in = std::min(first_in, r);
      last_in = r;
    }
  }
  std::vector<std::size_t> window_ranks, below_ranks, above_ranks;
  if (first_in < n_s) {
    for (std::size_t r = first_in; r <= last_in; ++r) window_ranks.push_back(r);
    for (std::size_t r = first_in; r-- > 0;) below_ranks.push_back(r);
    for (std::size_t r = last_in + 1; r < n_s; ++r) above_ranks.push_back(r);
  } else {
    // Empty window (fewer sources than percentile steps): everything is "above".
    const std::size_t cut = std::min<std::size_t>(n_s, static_cast<std::size_t>(std::floor(window.lo * static_cast<double>(n_s) + 1e-9)));
    for (std::size_t r = cut; r-- > 0;) below_ranks.push_back(r);
    for (std::size_t r = cut; r < n_s; ++r) above_ranks.push_back(r);
  }

  std::vector<char> taken(n_s, 0);
  std::vector<std::size_t> selected;
  selected.reserve(count);
  for (const auto* phase : {&window_ranks, &below_ranks, &above_ranks}) {
    std::vector<std::size_t> cursor(n_t, 0);
    bool progress = true;
    while (selected.size() < count && progress) {
      progress = false;
      for (std::size_t j = 0; j < n_t && selected.size() < count; ++j) {
        auto& c = cursor[j];
        while (c < phase->size() && taken[ranked[j][(*phase)[c]]]) ++c;
        if (c < phase->size()) {
          const std::size_t src = ranked[j][(*phase)[c]];
          taken[src] = 1;
          selected.push_back(src);
          ++c;
          progress = true;
        }
      }
    }
    if (selected.size() == count) break;
  }
  return selected;
}

// ---------------------------------------------------------------------------
// Weight vector

/// Row sums of W2, min-max normalized, then rescaled to sum to n. All ones when
/// every row sum is equal.
inline std::vector<double> compute_weight_vector(const Matrix& w2) {
  const auto n = static_cast<std::size_t>(w2.rows());
  if (n == 0) throw Error("weight vector needs a non-empty W2");
  const Eigen::VectorXd s = w2.rowwise().sum();
  const double lo = s.minCoeff(), hi = s.maxCoeff();
  std::vector<double> w(n, 1.0);
  if (hi == lo) return w;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += w[i] = (s(static_cast<Eigen::Index>(i)) - lo) / (hi - lo);
  for (auto& v : w) v = static_cast<double>(n) * v / total;
  return w;
}

/// Forensics record for one sampling step.
inline nlohmann::json acss_debug_json(const Matrix& w1, const RankWindow& window, const std::vector<std::size_t>& selected,
                                      const std::vector<double>& weights) {
  return {{"w1_shape", {w1.rows(), w1.cols()}},
          {"window", {window.lo, window.hi}},
          {"selected", selected},
          {"w_vec", weights}};
}

}  // namespace crossret
