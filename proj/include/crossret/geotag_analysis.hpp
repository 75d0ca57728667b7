#pragma once

// Geo-tag analytics: frequency table, tag x record occurrence matrix, PCA to
// two components and k-means over the projected tags.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "crossret/autodiff.hpp"
#include "crossret/data_corpus.hpp"
#include "crossret/errors.hpp"
#include "crossret/rng.hpp"

namespace crossret {

inline std::map<std::string, std::size_t> tag_frequency(std::span<const PairRecord> records) {
  std::map<std::string, std::size_t> counts;
  for (const auto& r : records)
    for (const auto& t : r.geo_tags) ++counts[t];
  return counts;
}

/// Rows are tags in first-appearance order, columns are records.
struct TagMatrix {
  std::vector<std::string> tags;
  Matrix counts;
};

inline TagMatrix build_tag_matrix(std::span<const PairRecord> records) {
  TagMatrix m;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& r : records)
    for (const auto& t : r.geo_tags)
      if (index.emplace(t, m.tags.size()).second) m.tags.push_back(t);
  m.counts = Matrix::Zero(static_cast<Eigen::Index>(m.tags.size()), static_cast<Eigen::Index>(records.size()));
  for (std::size_t c = 0; c < records.size(); ++c)
    for (const auto& t : records[c].geo_tags) m.counts(static_cast<Eigen::Index>(index.at(t)), static_cast<Eigen::Index>(c)) += 1.0;
  return m;
}

struct PcaResult {
  Matrix components;   ///< 2 x n_cols, orthonormal rows
  Matrix projections;  ///< n_rows x 2
  std::array<double, 2> explained_variance_ratio{};
  std::array<double, 2> explained_variance{};  ///< with 1/(n_rows - 1) normalization
};

/// Rows are observations. Components are the top two eigenvectors of the
/// column covariance, obtained from the SVD of the centered data; each is
/// signed so its largest-magnitude entry is positive.
inline PcaResult pca_2d(const Matrix& data) {
  if (data.rows() < 2 || data.cols() < 2) throw Error("PCA needs at least 2 rows and 2 columns");
  bool identical = true;
  for (Eigen::Index r = 1; r < data.rows() && identical; ++r) identical = data.row(r) == data.row(0);
  if (identical) throw DegenerateVariance();

  const RowVector mean = data.colwise().mean();
  const Matrix centered = data.rowwise() - mean;
  Eigen::JacobiSVD<Matrix> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd sv = svd.singularValues();
  const double total = sv.squaredNorm();
  const double denom = static_cast<double>(data.rows() - 1);

  PcaResult out;
  out.components.resize(2, data.cols());
  for (Eigen::Index k = 0; k < 2; ++k) {
    Vector v = svd.matrixV().col(k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.components.row(k) = v.transpose();
    const double s2 = k < sv.size() ? sv(k) * sv(k) : 0.0;
    out.explained_variance[static_cast<std::size_t>(k)] = s2 / denom;
    out.explained_variance_ratio[static_cast<std::size_t>(k)] = total > 0 ? s2 / total : 0.0;
  }
  out.projections = centered * out.components.transpose();
  return out;
}

inline PcaResult pca_2d(const TagMatrix& m) { return pca_2d(m.counts); }

struct KMeansResult {
  std::vector<std::size_t> labels;
  Matrix centroids;
  std::vector<double> inertia_history;  ///< within-cluster sum of squares after each assignment
  std::size_t iterations = 0;
  bool converged = false;
};

/// Lloyd iterations from a seeded k-means++ start. Ties go to the lower
/// centroid index; an emptied cluster keeps its previous centroid.
inline KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t max_iterations = 100) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (k == 0 || k > n) throw TooFewPoints(n, k);
  Rng rng = make_rng(seed, "kmeans");
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  KMeansResult res;
  res.centroids.resize(static_cast<Eigen::Index>(k), points.cols());
  std::vector<char> chosen(n, 0);
  std::size_t first = static_cast<std::size_t>(rng() % n);
  res.centroids.row(0) = points.row(static_cast<Eigen::Index>(first));
  chosen[first] = 1;
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (points.row(static_cast<Eigen::Index>(i)) - res.centroids.row(static_cast<Eigen::Index>(c - 1))).squaredNorm());
      if (!chosen[i]) total += d2[i];
    }
    std::size_t pick = n;
    if (total > 0) {
      double target = unit(rng) * total;
      for (std::size_t i = 0; i < n; ++i) {
        if (chosen[i]) continue;
        pick = i;
        target -= d2[i];
        if (target < 0) break;
      }
    } else {
      for (std::size_t i = 0; i < n && pick == n; ++i)
        if (!chosen[i]) pick = i;
    }
    chosen[pick] = 1;
    res.centroids.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
  }

  res.labels.assign(n, k);
  for (std::size_t it = 0; it < max_iterations; ++it) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = (points.row(static_cast<Eigen::Index>(i)) - res.centroids.row(static_cast<Eigen::Index>(c))).squaredNorm();
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      changed = changed || res.labels[i] != best;
      res.labels[i] = best;
      inertia += bd;
    }
    res.inertia_history.push_back(inertia);
    res.iterations = it + 1;
    if (!changed) {
      res.converged = true;
      break;
    }
    Matrix sums = Matrix::Zero(res.centroids.rows(), res.centroids.cols());
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(res.labels[i])) += points.row(static_cast<Eigen::Index>(i));
      ++sizes[res.labels[i]];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (sizes[c] > 0) res.centroids.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(sizes[c]);
  }
  return res;
}

inline std::vector<std::size_t> cluster_tags(const Matrix& projections, std::size_t k, std::uint64_t seed) {
  return kmeans(projections, k, seed).labels;
}

/// Report behind word clouds and PCA scatter plots. k is reduced to the tag
/// count when there are fewer tags than clusters.
inline nlohmann::json analyze_tags(std::span<const PairRecord> records, std::size_t k, std::uint64_t seed) {
  nlohmann::json out;
  const auto freq = tag_frequency(records);
  out["frequency"] = freq;
  const TagMatrix tm = build_tag_matrix(records);
  out["n_records"] = records.size();
  out["tags"] = nlohmann::json::array();
  if (tm.tags.size() < 2 || records.size() < 2) {
    out["explained_variance_ratio"] = nlohmann::json::array();
    return out;
  }
  const PcaResult pca = pca_2d(tm);
  const auto labels = cluster_tags(pca.projections, std::min(k, tm.tags.size()), seed);
  for (std::size_t i = 0; i < tm.tags.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out["tags"].push_back({{"tag", tm.tags[i]},
                           {"count", freq.at(tm.tags[i])},
                           {"x", pca.projections(r, 0)},
                           {"y", pca.projections(r, 1)},
                           {"cluster", labels[i]}});
  }
  out["explained_variance_ratio"] = pca.explained_variance_ratio;
  return out;
}

}  // namespace crossret
