#pragma once

// Corpus records, the JSON-lines manifest format, dataset splits, batching and
// the synthetic two-domain generator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "crossret/autodiff.hpp"
#include "crossret/errors.hpp"
#include "crossret/rng.hpp"

namespace crossret {

/// Reserved token ids. Caption content tokens start at kFirstContentToken.
inline constexpr int kSosToken = 0;
inline constexpr int kEosToken = 1;
inline constexpr int kFirstContentToken = 2;

/// H x W x 3 grid, row-major with channel fastest, values in [0, 1].
struct PixelGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  double at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * 3 + c]; }
  double& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * 3 + c]; }
  bool operator==(const PixelGrid&) const = default;
};

using ImageData = std::variant<Vector, PixelGrid>;

struct SegmentInput {
  double area = 0.0;
  Vector feature;
};

struct PairRecord {
  std::string id;
  std::string domain;
  ImageData image;
  std::vector<int> caption_tokens;
  std::vector<std::string> geo_tags;
  std::vector<SegmentInput> segments;

  bool has_pixels() const { return std::holds_alternative<PixelGrid>(image); }
};

// ---------------------------------------------------------------------------
// Manifest (JSON lines)

namespace detail {

inline const std::set<std::string>& manifest_keys() {
  static const std::set<std::string> keys = {"id",           "domain",   "image_features", "image_pixels",
                                             "caption_tokens", "geo_tags", "segments"};
  return keys;
}

inline Vector parse_real_array(const nlohmann::json& j, std::size_t line, const std::string& field) {
  if (!j.is_array()) throw MalformedRecord(line, field, "expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw MalformedRecord(line, field, "non-numeric entry at index " + std::to_string(i));
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    if (!std::isfinite(v(static_cast<Eigen::Index>(i)))) throw MalformedRecord(line, field, "non-finite entry");
  }
  return v;
}

inline PixelGrid parse_pixels(const nlohmann::json& j, std::size_t line) {
  const std::string field = "image_pixels";
  if (!j.is_array() || j.empty()) throw MalformedRecord(line, field, "expected a non-empty H x W x 3 array");
  PixelGrid grid;
  grid.height = j.size();
  for (std::size_t y = 0; y < j.size(); ++y) {
    const auto& r = j[y];
    if (!r.is_array() || r.empty()) throw MalformedRecord(line, field, "row " + std::to_string(y) + " is not an array");
    if (y == 0) grid.width = r.size();
    if (r.size() != grid.width) throw MalformedRecord(line, field, "ragged rows");
    for (const auto& px : r) {
      if (!px.is_array() || px.size() != 3) throw MalformedRecord(line, field, "pixels must have 3 channels");
      for (const auto& c : px) {
        if (!c.is_number()) throw MalformedRecord(line, field, "non-numeric channel");
        const double v = c.get<double>();
        if (!(v >= 0.0 && v <= 1.0)) throw MalformedRecord(line, field, "channel value outside [0,1]");
        grid.data.push_back(v);
      }
    }
  }
  return grid;
}

}  // namespace detail

/// Parses one manifest line. `line` is 1-based and only used for error reports.
inline PairRecord record_from_json(const nlohmann::json& j, std::size_t line) {
  if (!j.is_object()) throw MalformedRecord(line, "<record>", "expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!detail::manifest_keys().contains(key)) throw MalformedRecord(line, key, "unknown key");
  }
  PairRecord rec;
  if (!j.contains("id") || !j["id"].is_string()) throw MalformedRecord(line, "id", "missing or not a string");
  rec.id = j["id"].get<std::string>();
  if (!j.contains("domain") || !j["domain"].is_string())
    throw MalformedRecord(line, "domain", "missing or not a string");
  rec.domain = j["domain"].get<std::string>();

  const bool has_feat = j.contains("image_features");
  const bool has_pix = j.contains("image_pixels");
  if (has_feat && has_pix) throw MixedImageRepresentation(line);
  if (!has_feat && !has_pix) throw MalformedRecord(line, "image_features", "record has no image representation");
  if (has_feat) {
    rec.image = detail::parse_real_array(j["image_features"], line, "image_features");
    if (std::get<Vector>(rec.image).size() == 0) throw MalformedRecord(line, "image_features", "empty feature vector");
  } else {
    rec.image = detail::parse_pixels(j["image_pixels"], line);
  }

  if (!j.contains("caption_tokens") || !j["caption_tokens"].is_array())
    throw MalformedRecord(line, "caption_tokens", "missing or not an array");
  for (const auto& t : j["caption_tokens"]) {
    if (!t.is_number_integer()) throw MalformedRecord(line, "caption_tokens", "non-integer token");
    const auto v = t.get<long long>();
    if (v < kFirstContentToken || v > INT32_MAX)
      throw MalformedRecord(line, "caption_tokens", "token id " + std::to_string(v) + " is reserved or out of range");
    rec.caption_tokens.push_back(static_cast<int>(v));
  }
  if (rec.caption_tokens.empty()) throw MalformedRecord(line, "caption_tokens", "caption is empty");

  if (j.contains("geo_tags")) {
    if (!j["geo_tags"].is_array()) throw MalformedRecord(line, "geo_tags", "not an array");
    for (const auto& t : j["geo_tags"]) {
      if (!t.is_string()) throw MalformedRecord(line, "geo_tags", "non-string tag");
      rec.geo_tags.push_back(t.get<std::string>());
    }
  }
  if (j.contains("segments")) {
    if (!j["segments"].is_array()) throw MalformedRecord(line, "segments", "not an array");
    for (const auto& s : j["segments"]) {
      if (!s.is_object()) throw MalformedRecord(line, "segments", "segment is not an object");
      for (const auto& [key, _] : s.items()) {
        if (key != "area" && key != "feature") throw MalformedRecord(line, "segments." + key, "unknown key");
      }
      if (!s.contains("area") || !s["area"].is_number()) throw MalformedRecord(line, "segments.area", "missing");
      SegmentInput seg;
      seg.area = s["area"].get<double>();
      if (!(seg.area >= 0.0 && seg.area <= 1.0)) throw MalformedRecord(line, "segments.area", "area outside [0,1]");
      if (!s.contains("feature")) throw MalformedRecord(line, "segments.feature", "missing");
      seg.feature = detail::parse_real_array(s["feature"], line, "segments.feature");
      rec.segments.push_back(std::move(seg));
    }
  }
  return rec;
}

inline nlohmann::json record_to_json(const PairRecord& rec) {
  nlohmann::json j;
  j["id"] = rec.id;
  j["domain"] = rec.domain;
  if (const auto* f = std::get_if<Vector>(&rec.image)) {
    j["image_features"] = std::vector<double>(f->data(), f->data() + f->size());
  } else {
    const auto& g = std::get<PixelGrid>(rec.image);
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t y = 0; y < g.height; ++y) {
      nlohmann::json r = nlohmann::json::array();
      for (std::size_t x = 0; x < g.width; ++x) r.push_back({g.at(y, x, 0), g.at(y, x, 1), g.at(y, x, 2)});
      rows.push_back(std::move(r));
    }
    j["image_pixels"] = std::move(rows);
  }
  j["caption_tokens"] = rec.caption_tokens;
  j["geo_tags"] = rec.geo_tags;
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : rec.segments) {
    segs.push_back({{"area", s.area}, {"feature", std::vector<double>(s.feature.data(), s.feature.data() + s.feature.size())}});
  }
  j["segments"] = std::move(segs);
  return j;
}

/// Reads a manifest stream. Blank lines are skipped; record-level invariants
/// (unique ids, uniform segment dimension) are checked across the whole file.
inline std::vector<PairRecord> parse_manifest(std::istream& in) {
  std::vector<PairRecord> out;
  std::unordered_set<std::string> ids;
  std::string text;
  std::size_t line = 0;
  Eigen::Index seg_dim = -1;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw MalformedRecord(line, "<json>", e.what());
    }
    PairRecord rec = record_from_json(j, line);
    if (!ids.insert(rec.id).second) throw DuplicateId(rec.id);
    for (const auto& s : rec.segments) {
      if (seg_dim < 0) seg_dim = s.feature.size();
      if (s.feature.size() != seg_dim) throw MalformedRecord(line, "segments.feature", "segment dimension differs from manifest");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<PairRecord> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest '" + path + "'");
  return parse_manifest(in);
}

inline void write_manifest(std::ostream& out, const std::vector<PairRecord>& records) {
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

inline void save_manifest(const std::string& path, const std::vector<PairRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write manifest '" + path + "'");
  write_manifest(out, records);
}

// ---------------------------------------------------------------------------
// Splits and batching

struct SplitSpec {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(train > 0 && val > 0 && test > 0)) throw ConfigError("split", "ratios must be positive");
    if (std::abs(train + val + test - 1.0) > 1e-9) throw ConfigError("split", "ratios must sum to 1");
  }
};

template <typename T>
struct Split {
  std::vector<T> train;
  std::vector<T> val;
  std::vector<T> test;
};

/// Sizes for an N-record split: val and test are rounded, train takes the remainder.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitSpec& spec) {
  const auto nd = static_cast<double>(n);
  std::size_t val = static_cast<std::size_t>(std::llround(nd * spec.val));
  std::size_t test = static_cast<std::size_t>(std::llround(nd * spec.test));
  val = std::min(val, n);
  test = std::min(test, n - val);
  return {n - val - test, val, test};
}

/// Shuffles deterministically, then slices train | val | test.
template <typename T>
Split<T> split_dataset(std::vector<T> records, const SplitSpec& spec) {
  spec.validate();
  if (records.empty()) throw EmptyCorpus();
  Rng rng(stream_seed(spec.seed, "split"));
  deterministic_shuffle(records, rng);
  const auto [ntrain, nval, ntest] = split_sizes(records.size(), spec);
  Split<T> out;
  auto it = std::make_move_iterator(records.begin());
  out.train.assign(it, it + static_cast<std::ptrdiff_t>(ntrain));
  out.val.assign(it + static_cast<std::ptrdiff_t>(ntrain), it + static_cast<std::ptrdiff_t>(ntrain + nval));
  out.test.assign(it + static_cast<std::ptrdiff_t>(ntrain + nval), std::make_move_iterator(records.end()));
  return out;
}

enum class BatchMode { kTraining, kEvaluation };

/// Shuffled index batches over `count` records. Training drops a final short batch.
inline std::vector<std::vector<std::size_t>> build_batches(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                                           BatchMode mode) {
  if (batch_size == 0) throw ConfigError("batch_size", "must be >= 1");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(stream_seed(seed, "batching"));
  deterministic_shuffle(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const std::size_t end = std::min(count, start + batch_size);
    if (end - start < batch_size && mode == BatchMode::kTraining) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Synthetic two-domain corpus

struct SyntheticCorpusConfig {
  std::size_t n_pairs = 512;
  std::size_t feature_dim = 32;
  std::size_t n_concepts = 8;
  std::size_t attribute_slots = 4;
  std::size_t attribute_values = 4;
  double domain_shift_strength = 1.0;
  double noise = 0.15;
  std::size_t segments_min = 1;
  std::size_t segments_max = 3;
  std::size_t distractors_max = 2;
  std::size_t tag_vocab = 40;
  std::uint64_t seed = 0;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("data.") + name, "must be positive");
    };
    positive(n_pairs, "n_pairs");
    positive(feature_dim, "feature_dim");
    positive(n_concepts, "n_concepts");
    positive(attribute_slots, "attribute_slots");
    positive(attribute_values, "attribute_values");
    positive(segments_max, "segments_max");
    positive(tag_vocab, "tag_vocab");
    if (segments_min > segments_max) throw ConfigError("data.segments_min", "exceeds segments_max");
    if (!(domain_shift_strength >= 0.0)) throw ConfigError("data.domain_shift_strength", "must be >= 0");
    if (!(noise >= 0.0)) throw ConfigError("data.noise", "must be >= 0");
  }

  /// Token ids used by the caption templates.
  std::size_t vocab_size() const { return kFirstContentToken + 3 + n_concepts + attribute_slots * attribute_values; }
};

struct SyntheticCorpus {
  std::vector<PairRecord> domain_a;
  std::vector<PairRecord> domain_b;
  Matrix prototypes_a;  ///< n_concepts x feature_dim
  Matrix prototypes_b;
  Vector shift_direction;
  std::vector<double> concept_prior_a;
  std::vector<double> concept_prior_b;
};

namespace detail {

inline std::string synthetic_tag(std::size_t k) {
  static const std::array<const char*, 10> keys = {"building", "natural",  "waterway", "landuse", "highway",
                                                   "leisure",  "amenity", "power",    "piste:type", "winter_service"};
  static const std::array<const char*, 8> values = {"yes", "water", "residential", "park", "school", "river", "solar", "track"};
  return std::string(keys[k % keys.size()]) + ": " + values[(k / keys.size()) % values.size()] +
         (k >= keys.size() * values.size() ? "_" + std::to_string(k / (keys.size() * values.size())) : "");
}

inline Vector gaussian_vector(std::size_t dim, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Vector v(static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = n01(rng);
  return v;
}

}  // namespace detail

/// Draws two domains from shared latent concepts. Domain B's prototypes are offset
/// by `domain_shift_strength` along a fixed random direction orthogonal to the
/// semantic subspace, and its concept prior is tilted by the same strength.
/// Distractor segments have small areas and features orthogonal to every
/// prototype, so area filtering rejects them.
inline SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusConfig& cfg) {
  cfg.validate();
  const auto dim = static_cast<Eigen::Index>(cfg.feature_dim);
  Rng latent = make_rng(cfg.seed, "data.latent");

  SyntheticCorpus out;
  out.prototypes_a.resize(static_cast<Eigen::Index>(cfg.n_concepts), dim);
  for (Eigen::Index c = 0; c < out.prototypes_a.rows(); ++c) {
    out.prototypes_a.row(c) = detail::gaussian_vector(cfg.feature_dim, latent).normalized().transpose();
  }
  const std::size_t n_attr = cfg.attribute_slots * cfg.attribute_values;
  Matrix attributes(static_cast<Eigen::Index>(n_attr), dim);
  for (Eigen::Index a = 0; a < attributes.rows(); ++a) {
    attributes.row(a) = 0.6 * detail::gaussian_vector(cfg.feature_dim, latent).normalized().transpose();
  }

  // Orthonormal basis of the semantic span; its complement hosts the shift and distractors.
  Matrix span(dim, out.prototypes_a.rows() + attributes.rows());
  span << out.prototypes_a.transpose(), attributes.transpose();
  Eigen::HouseholderQR<Matrix> qr(span);
  const Eigen::Index rank = std::min<Eigen::Index>(span.cols(), dim);
  Matrix q = qr.householderQ() * Matrix::Identity(dim, dim);
  auto project_out_span = [&](Vector v) {
    for (Eigen::Index k = 0; k < rank; ++k) v -= q.col(k).dot(v) * q.col(k);
    return v;
  };
  out.shift_direction = project_out_span(detail::gaussian_vector(cfg.feature_dim, latent));
  if (out.shift_direction.norm() > 1e-9) {
    out.shift_direction.normalize();
  } else {
    out.shift_direction = detail::gaussian_vector(cfg.feature_dim, latent).normalized();
  }
  out.prototypes_b = out.prototypes_a.rowwise() + cfg.domain_shift_strength * out.shift_direction.transpose();

  std::vector<double> tilt(cfg.n_concepts);
  {
    std::normal_distribution<double> n01(0.0, 1.0);
    for (auto& t : tilt) t = n01(latent);
  }
  out.concept_prior_a.assign(cfg.n_concepts, 1.0 / static_cast<double>(cfg.n_concepts));
  out.concept_prior_b.resize(cfg.n_concepts);
  double z = 0.0;
  for (std::size_t c = 0; c < cfg.n_concepts; ++c) z += out.concept_prior_b[c] = std::exp(cfg.domain_shift_strength * tilt[c]);
  for (auto& p : out.concept_prior_b) p /= z;

  // Characteristic tags per concept.
  std::vector<std::array<std::size_t, 2>> concept_tags(cfg.n_concepts);
  {
    std::uniform_int_distribution<std::size_t> pick(0, cfg.tag_vocab - 1);
    for (auto& ct : concept_tags) ct = {pick(latent), pick(latent)};
  }

  auto draw_domain = [&](const Matrix& prototypes, const std::vector<double>& prior, const std::string& prefix,
                         const std::string& domain, Vector shift) {
    Rng rng = make_rng(cfg.seed, "data.domain." + prefix);
    std::discrete_distribution<std::size_t> concept_dist(prior.begin(), prior.end());
    std::uniform_int_distribution<std::size_t> value_dist(0, cfg.attribute_values - 1);
    std::uniform_int_distribution<std::size_t> nseg_dist(cfg.segments_min, cfg.segments_max);
    std::uniform_int_distribution<std::size_t> ndis_dist(0, cfg.distractors_max);
    std::uniform_int_distribution<std::size_t> slot_dist(0, cfg.attribute_slots - 1);
    std::uniform_int_distribution<std::size_t> tag_dist(0, cfg.tag_vocab - 1);
    std::uniform_real_distribution<double> big_area(0.25, 0.6);
    std::uniform_real_distribution<double> small_area(0.01, 0.15);
    std::uniform_int_distribution<int> extra_tags(0, 2);

    const int filler_a = kFirstContentToken, filler_with = kFirstContentToken + 1, filler_and = kFirstContentToken + 2;
    const int concept_base = kFirstContentToken + 3;
    const int attr_base = concept_base + static_cast<int>(cfg.n_concepts);

    std::vector<PairRecord> records;
    records.reserve(cfg.n_pairs);
    for (std::size_t i = 0; i < cfg.n_pairs; ++i) {
      const std::size_t c = concept_dist(rng);
      std::vector<std::size_t> values(cfg.attribute_slots);
      for (auto& v : values) v = value_dist(rng);

      Vector feature = prototypes.row(static_cast<Eigen::Index>(c)).transpose();
      for (std::size_t s = 0; s < cfg.attribute_slots; ++s) {
        feature += attributes.row(static_cast<Eigen::Index>(s * cfg.attribute_values + values[s])).transpose();
      }
      feature += cfg.noise * detail::gaussian_vector(cfg.feature_dim, rng);

      PairRecord rec;
      char idbuf[32];
      std::snprintf(idbuf, sizeof idbuf, "%s-%06zu", prefix.c_str(), i);
      rec.id = idbuf;
      rec.domain = domain;
      rec.image = feature;

      // Template: "a <concept> with <attr_1> and ... <attr_k>"
      rec.caption_tokens = {filler_a, concept_base + static_cast<int>(c), filler_with};
      for (std::size_t s = 0; s < cfg.attribute_slots; ++s) {
        if (s > 0) rec.caption_tokens.push_back(filler_and);
        rec.caption_tokens.push_back(attr_base + static_cast<int>(s * cfg.attribute_values + values[s]));
      }

      rec.geo_tags.push_back(detail::synthetic_tag(concept_tags[c][0]));
      rec.geo_tags.push_back(detail::synthetic_tag(concept_tags[c][1]));
      for (int e = extra_tags(rng); e > 0; --e) rec.geo_tags.push_back(detail::synthetic_tag(tag_dist(rng)));

      const std::size_t nseg = nseg_dist(rng);
      for (std::size_t k = 0; k < nseg; ++k) {
        const std::size_t s = slot_dist(rng);
        Vector f = prototypes.row(static_cast<Eigen::Index>(c)).transpose() +
                   attributes.row(static_cast<Eigen::Index>(s * cfg.attribute_values + values[s])).transpose() +
                   cfg.noise * detail::gaussian_vector(cfg.feature_dim, rng);
        rec.segments.push_back({big_area(rng), std::move(f)});
      }
      const std::size_t ndis = ndis_dist(rng);
      for (std::size_t k = 0; k < ndis; ++k) {
        Vector f = project_out_span(detail::gaussian_vector(cfg.feature_dim, rng));
        f -= f.dot(shift) * shift;
        if (f.norm() > 1e-12) f.normalize();
        rec.segments.push_back({small_area(rng), std::move(f)});
      }
      records.push_back(std::move(rec));
    }
    return records;
  };

  out.domain_a = draw_domain(out.prototypes_a, out.concept_prior_a, "A", "source-A", out.shift_direction);
  out.domain_b = draw_domain(out.prototypes_b, out.concept_prior_b, "B", "target-B", out.shift_direction);
  return out;
}

}  // namespace crossret
