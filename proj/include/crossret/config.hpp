#pragma once

// Run configuration: every module's settings in one JSON document. Values not
// present in a file keep their defaults; unknown keys are rejected. The data
// and initialization seeds are not configured directly, they derive from the
// global seed through named sub-streams.

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "crossret/acss.hpp"
#include "crossret/adversary.hpp"
#include "crossret/data_corpus.hpp"
#include "crossret/encoders.hpp"
#include "crossret/errors.hpp"
#include "crossret/pretrain.hpp"
#include "crossret/rng.hpp"
#include "crossret/segment_filter.hpp"

namespace crossret {

struct PathConfig {
  std::string source_manifest;  ///< empty: <out>/manifest_source.jsonl
  std::string target_manifest;  ///< empty: <out>/manifest_target.jsonl
  std::string pretrained_checkpoint;
  std::string eval_checkpoint;
  std::string eval_manifest;
  std::string tags_manifest;
  bool operator==(const PathConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  SyntheticCorpusConfig data;
  EncoderConfig encoder;
  FilterConfig filter;
  ContrastiveConfig pretrain;
  AdaptConfig adapt;
  Toggles toggles;
  std::array<double, 3> pretrain_split{0.7, 0.1, 0.2};
  std::array<double, 3> finetune_split{0.2, 0.1, 0.7};
  std::size_t kmeans_k = 5;
  PathConfig paths;

  SyntheticCorpusConfig data_config() const {
    SyntheticCorpusConfig c = data;
    c.seed = stream_seed(seed, "data");
    return c;
  }
  EncoderConfig encoder_config() const {
    EncoderConfig c = encoder;
    c.seed = stream_seed(seed, "init");
    return c;
  }
  SplitSpec split_spec(const std::array<double, 3>& r, std::string_view stream) const {
    return {r[0], r[1], r[2], stream_seed(seed, stream)};
  }
  std::uint64_t batching_seed() const { return stream_seed(seed, "batching"); }
  std::uint64_t adapt_seed() const { return stream_seed(seed, "adapt"); }
  std::uint64_t kmeans_seed() const { return stream_seed(seed, "kmeans"); }

  std::string path_or(const std::string& configured, const std::string& file) const {
    return configured.empty() ? out + "/" + file : configured;
  }
};

/// The defaults that mirror published hyperparameters, as one table.
inline nlohmann::json canonical_defaults() {
  const RunConfig d;
  return {{"T_a", d.filter.area_threshold},
          {"T_s", d.filter.score_threshold},
          {"num_seg", d.filter.max_segments},
          {"beta", d.adapt.beta},
          {"n_t", d.adapt.target_batch},
          {"n_s", d.adapt.source_batch},
          {"pretrain_epochs", d.pretrain.epochs},
          {"finetune_epochs", d.adapt.epochs},
          {"finetune_lr", d.adapt.finetune_lr}};
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json enc = to_json(c.encoder);
  enc.erase("seed");
  return {
      {"seed", c.seed},
      {"out", c.out},
      {"data",
       {{"n_pairs", c.data.n_pairs},
        {"feature_dim", c.data.feature_dim},
        {"n_concepts", c.data.n_concepts},
        {"attribute_slots", c.data.attribute_slots},
        {"attribute_values", c.data.attribute_values},
        {"domain_shift_strength", c.data.domain_shift_strength},
        {"noise", c.data.noise},
        {"segments_min", c.data.segments_min},
        {"segments_max", c.data.segments_max},
        {"distractors_max", c.data.distractors_max},
        {"tag_vocab", c.data.tag_vocab}}},
      {"encoder", enc},
      {"filter",
       {{"area_threshold", c.filter.area_threshold},
        {"score_threshold", c.filter.score_threshold},
        {"max_segments", c.filter.max_segments}}},
      {"pretrain",
       {{"lr", c.pretrain.learning_rate},
        {"epochs", c.pretrain.epochs},
        {"batch_size", c.pretrain.batch_size},
        {"temperature", c.pretrain.temperature},
        {"lr_decay_factor", c.pretrain.lr_decay_factor},
        {"lr_decay_every", c.pretrain.lr_decay_every},
        {"weight_decay", c.pretrain.weight_decay}}},
      {"adapt",
       {{"lr", c.adapt.finetune_lr},
        {"disc_lr", c.adapt.disc_lr},
        {"beta", c.adapt.beta},
        {"epochs", c.adapt.epochs},
        {"target_batch", c.adapt.target_batch},
        {"source_batch", c.adapt.source_batch},
        {"enforce_source_ratio", c.adapt.enforce_source_ratio},
        {"adv_weight_target", c.adapt.adv_weight_target},
        {"margin", c.adapt.triplet.margin},
        {"mining", c.adapt.triplet.mining == NegativeMining::kHardest ? "hardest" : "random"},
        {"mode", c.adapt.curriculum_mode == CurriculumMode::kWindow ? "window" : "cumulative"},
        {"increment", c.adapt.curriculum_increment},
        {"ss", c.toggles.ss},
        {"cl", c.toggles.cl},
        {"at", c.toggles.at}}},
      {"split", {{"pretrain", c.pretrain_split}, {"finetune", c.finetune_split}}},
      {"analysis", {{"k", c.kmeans_k}}},
      {"paths",
       {{"source_manifest", c.paths.source_manifest},
        {"target_manifest", c.paths.target_manifest},
        {"pretrained_checkpoint", c.paths.pretrained_checkpoint},
        {"eval_checkpoint", c.paths.eval_checkpoint},
        {"eval_manifest", c.paths.eval_manifest},
        {"tags_manifest", c.paths.tags_manifest}}},
  };
}

namespace detail {

template <typename T>
T config_get(const nlohmann::json& v, const std::string& field) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(field, e.what());
  }
}

inline std::array<double, 3> split_from_json(const nlohmann::json& v, const std::string& field) {
  if (!v.is_array() || v.size() != 3) throw ConfigError(field, "expected [train, val, test]");
  return {config_get<double>(v[0], field), config_get<double>(v[1], field), config_get<double>(v[2], field)};
}

inline CurriculumMode parse_mode(const std::string& s, const std::string& field) {
  if (s == "window") return CurriculumMode::kWindow;
  if (s == "cumulative") return CurriculumMode::kCumulative;
  throw ConfigError(field, "expected 'window' or 'cumulative'");
}

}  // namespace detail

/// Overlays the keys present in `j` onto `c`.
inline void apply_json(RunConfig& c, const nlohmann::json& j) {
  using detail::config_get;
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  auto section = [&](const char* name, auto&& handle) {
    if (!j.contains(name)) return;
    const auto& s = j.at(name);
    if (!s.is_object()) throw ConfigError(name, "expected an object");
    for (const auto& [key, v] : s.items()) {
      const std::string field = std::string(name) + "." + key;
      if (!handle(key, v, field)) throw ConfigError(field, "unknown key");
    }
  };
  for (const auto& [key, v] : j.items()) {
    static const std::set<std::string> top = {"seed",   "out",   "data",     "encoder", "filter",
                                              "pretrain", "adapt", "split", "analysis", "paths"};
    if (!top.contains(key)) throw ConfigError(key, "unknown key");
  }
  if (j.contains("seed")) c.seed = config_get<std::uint64_t>(j["seed"], "seed");
  if (j.contains("out")) c.out = config_get<std::string>(j["out"], "out");

  section("data", [&](const std::string& k, const nlohmann::json& v, const std::string& f) {
    auto& d = c.data;
    if (k == "n_pairs") d.n_pairs = config_get<std::size_t>(v, f);
    else if (k == "feature_dim") d.feature_dim = config_get<std::size_t>(v, f);
    else if (k == "n_concepts") d.n_concepts = config_get<std::size_t>(v, f);
    else if (k == "attribute_slots") d.attribute_slots = config_get<std::size_t>(v, f);
    else if (k == "attribute_values") d.attribute_values = config_get<std::size_t>(v, f);
    else if (k == "domain_shift_strength") d.domain_shift_strength = config_get<double>(v, f);
    else if (k == "noise") d.noise = config_get<double>(v, f);
    else if (k == "segments_min") d.segments_min = config_get<std::size_t>(v, f);
    else if (k == "segments_max") d.segments_max = config_get<std::size_t>(v, f);
    else if (k == "distractors_max") d.distractors_max = config_get<std::size_t>(v, f);
    else if (k == "tag_vocab") d.tag_vocab = config_get<std::size_t>(v, f);
    else return false;
    return true;
  });
  if (j.contains("encoder")) {
    if (j["encoder"].contains("seed")) throw ConfigError("encoder.seed", "derived from the global seed");
    nlohmann::json merged = to_json(c.encoder);
    merged.update(j["encoder"]);
    c.encoder = encoder_config_from_json(merged);
  }
  section("filter", [&](const std::string& k, const nlohmann::json& v, const std::string& f) {
    if (k == "area_threshold") c.filter.area_threshold = config_get<double>(v, f);
    else if (k == "score_threshold") c.filter.score_threshold = config_get<double>(v, f);
    else if (k == "max_segments") c.filter.max_segments = config_get<std::size_t>(v, f);
    else return false;
    return true;
  });
  section("pretrain", [&](const std::string& k, const nlohmann::json& v, const std::string& f) {
    auto& p = c.pretrain;
    if (k == "lr") p.learning_rate = config_get<double>(v, f);
    else if (k == "epochs") p.epochs = config_get<std::size_t>(v, f);
    else if (k == "batch_size") p.batch_size = config_get<std::size_t>(v, f);
    else if (k == "temperature") p.temperature = config_get<double>(v, f);
    else if (k == "lr_decay_factor") p.lr_decay_factor = config_get<double>(v, f);
    else if (k == "lr_decay_every") p.lr_decay_every = config_get<std::size_t>(v, f);
    else if (k == "weight_decay") p.weight_decay = config_get<double>(v, f);
    else return false;
    return true;
  });
  section("adapt", [&](const std::string& k, const nlohmann::json& v, const std::string& f) {
    auto& a = c.adapt;
    if (k == "lr") a.finetune_lr = config_get<double>(v, f);
    else if (k == "disc_lr") a.disc_lr = config_get<double>(v, f);
    else if (k == "beta") a.beta = config_get<double>(v, f);
    else if (k == "epochs") a.epochs = config_get<std::size_t>(v, f);
    else if (k == "target_batch") a.target_batch = config_get<std::size_t>(v, f);
    else if (k == "source_batch") a.source_batch = config_get<std::size_t>(v, f);
    else if (k == "enforce_source_ratio") a.enforce_source_ratio = config_get<bool>(v, f);
    else if (k == "adv_weight_target") a.adv_weight_target = config_get<bool>(v, f);
    else if (k == "margin") a.triplet.margin = config_get<double>(v, f);
    else if (k == "mining") {
      const auto s = config_get<std::string>(v, f);
      if (s == "hardest") a.triplet.mining = NegativeMining::kHardest;
      else if (s == "random") a.triplet.mining = NegativeMining::kRandom;
      else throw ConfigError(f, "expected 'hardest' or 'random'");
    } else if (k == "mode") a.curriculum_mode = detail::parse_mode(config_get<std::string>(v, f), f);
    else if (k == "increment") a.curriculum_increment = config_get<double>(v, f);
    else if (k == "ss") c.toggles.ss = config_get<bool>(v, f);
    else if (k == "cl") c.toggles.cl = config_get<bool>(v, f);
    else if (k == "at") c.toggles.at = config_get<bool>(v, f);
    else return false;
    return true;
  });
  section("split", [&](const std::string& k, const nlohmann::json& v, const std::string& f) {
    if (k == "pretrain") c.pretrain_split = detail::split_from_json(v, f);
    else if (k == "finetune") c.finetune_split = detail::split_from_json(v, f);
    else return false;
    return true;
  });
  section("analysis", [&](const std::string& k, const nlohmann::json& v, const std::string& f) {
    if (k != "k") return false;
    c.kmeans_k = config_get<std::size_t>(v, f);
    return true;
  });
  section("paths", [&](const std::string& k, const nlohmann::json& v, const std::string& f) {
    auto& p = c.paths;
    if (k == "source_manifest") p.source_manifest = config_get<std::string>(v, f);
    else if (k == "target_manifest") p.target_manifest = config_get<std::string>(v, f);
    else if (k == "pretrained_checkpoint") p.pretrained_checkpoint = config_get<std::string>(v, f);
    else if (k == "eval_checkpoint") p.eval_checkpoint = config_get<std::string>(v, f);
    else if (k == "eval_manifest") p.eval_manifest = config_get<std::string>(v, f);
    else if (k == "tags_manifest") p.tags_manifest = config_get<std::string>(v, f);
    else return false;
    return true;
  });
}

/// Applies a dotted override such as "pretrain.lr=0.003". The value is parsed
/// as JSON, falling back to a plain string.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json patch;
  const auto dot = key.find('.');
  if (dot == std::string::npos) {
    patch[key] = value;
  } else {
    patch[key.substr(0, dot)][key.substr(dot + 1)] = value;
  }
  apply_json(c, patch);
}

inline void validate(const RunConfig& c) {
  c.data.validate();
  c.encoder_config().validate();
  c.filter.validate();
  c.pretrain.validate();
  c.adapt.validate();
  c.split_spec(c.pretrain_split, "split").validate();
  c.split_spec(c.finetune_split, "split").validate();
  if (c.kmeans_k == 0) throw ConfigError("analysis.k", "must be >= 1");
  if (c.toggles.cl && c.toggles.ss)
    CurriculumState{1, c.adapt.epochs, c.adapt.curriculum_increment, c.adapt.curriculum_mode}.validate();
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("--config", e.what());
  }
  RunConfig c;
  apply_json(c, j);
  return c;
}

}  // namespace crossret
