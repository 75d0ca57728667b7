#pragma once

// Command-line entry point. Every command resolves a RunConfig (defaults, then
// the --config file, then --set overrides, then named flags), writes
// config_snapshot.json into the output directory and runs one pipeline stage.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "crossret/acss.hpp"
#include "crossret/adversary.hpp"
#include "crossret/checkpoint.hpp"
#include "crossret/config.hpp"
#include "crossret/data_corpus.hpp"
#include "crossret/errors.hpp"
#include "crossret/eval.hpp"
#include "crossret/geotag_analysis.hpp"
#include "crossret/pretrain.hpp"

namespace crossret::cli {

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c = {"gen-data", "pretrain", "adapt", "eval", "ablate", "analyze-tags"};
  return c;
}

/// Flag values as parsed; unset optionals leave the config untouched.
struct FlagOverrides {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool no_ss = false;
  bool no_cl = false;
  bool no_at = false;
  std::optional<std::string> mode;
  std::optional<std::string> checkpoint;
  std::optional<std::string> manifest;
  std::vector<std::string> sets;
};

inline RunConfig resolve_config(const std::string& command, const FlagOverrides& f) {
  RunConfig c = f.config_path ? load_config(*f.config_path) : RunConfig{};
  for (const auto& s : f.sets) apply_override(c, s);
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out = *f.out;
  if (f.no_ss) c.toggles.ss = false;
  if (f.no_cl) c.toggles.cl = false;
  if (f.no_at) c.toggles.at = false;
  if (f.mode) c.adapt.curriculum_mode = detail::parse_mode(*f.mode, "--mode");
  if (f.checkpoint) {
    if (command == "eval") c.paths.eval_checkpoint = *f.checkpoint;
    else c.paths.pretrained_checkpoint = *f.checkpoint;
  }
  if (f.manifest) {
    if (command == "analyze-tags") c.paths.tags_manifest = *f.manifest;
    else c.paths.eval_manifest = *f.manifest;
  }
  validate(c);
  return c;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("out", "cannot write '" + path.string() + "'");
  out << text;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

template <typename Entries>
void write_jsonl(const std::filesystem::path& path, const Entries& entries) {
  std::string text;
  for (const auto& e : entries) {
    if constexpr (std::is_same_v<std::decay_t<decltype(e)>, nlohmann::json>) text += e.dump();
    else text += to_json(e).dump();
    text += '\n';
  }
  write_text(path, text);
}

inline std::vector<PairRecord> load_records(const std::string& path, const char* field) {
  if (!std::filesystem::exists(path)) throw ConfigError(field, "manifest not found: '" + path + "'");
  return load_manifest(path);
}

inline Model load_model(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("checkpoint", "checkpoint not found: '" + path + "'");
  return load_checkpoint(path);
}

/// Paths inside the output directory are reported relative to it.
inline std::string display_path(const RunConfig& c, const std::string& path) {
  const auto rel = std::filesystem::path(path).lexically_relative(c.out);
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return path;
}

inline void check_corpus(const EncoderConfig& enc, std::span<const PairRecord> records) {
  for (const auto& r : records) {
    if (const auto* v = std::get_if<Vector>(&r.image)) {
      if (enc.input_mode != ImageInputMode::kFeatures)
        throw ConfigError("encoder.input_mode", "corpus holds feature vectors");
      if (static_cast<std::size_t>(v->size()) != enc.feature_dim)
        throw ConfigError("encoder.feature_dim", "corpus feature dimension is " + std::to_string(v->size()));
    } else {
      const auto& g = std::get<PixelGrid>(r.image);
      if (enc.input_mode != ImageInputMode::kPixels) throw ConfigError("encoder.input_mode", "corpus holds pixel images");
      if (g.height != enc.image_height || g.width != enc.image_width)
        throw ConfigError("encoder.image_height", "corpus image size differs from the encoder config");
    }
    for (int t : r.caption_tokens)
      if (static_cast<std::size_t>(t) >= enc.vocab_size)
        throw ConfigError("encoder.vocab_size", "caption token " + std::to_string(t) + " is out of range");
    if (r.caption_tokens.size() + 2 > enc.max_seq_len)
      throw ConfigError("encoder.max_seq_len", "caption of length " + std::to_string(r.caption_tokens.size()) + " does not fit");
  }
}

struct AdaptData {
  Model pretrained;
  Split<PairRecord> source;
  Split<PairRecord> target;
};

inline AdaptData load_adapt_data(const RunConfig& c) {
  AdaptData d;
  d.pretrained = load_model(c.path_or(c.paths.pretrained_checkpoint, "checkpoint_pretrain.bin"));
  auto src = load_records(c.path_or(c.paths.source_manifest, "manifest_source.jsonl"), "paths.source_manifest");
  auto tgt = load_records(c.path_or(c.paths.target_manifest, "manifest_target.jsonl"), "paths.target_manifest");
  d.source = split_dataset(std::move(src), c.split_spec(c.pretrain_split, "split.pretrain"));
  d.target = split_dataset(std::move(tgt), c.split_spec(c.finetune_split, "split.finetune"));
  return d;
}

inline const char* toggle_name(const Toggles& t) {
  if (t.ss && t.cl && t.at) return "full";
  if (!t.ss && t.cl && t.at) return "w/o SS";
  if (t.ss && !t.cl && t.at) return "w/o CL";
  if (t.ss && t.cl && !t.at) return "w/o AT";
  return "custom";
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands

inline void gen_data(const RunConfig& c) {
  const auto corpus = generate_synthetic_corpus(c.data_config());
  save_manifest(c.out + "/manifest_source.jsonl", corpus.domain_a);
  save_manifest(c.out + "/manifest_target.jsonl", corpus.domain_b);
}

inline void pretrain_command(const RunConfig& c) {
  auto records = detail::load_records(c.path_or(c.paths.source_manifest, "manifest_source.jsonl"), "paths.source_manifest");
  const EncoderConfig enc = c.encoder_config();
  detail::check_corpus(enc, records);
  const auto split = split_dataset(std::move(records), c.split_spec(c.pretrain_split, "split.pretrain"));
  PretrainOptions options;
  options.divergence_dump_path = c.out + "/checkpoint_diverged.bin";
  const auto result = pretrain(Model::initialize(enc), split.train, split.val, c.pretrain, c.filter, c.batching_seed(), options);
  save_checkpoint(c.out + "/checkpoint_pretrain.bin", result.best);
  detail::write_jsonl(c.out + "/log_pretrain.jsonl", result.log);
  nlohmann::json report = {{"best_epoch", result.best_epoch},
                           {"val_mean_recall", result.val_mean_recall},
                           {"checkpoint_id", checkpoint_id(result.best)},
                           {"n_train", split.train.size()},
                           {"n_val", split.val.size()},
                           {"n_test", split.test.size()}};
  if (!split.test.empty()) report["test"] = to_json(evaluate(result.best, split.test));
  detail::write_json(c.out + "/report_pretrain.json", report);
}

inline void adapt_command(const RunConfig& c) {
  const auto d = detail::load_adapt_data(c);
  const auto result = finetune(d.pretrained, d.source.train, d.target.train, c.adapt, c.toggles, c.adapt_seed());
  save_checkpoint(c.out + "/checkpoint_adapt.bin", result.adapted);
  save_manifest(c.out + "/manifest_target_test.jsonl", d.target.test);
  detail::write_jsonl(c.out + "/log_adapt.jsonl", result.log);
  if (!result.sampler_debug.empty()) detail::write_jsonl(c.out + "/log_sampler.jsonl", result.sampler_debug);
  nlohmann::json report = to_json(transfer_eval(d.pretrained, result.adapted, d.target.test));
  report["configuration"] = detail::toggle_name(c.toggles);
  report["toggles"] = {{"ss", c.toggles.ss}, {"cl", c.toggles.cl}, {"at", c.toggles.at}};
  report["pretrained_checkpoint_id"] = checkpoint_id(d.pretrained);
  report["checkpoint_id"] = checkpoint_id(result.adapted);
  detail::write_json(c.out + "/report_transfer.json", report);
}

inline void eval_command(const RunConfig& c) {
  const std::string ckpt = c.path_or(c.paths.eval_checkpoint, "checkpoint_adapt.bin");
  const std::string manifest = c.path_or(c.paths.eval_manifest, "manifest_target_test.jsonl");
  const Model model = detail::load_model(ckpt);
  const auto records = detail::load_records(manifest, "paths.eval_manifest");
  nlohmann::json report = to_json(evaluate(model, records));
  report["checkpoint_id"] = checkpoint_id(model);
  report["manifest_path"] = detail::display_path(c, manifest);
  detail::write_json(c.out + "/report_eval.json", report);
}

/// Mean recall of the direct-transfer model and of the four adaptation
/// configurations on the target test split.
inline nlohmann::json ablation_table(const Model& pretrained, std::span<const PairRecord> source_train,
                                     std::span<const PairRecord> target_train, std::span<const PairRecord> target_test,
                                     const AdaptConfig& adapt, std::uint64_t seed) {
  const std::vector<Toggles> configs = {{true, true, true}, {false, true, true}, {true, false, true}, {true, true, false}};
  nlohmann::json rows = nlohmann::json::array();
  double full = 0.0;
  bool full_is_max = true;
  for (const auto& t : configs) {
    const auto result = finetune(pretrained, source_train, target_train, adapt, t, seed);
    const auto report = evaluate(result.adapted, target_test);
    if (t.ss && t.cl && t.at) full = report.mean_recall;
    else if (report.mean_recall > full) full_is_max = false;
    rows.push_back({{"configuration", detail::toggle_name(t)},
                    {"ss", t.ss},
                    {"cl", t.cl},
                    {"at", t.at},
                    {"mean_recall", report.mean_recall},
                    {"report", to_json(report)}});
  }
  return {{"direct", to_json(evaluate(pretrained, target_test))}, {"rows", rows}, {"full_is_max", full_is_max}};
}

inline void ablate_command(const RunConfig& c) {
  const auto d = detail::load_adapt_data(c);
  nlohmann::json table = ablation_table(d.pretrained, d.source.train, d.target.train, d.target.test, c.adapt, c.adapt_seed());
  table["seed"] = c.seed;
  detail::write_json(c.out + "/report_ablation.json", table);
}

inline void analyze_tags_command(const RunConfig& c) {
  const std::string manifest =
      c.paths.tags_manifest.empty() ? c.path_or(c.paths.source_manifest, "manifest_source.jsonl") : c.paths.tags_manifest;
  const auto records = detail::load_records(manifest, "paths.tags_manifest");
  auto report = analyze_tags(records, c.kmeans_k, c.kmeans_seed());
  report["manifest_path"] = detail::display_path(c, manifest);
  detail::write_json(c.out + "/report_tags.json", report);
}

/// Runs one command against a resolved config.
inline void execute(const std::string& command, const RunConfig& c) {
  std::filesystem::create_directories(c.out);
  detail::write_json(c.out + "/config_snapshot.json", to_json(c));
  if (command == "gen-data") gen_data(c);
  else if (command == "pretrain") pretrain_command(c);
  else if (command == "adapt") adapt_command(c);
  else if (command == "eval") eval_command(c);
  else if (command == "ablate") ablate_command(c);
  else if (command == "analyze-tags") analyze_tags_command(c);
  else throw UnknownCommand(command);
}

/// Parses arguments (without the program name) and runs the command.
/// Returns 0 on success, 2 on usage or config errors, 1 on other failures.
inline int run(const std::vector<std::string>& args, std::ostream& err = std::cerr) {
  CLI::App app{"Cross-domain image-text retrieval pipeline"};
  std::string command;
  FlagOverrides f;
  app.add_option("command", command, "gen-data | pretrain | adapt | eval | ablate | analyze-tags")->required();
  app.add_option("--config", f.config_path, "JSON config file");
  app.add_option("--seed", f.seed, "global seed");
  app.add_option("--out", f.out, "output directory");
  app.add_flag("--no-ss", f.no_ss, "disable similarity-based source selection");
  app.add_flag("--no-cl", f.no_cl, "disable the curriculum schedule");
  app.add_flag("--no-at", f.no_at, "disable adversarial training");
  app.add_option("--mode", f.mode, "curriculum mode: window | cumulative");
  app.add_option("--checkpoint", f.checkpoint, "checkpoint to evaluate (eval) or adapt from");
  app.add_option("--manifest", f.manifest, "manifest to evaluate or analyze");
  app.add_option("--set", f.sets, "override a config key, e.g. --set pretrain.lr=0.003");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    std::ostringstream out;
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  try {
    if (std::find(commands().begin(), commands().end(), command) == commands().end()) throw UnknownCommand(command);
    execute(command, resolve_config(command, f));
  } catch (const UnknownCommand& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace crossret::cli
