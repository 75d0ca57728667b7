#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "crossret/cli.hpp"

using namespace crossret;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "data": {"n_pairs": 100, "feature_dim": 8, "n_concepts": 4, "attribute_slots": 2, "attribute_values": 2},
  "encoder": {"feature_dim": 8, "embed_dim": 8, "n_heads": 2, "vocab_size": 16, "max_seq_len": 10},
  "pretrain": {"epochs": 2, "batch_size": 16, "lr": 0.003},
  "adapt": {"epochs": 2, "target_batch": 2, "source_batch": 10, "lr": 0.001, "disc_lr": 0.001}
})";

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("crossret_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

int run(std::vector<std::string> args, std::string* err_text = nullptr) {
  std::ostringstream err;
  const int code = cli::run(args, err);
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST(Defaults, CanonicalTableSnapshot) {
  const nlohmann::json want = {{"T_a", 0.2},         {"T_s", 0.2},           {"num_seg", 6},
                               {"beta", 1.0},        {"n_t", 16},            {"n_s", 80},
                               {"pretrain_epochs", 15}, {"finetune_epochs", 5}, {"finetune_lr", 1e-7}};
  EXPECT_EQ(canonical_defaults(), want);
  const RunConfig d;
  EXPECT_EQ(d.pretrain.lr_decay_factor, 0.3);
  EXPECT_EQ(d.pretrain.lr_decay_every, 10u);
  EXPECT_EQ(d.pretrain.learning_rate, 1e-5);
  EXPECT_EQ(d.pretrain.batch_size, 40u);
  EXPECT_EQ(d.adapt.curriculum_increment, 0.2);
  EXPECT_EQ(d.adapt.curriculum_mode, CurriculumMode::kWindow);
}

TEST(Config, RoundTripsThroughJson) {
  RunConfig c;
  apply_json(c, nlohmann::json::parse(kTinyConfig));
  RunConfig back;
  apply_json(back, to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.encoder.embed_dim, 8u);
}

TEST(Config, UnknownKeyNamesField) {
  RunConfig c;
  try {
    apply_json(c, nlohmann::json::parse(R"({"pretrain": {"lrr": 1}})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "pretrain.lrr");
  }
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"colour": 1})")), ConfigError);
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"encoder": {"seed": 1}})")), ConfigError);
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"adapt": {"beta": "high"}})")), ConfigError);
}

TEST(Config, UnknownKeyExitsNonzero) {
  const auto dir = fresh_dir("unknown_key");
  const auto cfg = write_file(dir / "bad.json", R"({"filter": {"T_a": 0.3}})");
  std::string err;
  EXPECT_EQ(run({"gen-data", "--config", cfg.string(), "--out", dir.string()}, &err), 2);
  EXPECT_NE(err.find("filter.T_a"), std::string::npos);
}

TEST(Config, FlagPrecedencePerField) {
  const auto dir = fresh_dir("precedence");
  const auto cfg = write_file(dir / "c.json", R"({"seed": 3, "out": "from_file", "adapt": {"mode": "window", "ss": true, "cl": true, "at": true},
    "paths": {"eval_checkpoint": "file.bin", "eval_manifest": "file.jsonl"}})");
  cli::FlagOverrides f;
  f.config_path = cfg.string();
  RunConfig c = cli::resolve_config("eval", f);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.out, "from_file");

  f.sets = {"seed=4", "out=from_set", "adapt.mode=cumulative", "adapt.at=false"};
  c = cli::resolve_config("eval", f);
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.out, "from_set");
  EXPECT_EQ(c.adapt.curriculum_mode, CurriculumMode::kCumulative);
  EXPECT_FALSE(c.toggles.at);

  f.seed = 5;
  f.out = "from_flag";
  f.mode = "window";
  f.no_ss = true;
  f.no_cl = true;
  f.checkpoint = "flag.bin";
  f.manifest = "flag.jsonl";
  c = cli::resolve_config("eval", f);
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.out, "from_flag");
  EXPECT_EQ(c.adapt.curriculum_mode, CurriculumMode::kWindow);
  EXPECT_FALSE(c.toggles.ss);
  EXPECT_FALSE(c.toggles.cl);
  EXPECT_EQ(c.paths.eval_checkpoint, "flag.bin");
  EXPECT_EQ(c.paths.eval_manifest, "flag.jsonl");

  c = cli::resolve_config("adapt", f);
  EXPECT_EQ(c.paths.pretrained_checkpoint, "flag.bin");
  EXPECT_EQ(c.paths.eval_checkpoint, "file.bin");
  c = cli::resolve_config("analyze-tags", f);
  EXPECT_EQ(c.paths.tags_manifest, "flag.jsonl");
}

TEST(Config, BadModeRejected) {
  cli::FlagOverrides f;
  f.mode = "sideways";
  EXPECT_THROW(cli::resolve_config("adapt", f), ConfigError);
}

TEST(Config, SeedsDeriveFromGlobalSeed) {
  RunConfig a, b;
  b.seed = 1;
  EXPECT_NE(a.data_config().seed, b.data_config().seed);
  EXPECT_NE(a.encoder_config().seed, a.data_config().seed);
  EXPECT_NE(a.batching_seed(), a.adapt_seed());
}

// ---------------------------------------------------------------------------

TEST(Cli, UnknownCommand) {
  std::string err;
  EXPECT_EQ(run({"train-everything"}, &err), 2);
  EXPECT_NE(err.find("train-everything"), std::string::npos);
}

TEST(Cli, MissingCommandIsUsageError) { EXPECT_EQ(run({}), 2); }

TEST(Cli, GenDataWritesManifestsAndSnapshot) {
  const auto dir = fresh_dir("gen_data");
  ASSERT_EQ(run({"gen-data", "--out", dir.string()}), 0);
  EXPECT_TRUE(fs::exists(dir / "manifest_source.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "manifest_target.jsonl"));
  ASSERT_TRUE(fs::exists(dir / "config_snapshot.json"));
  const auto snap = nlohmann::json::parse(slurp(dir / "config_snapshot.json"));
  EXPECT_EQ(snap["filter"]["area_threshold"], 0.2);
  EXPECT_EQ(load_manifest((dir / "manifest_source.jsonl").string()).size(), 512u);
}

TEST(Cli, EvalMissingCheckpointFails) {
  const auto dir = fresh_dir("eval_missing");
  std::string err;
  const int code = run({"eval", "--out", dir.string(), "--checkpoint", (dir / "nope.bin").string()}, &err);
  EXPECT_NE(code, 0);
  EXPECT_NE(err.find("checkpoint"), std::string::npos);
}

TEST(Cli, PipelineReplaysBitExactFromSnapshot) {
  const auto a = fresh_dir("replay_a"), b = fresh_dir("replay_b");
  const auto cfg = write_file(a / "tiny.json", kTinyConfig);
  const std::vector<std::string> steps = {"gen-data", "pretrain", "adapt", "eval", "analyze-tags"};
  for (const auto& s : steps) ASSERT_EQ(run({s, "--config", cfg.string(), "--out", a.string(), "--seed", "7"}), 0) << s;
  const auto snapshot = a / "config_snapshot.json";
  const auto copy = write_file(b / "snapshot.json", slurp(snapshot));
  for (const auto& s : steps) ASSERT_EQ(run({s, "--config", copy.string(), "--out", b.string()}), 0) << s;
  for (const char* f : {"manifest_source.jsonl", "manifest_target.jsonl", "checkpoint_pretrain.bin", "checkpoint_adapt.bin",
                        "log_pretrain.jsonl", "log_adapt.jsonl", "log_sampler.jsonl", "report_pretrain.json",
                        "report_transfer.json", "report_eval.json", "report_tags.json"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  const auto log = slurp(a / "log_adapt.jsonl");
  const auto first = nlohmann::json::parse(log.substr(0, log.find('\n')));
  for (const char* k : {"step", "window", "triplet", "adv_enc", "adv_disc", "wvec_min", "wvec_max"})
    EXPECT_TRUE(first.contains(k)) << k;
  const auto eval = nlohmann::json::parse(slurp(a / "report_eval.json"));
  EXPECT_TRUE(eval.contains("checkpoint_id"));
  EXPECT_EQ(eval["manifest_path"], "manifest_target_test.jsonl");
  EXPECT_EQ(eval["n_queries"], 70);
}

TEST(Cli, AblateEmitsFourRows) {
  const auto dir = fresh_dir("ablate");
  const auto cfg = write_file(dir / "tiny.json", kTinyConfig);
  for (const char* s : {"gen-data", "pretrain", "ablate"})
    ASSERT_EQ(run({s, "--config", cfg.string(), "--out", dir.string()}), 0) << s;
  const auto j = nlohmann::json::parse(slurp(dir / "report_ablation.json"));
  ASSERT_EQ(j["rows"].size(), 4u);
  EXPECT_EQ(j["rows"][0]["configuration"], "full");
  EXPECT_EQ(j["rows"][1]["configuration"], "w/o SS");
  EXPECT_EQ(j["rows"][2]["configuration"], "w/o CL");
  EXPECT_EQ(j["rows"][3]["configuration"], "w/o AT");
  double best_other = 0.0;
  for (std::size_t i = 1; i < 4; ++i) best_other = std::max(best_other, j["rows"][i]["mean_recall"].get<double>());
  EXPECT_EQ(j["full_is_max"], j["rows"][0]["mean_recall"].get<double>() >= best_other);
  EXPECT_TRUE(j.contains("direct"));
}

TEST(Cli, AdaptTogglesShowInReport) {
  const auto dir = fresh_dir("toggles");
  const auto cfg = write_file(dir / "tiny.json", kTinyConfig);
  for (const char* s : {"gen-data", "pretrain"}) ASSERT_EQ(run({s, "--config", cfg.string(), "--out", dir.string()}), 0);
  ASSERT_EQ(run({"adapt", "--config", cfg.string(), "--out", dir.string(), "--no-cl"}), 0);
  const auto j = nlohmann::json::parse(slurp(dir / "report_transfer.json"));
  EXPECT_EQ(j["configuration"], "w/o CL");
  EXPECT_NEAR(j["delta_mean_recall"].get<double>(),
              j["adapted"]["mean_recall"].get<double>() - j["direct"]["mean_recall"].get<double>(), 1e-12);
}
