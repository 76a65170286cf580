#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "poisonprompt/config.hpp"
#include "poisonprompt/report.hpp"

using namespace poisonprompt;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("pp_report_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

AttackReport sample_report() {
  AttackReport r;
  r.train_size = 10;
  r.dev_size = 3;
  r.test_size = 3;
  r.poison_size = 1;
  r.target = {{40, 41}, {0.5, 0.25}, 2, true};
  r.target_rendered = {"w40", "w41"};
  for (int e = 0; e < 3; ++e) {
    EpochRecord rec;
    rec.epoch = e;
    rec.prompt_loss = 1.0 / (e + 1);
    rec.backdoor_loss = 2.0 / (e + 1);
    rec.clean_accuracy = 0.5 + 0.1 * e;
    rec.asr = 0.3 * e;
    rec.trigger = {7, 8};
    rec.candidates = {1, {{7}, {8}}, {{0.5}, {0.25}}};
    rec.evaluations = {{0, 7, 0.5}};
    rec.prompt.kind = PromptKind::hard;
    rec.prompt.tokens = {9, 10};
    r.epochs.push_back(rec);
  }
  r.prompt = r.epochs.back().prompt;
  r.trigger = {{7, 8}, TriggerPosition::prefix};
  r.trigger_rendered = {"w7", "w8"};
  r.test_accuracy = 0.75;
  r.test_asr = 0.5;
  return r;
}

}  // namespace

TEST(Report, MarkdownTableHasOneCellPairPerPromptAndDataset) {
  ResultTable t;
  t.add("soft", "synthetic", 0.9, 0.95);
  t.add("hard", "synthetic", 0.8, 0.5);
  t.add("soft", "other", 0.7, 1.0);
  const auto md = markdown_table(t);
  std::vector<std::string> lines;
  std::stringstream in(md);
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);  // header, rule, two prompt rows
  for (const auto& line : lines) EXPECT_EQ(std::count(line.begin(), line.end(), '|'), 6);
  EXPECT_NE(lines[2].find("| soft | 90.00 | 95.00 | 70.00 | 100.00 |"), std::string::npos);
  EXPECT_NE(lines[3].find("| hard | 80.00 | 50.00 | - | - |"), std::string::npos);
}

TEST(Report, EmitsJsonMarkdownAndPlots) {
  const auto dir = fresh_dir("attack");
  const auto r = sample_report();
  const auto json_files = emit_report(r, dir, ReportFormat::json);
  ASSERT_EQ(json_files.size(), 1u);
  EXPECT_TRUE(attack_report_from_json(nlohmann::json::parse(slurp(json_files[0]))) == r);

  const auto md = slurp(emit_report(r, dir, ReportFormat::markdown).at(0));
  EXPECT_NE(md.find("75.00 | 50.00"), std::string::npos);
  EXPECT_NE(md.find("w40 w41"), std::string::npos);
  EXPECT_EQ(std::count(md.begin(), md.end(), '\n') > 8, true);

  const auto plots = emit_report(r, dir, ReportFormat::plots);
  EXPECT_EQ(plots.size(), 4u);
  for (const auto& p : plots) {
    const auto svg = slurp(p);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_EQ(std::count(svg.begin(), svg.end(), '\n') > 3, true);
    // one marker per epoch
    std::size_t circles = 0;
    for (auto pos = svg.find("<circle"); pos != std::string::npos; pos = svg.find("<circle", pos + 1)) ++circles;
    EXPECT_EQ(circles, 3u);
  }
  fs::remove_all(dir);
}

TEST(Report, SweepAndFidelityOutputs) {
  const auto dir = fresh_dir("sweep");
  SweepReport s;
  s.rows = {{1, 0.9, 0.8}, {3, 0.85, 0.95}};
  s.runs = {sample_report(), sample_report()};
  EXPECT_EQ(emit_report(s, dir, ReportFormat::plots).size(), 2u);
  const auto md = slurp(emit_report(s, dir, ReportFormat::markdown).at(0));
  EXPECT_NE(md.find("| 3 | 85.00 | 95.00 |"), std::string::npos);
  EXPECT_TRUE(sweep_report_from_json(nlohmann::json::parse(slurp(emit_report(s, dir, ReportFormat::json).at(0)))) == s);

  FidelityReport f;
  f.seeds = {1};
  f.clean_runs = {sample_report()};
  f.backdoored_runs = {sample_report()};
  f.clean_accuracy = f.backdoored_accuracy = 0.75;
  const auto fmd = slurp(emit_report(f, dir, ReportFormat::markdown).at(0));
  EXPECT_NE(fmd.find("ACC drop: 0.00 points"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Report, UnwritableDestinationThrows) {
  const auto dir = fresh_dir("blocked");
  fs::create_directories(dir);
  { std::ofstream(dir / "file") << "x"; }
  EXPECT_THROW(emit_report(sample_report(), dir / "file" / "sub", ReportFormat::json), Error);
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Experiment config
// ---------------------------------------------------------------------------

namespace {

nlohmann::json minimal_config() {
  return {{"corpus", nlohmann::json::object()},
          {"model", nlohmann::json::object()},
          {"pretrain", nlohmann::json::object()},
          {"attack", nlohmann::json::object()}};
}

std::string config_error(const nlohmann::json& j) {
  try {
    experiment_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsFromEmptySections) {
  const auto c = experiment_config_from_json(minimal_config());
  EXPECT_EQ(c.model.vocab_size, c.corpus.vocab_size);
  EXPECT_EQ(c.verbalizer().num_classes(), 2u);
  EXPECT_EQ(c.sweep_sizes, (std::vector<Index>{1, 3, 5}));
}

TEST(Config, RoundTripsThroughJson) {
  auto j = minimal_config();
  j["attack"]["prompt_kind"] = "hard";
  j["corpus"]["examples_per_class"] = 1300;
  j["sweep_sizes"] = {2, 4};
  const auto c = experiment_config_from_json(j);
  const auto again = experiment_config_from_json(to_json(c));
  EXPECT_EQ(to_json(again), to_json(c));
  EXPECT_EQ(again.attack.prompt_kind, PromptKind::hard);
  EXPECT_EQ(again.corpus.examples_per_class, 1300);
}

TEST(Config, MissingSectionNamed) {
  auto j = minimal_config();
  j.erase("attack");
  EXPECT_NE(config_error(j).find("attack"), std::string::npos);
}

TEST(Config, UnknownKeyNamedWithPath) {
  auto j = minimal_config();
  j["model"]["d_modl"] = 32;
  EXPECT_NE(config_error(j).find("model.d_modl"), std::string::npos);
  j = minimal_config();
  j["extra"] = 1;
  EXPECT_NE(config_error(j).find("extra"), std::string::npos);
}

TEST(Config, WrongTypeNamedWithPath) {
  auto j = minimal_config();
  j["pretrain"]["steps"] = "many";
  EXPECT_NE(config_error(j).find("pretrain.steps"), std::string::npos);
  j = minimal_config();
  j["attack"]["poison_ratio"] = "high";
  EXPECT_NE(config_error(j).find("attack.poison_ratio"), std::string::npos);
}

TEST(Config, SemanticChecks) {
  auto j = minimal_config();
  j["attack"]["poison_ratio"] = 1.5;
  EXPECT_NE(config_error(j).find("attack"), std::string::npos);
  j = minimal_config();
  j["model"]["max_length"] = 20;
  EXPECT_NE(config_error(j).find("max_length"), std::string::npos);
  j = minimal_config();
  j["sweep_sizes"] = nlohmann::json::array();
  EXPECT_NE(config_error(j).find("sweep_sizes"), std::string::npos);
  j = minimal_config();
  j["model"]["num_heads"] = 5;
  EXPECT_NE(config_error(j).find("model"), std::string::npos);
}

TEST(Config, LoadReportsMalformedFile) {
  const auto path = fs::temp_directory_path() / ("pp_bad_config_" + std::to_string(::getpid()) + ".json");
  { std::ofstream(path) << "{ not json"; }
  EXPECT_THROW(load_experiment_config(path), ConfigError);
  fs::remove(path);
  EXPECT_THROW(load_experiment_config(path), ConfigError);
}

TEST(Config, ShippedDefaultConfigParses) {
  const auto c = load_experiment_config(POISONPROMPT_SOURCE_DIR "/configs/default.json");
  EXPECT_EQ(c.corpus.examples_per_class * c.corpus.num_classes, 2600);
  EXPECT_EQ(c.attack.prompt_length, 10);
  EXPECT_EQ(c.attack.trigger_length, 3);
  EXPECT_DOUBLE_EQ(c.attack.poison_ratio, 0.05);
  EXPECT_EQ(c.model.d_model, 64);
  EXPECT_EQ(c.model.num_layers, 2);
}
