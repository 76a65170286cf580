// Command-line front end: pretrain, attack, eval, sweep, fidelity, report.
//
// Exit codes: 0 success, 2 usage or config error, 1 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "poisonprompt/checkpoint.hpp"
#include "poisonprompt/config.hpp"
#include "poisonprompt/corpus.hpp"
#include "poisonprompt/harness.hpp"
#include "poisonprompt/pretrain.hpp"
#include "poisonprompt/report.hpp"

namespace fs = std::filesystem;
using namespace poisonprompt;

namespace {

/// Bad input from the user: reported with exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool dry_run = false;
  std::string metric_mode;
  bool literal_paper_mode = false;
  std::string checkpoint;
};

ExperimentConfig load_config(const CommonOptions& o) {
  if (o.config.empty()) throw UsageError("--config is required");
  ExperimentConfig c = load_experiment_config(o.config);
  if (!o.metric_mode.empty()) c.attack.asr_mode = enum_from_name<AsrMode>(o.metric_mode);
  if (o.literal_paper_mode) c.attack.literal_paper_mode = true;
  if (!o.out.empty()) c.output_dir = o.out;
  return c;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  detail::write_text(path, j.dump(2) + "\n");
}

nlohmann::json read_json(const fs::path& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw UsageError(what + " not found: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(what + " is not valid JSON: " + path.string());
  }
}

MaskedLM<float> pretrain_model(const ExperimentConfig& c, const fs::path& out) {
  const auto spec = c.pretrain_corpus_spec();
  const auto corpus = generate_synthetic_corpus(spec);
  std::cerr << "pretraining on " << corpus.size() << " sequences for " << c.pretrain.steps << " steps\n";
  auto result = pretrain_mlm<float>(corpus, make_vocabulary(c.corpus), c.model, c.pretrain, c.model_init_seed);
  fs::create_directories(out);
  save_checkpoint(result.model, out / "model.ckpt");
  save_dataset(corpus, out / "pretrain_corpus.jsonl");
  write_json(out / "pretrain_losses.json", result.losses);
  return std::move(result.model);
}

/// The checkpoint named on the command line, else <out>/model.ckpt, else a
/// freshly pretrained model.
MaskedLM<float> obtain_model(const ExperimentConfig& c, const CommonOptions& o, const fs::path& out) {
  fs::path path = o.checkpoint.empty() ? out / "model.ckpt" : fs::path(o.checkpoint);
  if (fs::exists(path)) return load_checkpoint<float>(path);
  if (!o.checkpoint.empty()) throw UsageError("checkpoint not found: " + path.string());
  return pretrain_model(c, out);
}

nlohmann::json prompt_artifact_json(const PromptArtifact& p, const Verbalizer& v) {
  auto j = to_json(p);
  j["verbalizer"] = v.label_words;
  return j;
}

int cmd_pretrain(const CommonOptions& o) {
  ExperimentConfig c = load_config(o);
  if (o.seed) c.pretrain.seed = *o.seed;
  if (o.dry_run) {
    std::cout << "config ok\n";
    return 0;
  }
  const fs::path out = c.output_dir;
  pretrain_model(c, out);
  write_json(out / "config.json", to_json(c));
  std::cout << (out / "model.ckpt").string() << "\n";
  return 0;
}

int cmd_attack(const CommonOptions& o) {
  ExperimentConfig c = load_config(o);
  if (o.seed) c.attack.seed = *o.seed;
  if (o.dry_run) {
    std::cout << "config ok\n";
    return 0;
  }
  const fs::path out = c.output_dir;
  const auto model = obtain_model(c, o, out);
  const auto corpus = generate_synthetic_corpus(c.corpus);
  const auto verbalizer = c.verbalizer();
  const auto report = run_attack(model, corpus, verbalizer, c.attack);

  const auto data = prepare_attack_data(corpus, c.attack);
  fs::create_directories(out);
  save_dataset(data.train, out / "train.jsonl");
  save_dataset(data.dev, out / "dev.jsonl");
  save_dataset(data.test, out / "test.jsonl");
  write_json(out / "config.json", to_json(c));
  write_json(out / "prompt.json", prompt_artifact_json(report.prompt, verbalizer));
  auto trig = to_json(report.trigger);
  trig["target_tokens"] = report.target.tokens;
  trig["asr_mode"] = enum_name(c.attack.asr_mode);
  write_json(out / "trigger.json", trig);
  for (auto f : {ReportFormat::json, ReportFormat::markdown, ReportFormat::plots}) emit_report(report, out, f);

  std::cout << "test ACC " << report.test_accuracy << "\ntest ASR " << report.test_asr << "\n";
  if (report.aborted) {
    std::cerr << "attack aborted: " << report.abort_reason << "\n";
    return 1;
  }
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& prompt_path, const std::string& trigger_path,
             const std::string& dataset_path, const std::string& metric_mode) {
  if (!fs::exists(checkpoint)) throw UsageError("checkpoint not found: " + checkpoint);
  if (!fs::exists(dataset_path)) throw UsageError("dataset not found: " + dataset_path);
  const auto model = load_checkpoint<float>(checkpoint);
  const auto pj = read_json(prompt_path, "prompt artifact");
  const auto artifact = prompt_artifact_from_json(pj);
  const Verbalizer verbalizer{pj.at("verbalizer").get<std::vector<std::vector<TokenId>>>()};
  const auto data = load_dataset(dataset_path);
  const Template base = Template::cloze(artifact.kind == PromptKind::soft ? artifact.vectors.rows()
                                                                          : static_cast<Index>(artifact.tokens.size()));
  const auto prompt = artifact.to_prompt<float>();
  std::cout << "ACC " << compute_accuracy(model, base, prompt, data, verbalizer) << "\n";
  if (!trigger_path.empty()) {
    const auto tj = read_json(trigger_path, "trigger");
    const auto trigger = trigger_from_json(tj);
    const auto targets = tj.at("target_tokens").get<std::vector<TokenId>>();
    const std::string mode_name = !metric_mode.empty() ? metric_mode : tj.value("asr_mode", std::string("argmax"));
    const AsrMode mode = enum_from_name<AsrMode>(mode_name);
    std::cout << "ASR " << asr(model, base, prompt, trigger, data, targets, mode) << "\n";
  }
  return 0;
}

std::vector<Index> parse_sizes(const std::string& text) {
  std::vector<Index> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("--sizes: '" + item + "' is not a positive integer");
    }
  }
  if (out.empty()) throw UsageError("--sizes: no trigger sizes given");
  return out;
}

int cmd_sweep(const CommonOptions& o, const std::optional<std::string>& sizes_text) {
  ExperimentConfig c = load_config(o);
  if (o.seed) c.attack.seed = *o.seed;
  const auto sizes = sizes_text ? parse_sizes(*sizes_text) : c.sweep_sizes;
  if (o.dry_run) {
    std::cout << "config ok\n";
    return 0;
  }
  const fs::path out = c.output_dir;
  const auto model = obtain_model(c, o, out);
  const auto report = run_robustness_sweep(model, generate_synthetic_corpus(c.corpus), c.verbalizer(), c.attack, sizes);
  write_json(out / "config.json", to_json(c));
  for (auto f : {ReportFormat::json, ReportFormat::markdown, ReportFormat::plots}) emit_report(report, out, f);
  for (const auto& r : report.rows) std::cout << "N " << r.trigger_length << " ACC " << r.accuracy << " ASR " << r.asr << "\n";
  return 0;
}

int cmd_fidelity(const CommonOptions& o) {
  ExperimentConfig c = load_config(o);
  if (o.dry_run) {
    std::cout << "config ok\n";
    return 0;
  }
  const fs::path out = c.output_dir;
  const auto model = obtain_model(c, o, out);
  const auto report =
      run_fidelity_experiment(model, generate_synthetic_corpus(c.corpus), c.verbalizer(), c.attack, c.fidelity_seeds);
  write_json(out / "config.json", to_json(c));
  for (auto f : {ReportFormat::json, ReportFormat::markdown, ReportFormat::plots}) emit_report(report, out, f);
  std::cout << "clean ACC " << report.clean_accuracy << "\nbackdoored ACC " << report.backdoored_accuracy
            << "\nbackdoored ASR " << report.backdoored_asr << "\nACC drop " << report.accuracy_drop << "\n";
  return 0;
}

int cmd_report(const std::string& input, const std::string& out_dir) {
  const auto j = read_json(input, "report");
  const fs::path out = out_dir.empty() ? fs::path(input).parent_path() : fs::path(out_dir);
  std::vector<fs::path> written;
  auto emit_all = [&](const auto& report) {
    for (auto f : {ReportFormat::markdown, ReportFormat::plots})
      for (auto& p : emit_report(report, out, f)) written.push_back(p);
  };
  try {
    if (j.contains("rows")) emit_all(sweep_report_from_json(j));
    else if (j.contains("clean_runs")) emit_all(fidelity_report_from_json(j));
    else emit_all(attack_report_from_json(j));
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(input + " is not a report: " + e.what());
  }
  for (const auto& p : written) std::cout << p.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::cout << std::setprecision(17);
  CLI::App app{"Prompt-tuning backdoor experiments on a tiny masked language model"};
  app.require_subcommand(1);
  unsigned threads = 0;
  app.add_option("--threads", threads, "Worker threads (0 = hardware concurrency)");

  CommonOptions common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Experiment config (JSON)")->required();
    sub->add_option("--out", common.out, "Output directory (overrides output_dir)");
    sub->add_flag("--dry-run", common.dry_run, "Validate the config and exit");
  };

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the masked LM and write model.ckpt");
  add_common(pretrain);
  pretrain->add_option("--seed", common.seed, "Override pretrain.seed");

  auto add_attack_flags = [&](CLI::App* sub) {
    sub->add_option("--seed", common.seed, "Override attack.seed");
    sub->add_option("--checkpoint", common.checkpoint, "Use this checkpoint instead of <out>/model.ckpt");
    sub->add_option("--metric-mode", common.metric_mode, "ASR rule")->check(CLI::IsMember({"argmax", "mass"}));
    sub->add_flag("--literal-paper-mode", common.literal_paper_mode, "Select triggers by test-set ASR");
  };
  auto* attack = app.add_subcommand("attack", "Run the backdoor attack and write reports");
  add_common(attack);
  add_attack_flags(attack);

  std::optional<std::string> sizes;
  auto* sweep = app.add_subcommand("sweep", "Attack once per trigger length");
  add_common(sweep);
  add_attack_flags(sweep);
  sweep->add_option("--sizes", sizes, "Comma-separated trigger lengths, e.g. 1,3,5");

  auto* fidelity = app.add_subcommand("fidelity", "Clean vs backdoored prompt accuracy over the config's seeds");
  add_common(fidelity);
  fidelity->add_option("--checkpoint", common.checkpoint, "Use this checkpoint instead of <out>/model.ckpt");
  fidelity->add_option("--metric-mode", common.metric_mode, "ASR rule")->check(CLI::IsMember({"argmax", "mass"}));

  std::string checkpoint, prompt_path, trigger_path, dataset_path, metric_mode;
  auto* eval = app.add_subcommand("eval", "Recompute ACC (and ASR) from saved artifacts");
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval->add_option("--prompt", prompt_path, "prompt.json")->required();
  eval->add_option("--trigger", trigger_path, "trigger.json (omit for ACC only)");
  eval->add_option("--dataset", dataset_path, "JSONL dataset")->required();
  eval->add_option("--metric-mode", metric_mode, "ASR rule")->check(CLI::IsMember({"argmax", "mass"}));

  std::string input, report_out;
  auto* report = app.add_subcommand("report", "Render markdown and plots from a JSON report");
  report->add_option("--input", input, "report.json, sweep.json or fidelity.json")->required();
  report->add_option("--out", report_out, "Output directory (default: next to the input)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (threads > 0) set_num_threads(threads);

  try {
    if (*pretrain) return cmd_pretrain(common);
    if (*attack) return cmd_attack(common);
    if (*sweep) return cmd_sweep(common, sizes);
    if (*fidelity) return cmd_fidelity(common);
    if (*eval) return cmd_eval(checkpoint, prompt_path, trigger_path, dataset_path, metric_mode);
    if (*report) return cmd_report(input, report_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
