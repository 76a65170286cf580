#pragma once

#include <chrono>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonprompt/common.hpp"
#include "poisonprompt/corpus.hpp"
#include "poisonprompt/model.hpp"
#include "poisonprompt/poison.hpp"
#include "poisonprompt/prompt.hpp"
#include "poisonprompt/trigger.hpp"

namespace poisonprompt {

// ---------------------------------------------------------------------------
// Enum names
// ---------------------------------------------------------------------------

namespace detail {

template <class E>
struct EnumNames;

template <>
struct EnumNames<PromptKind> {
  static constexpr std::array<std::pair<PromptKind, const char*>, 2> values{
      {{PromptKind::soft, "soft"}, {PromptKind::hard, "hard"}}};
};
template <>
struct EnumNames<TriggerPosition> {
  static constexpr std::array<std::pair<TriggerPosition, const char*>, 2> values{
      {{TriggerPosition::prefix, "prefix"}, {TriggerPosition::suffix, "suffix"}}};
};
template <>
struct EnumNames<AsrMode> {
  static constexpr std::array<std::pair<AsrMode, const char*>, 2> values{
      {{AsrMode::argmax, "argmax"}, {AsrMode::mass, "mass"}}};
};
template <>
struct EnumNames<PoisonSupervision> {
  static constexpr std::array<std::pair<PoisonSupervision, const char*>, 3> values{
      {{PoisonSupervision::target, "target"},
       {PoisonSupervision::label, "label"},
       {PoisonSupervision::label_and_target, "label_and_target"}}};
};

}  // namespace detail

template <class E>
std::string enum_name(E value) {
  for (const auto& [v, name] : detail::EnumNames<E>::values)
    if (v == value) return name;
  throw std::logic_error("unnamed enum value");
}

template <class E>
E enum_from_name(const std::string& name) {
  std::string allowed;
  for (const auto& [v, n] : detail::EnumNames<E>::values) {
    if (name == n) return v;
    allowed += allowed.empty() ? n : std::string(", ") + n;
  }
  throw std::invalid_argument("'" + name + "' is not one of: " + allowed);
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct AttackConfig {
  double poison_ratio = 0.05;
  PromptKind prompt_kind = PromptKind::soft;
  Index prompt_length = 10;
  Index trigger_length = 3;
  TriggerPosition trigger_position = TriggerPosition::suffix;
  Index candidate_k = 8;
  int epochs = 10;       // E_1
  int inner_steps = 20;  // E_2
  double learning_rate = 1.0;
  int batch_size = 32;
  /// Size of V_t; 0 means the total number of label words.
  Index target_k = 0;
  bool target_top_up = true;
  PoisonSupervision poison_supervision = PoisonSupervision::target;
  AsrMode asr_mode = AsrMode::argmax;
  /// Selects triggers by test-set ASR instead of attack-dev ASR.
  bool literal_paper_mode = false;
  double dev_fraction = 300.0 / 2600.0;
  double test_fraction = 300.0 / 2600.0;
  std::uint64_t seed = 1;

  void validate() const {
    require(poison_ratio >= 0.0 && poison_ratio < 1.0, "poison_ratio must lie in [0, 1)");
    require(prompt_length >= 1, "prompt_length must be at least 1");
    require(trigger_length >= 1, "trigger_length must be at least 1");
    require(candidate_k >= 1, "candidate_k must be at least 1");
    require(epochs >= 1, "epochs must be at least 1");
    require(inner_steps >= 1, "inner_steps must be at least 1");
    require(learning_rate > 0.0, "learning_rate must be positive");
    require(batch_size >= 1, "batch_size must be at least 1");
    require(target_k >= 0, "target_k must be non-negative");
    require(dev_fraction > 0.0 && test_fraction > 0.0 && dev_fraction + test_fraction < 1.0,
            "dev_fraction and test_fraction must be positive and leave a training split");
  }

  bool operator==(const AttackConfig&) const = default;
};

inline nlohmann::json to_json(const AttackConfig& c) {
  return {{"poison_ratio", c.poison_ratio},
          {"prompt_kind", enum_name(c.prompt_kind)},
          {"prompt_length", c.prompt_length},
          {"trigger_length", c.trigger_length},
          {"trigger_position", enum_name(c.trigger_position)},
          {"candidate_k", c.candidate_k},
          {"epochs", c.epochs},
          {"inner_steps", c.inner_steps},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"target_k", c.target_k},
          {"target_top_up", c.target_top_up},
          {"poison_supervision", enum_name(c.poison_supervision)},
          {"asr_mode", enum_name(c.asr_mode)},
          {"literal_paper_mode", c.literal_paper_mode},
          {"dev_fraction", c.dev_fraction},
          {"test_fraction", c.test_fraction},
          {"seed", c.seed}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline AttackConfig attack_config_from_json(const nlohmann::json& j, const std::string& where = "attack") {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  AttackConfig c;
  for (const auto& [key, value] : j.items()) {
    const std::string field = where + "." + key;
    try {
      if (key == "poison_ratio") c.poison_ratio = value.get<double>();
      else if (key == "prompt_kind") c.prompt_kind = enum_from_name<PromptKind>(value.get<std::string>());
      else if (key == "prompt_length") c.prompt_length = value.get<Index>();
      else if (key == "trigger_length") c.trigger_length = value.get<Index>();
      else if (key == "trigger_position") c.trigger_position = enum_from_name<TriggerPosition>(value.get<std::string>());
      else if (key == "candidate_k") c.candidate_k = value.get<Index>();
      else if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "inner_steps") c.inner_steps = value.get<int>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "target_k") c.target_k = value.get<Index>();
      else if (key == "target_top_up") c.target_top_up = value.get<bool>();
      else if (key == "poison_supervision")
        c.poison_supervision = enum_from_name<PoisonSupervision>(value.get<std::string>());
      else if (key == "asr_mode") c.asr_mode = enum_from_name<AsrMode>(value.get<std::string>());
      else if (key == "literal_paper_mode") c.literal_paper_mode = value.get<bool>();
      else if (key == "dev_fraction") c.dev_fraction = value.get<double>();
      else if (key == "test_fraction") c.test_fraction = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw std::invalid_argument("unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(field + ": wrong type (" + e.what() + ")");
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(field + ": " + e.what());
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Report types
// ---------------------------------------------------------------------------

inline constexpr int kReportSchemaVersion = 1;

/// Serializable prompt: soft vectors (stored as double, exact for float) or
/// hard tokens.
struct PromptArtifact {
  PromptKind kind = PromptKind::soft;
  Matrix<double> vectors;
  std::vector<TokenId> tokens;

  template <class S>
  static PromptArtifact from(const Prompt<S>& p) {
    PromptArtifact a;
    if (const auto* soft = std::get_if<SoftPrompt<S>>(&p)) {
      a.kind = PromptKind::soft;
      a.vectors = soft->vectors.template cast<double>();
    } else {
      a.kind = PromptKind::hard;
      a.tokens = std::get<HardPrompt>(p).tokens;
    }
    return a;
  }

  template <class S>
  [[nodiscard]] Prompt<S> to_prompt() const {
    if (kind == PromptKind::soft) return SoftPrompt<S>{vectors.cast<S>()};
    return HardPrompt{tokens};
  }

  bool operator==(const PromptArtifact& o) const {
    return kind == o.kind && tokens == o.tokens && vectors.rows() == o.vectors.rows() &&
           vectors.cols() == o.vectors.cols() && (vectors.array() == o.vectors.array()).all();
  }
};

struct EpochRecord {
  int epoch = 0;
  double prompt_loss = 0;    // mean L_p over the lower-level steps
  double backdoor_loss = 0;  // mean L_b over the accumulation batches
  double clean_accuracy = 0;  // attack-dev
  double asr = 0;             // selection split, chosen trigger
  std::vector<TokenId> trigger;
  CandidateSet candidates;
  std::vector<CandidateEvaluation> evaluations;
  PromptArtifact prompt;

  bool operator==(const EpochRecord&) const = default;
};

struct AttackReport {
  int schema_version = kReportSchemaVersion;
  AttackConfig config;
  std::size_t train_size = 0, dev_size = 0, test_size = 0, poison_size = 0;
  TargetTokenSet target;
  std::vector<std::string> target_rendered;
  std::vector<EpochRecord> epochs;
  PromptArtifact prompt;
  TriggerSpec trigger;
  std::vector<std::string> trigger_rendered;
  double test_accuracy = 0;
  double test_asr = 0;
  /// ASR of the initial trigger with the initial prompt, on the test split.
  double base_asr = 0;
  bool aborted = false;
  std::string abort_reason;
  double wall_clock_seconds = 0;

  /// Equality ignores wall-clock time.
  bool operator==(const AttackReport& o) const {
    return schema_version == o.schema_version && config == o.config && train_size == o.train_size &&
           dev_size == o.dev_size && test_size == o.test_size && poison_size == o.poison_size && target == o.target &&
           target_rendered == o.target_rendered && epochs == o.epochs && prompt == o.prompt && trigger == o.trigger &&
           trigger_rendered == o.trigger_rendered && test_accuracy == o.test_accuracy && test_asr == o.test_asr &&
           base_asr == o.base_asr && aborted == o.aborted && abort_reason == o.abort_reason;
  }
};

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const PromptArtifact& a) {
  nlohmann::json j{{"kind", enum_name(a.kind)}};
  if (a.kind == PromptKind::soft) {
    auto rows = nlohmann::json::array();
    for (Index r = 0; r < a.vectors.rows(); ++r) {
      std::vector<double> row(a.vectors.row(r).data(), a.vectors.row(r).data() + a.vectors.cols());
      rows.push_back(row);
    }
    j["vectors"] = rows;
  } else {
    j["tokens"] = a.tokens;
  }
  return j;
}

inline PromptArtifact prompt_artifact_from_json(const nlohmann::json& j) {
  PromptArtifact a;
  a.kind = enum_from_name<PromptKind>(j.at("kind").get<std::string>());
  if (a.kind == PromptKind::soft) {
    const auto rows = j.at("vectors").get<std::vector<std::vector<double>>>();
    const Index cols = rows.empty() ? 0 : static_cast<Index>(rows[0].size());
    a.vectors.resize(static_cast<Index>(rows.size()), cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      require(static_cast<Index>(rows[r].size()) == cols, "ragged soft prompt");
      for (Index c = 0; c < cols; ++c) a.vectors(static_cast<Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
    }
  } else {
    a.tokens = j.at("tokens").get<std::vector<TokenId>>();
  }
  return a;
}

inline nlohmann::json to_json(const TriggerSpec& t) {
  return {{"tokens", t.tokens}, {"position", enum_name(t.position)}};
}

inline TriggerSpec trigger_from_json(const nlohmann::json& j) {
  return {j.at("tokens").get<std::vector<TokenId>>(), enum_from_name<TriggerPosition>(j.at("position").get<std::string>())};
}

inline nlohmann::json to_json(const TargetTokenSet& t) {
  return {{"tokens", t.tokens}, {"scores", t.scores}, {"k", t.k}, {"top_up", t.top_up}};
}

inline TargetTokenSet target_from_json(const nlohmann::json& j) {
  return {j.at("tokens").get<std::vector<TokenId>>(), j.at("scores").get<std::vector<double>>(), j.at("k").get<Index>(),
          j.at("top_up").get<bool>()};
}

inline nlohmann::json to_json(const EpochRecord& e) {
  auto evals = nlohmann::json::array();
  for (const auto& ev : e.evaluations) evals.push_back({{"slot", ev.slot}, {"token", ev.token}, {"asr", ev.asr}});
  return {{"epoch", e.epoch},
          {"prompt_loss", e.prompt_loss},
          {"backdoor_loss", e.backdoor_loss},
          {"clean_accuracy", e.clean_accuracy},
          {"asr", e.asr},
          {"trigger", e.trigger},
          {"candidates", {{"k", e.candidates.k}, {"tokens", e.candidates.tokens}, {"scores", e.candidates.scores}}},
          {"evaluations", evals},
          {"prompt", to_json(e.prompt)}};
}

inline EpochRecord epoch_from_json(const nlohmann::json& j) {
  EpochRecord e;
  e.epoch = j.at("epoch").get<int>();
  e.prompt_loss = j.at("prompt_loss").get<double>();
  e.backdoor_loss = j.at("backdoor_loss").get<double>();
  e.clean_accuracy = j.at("clean_accuracy").get<double>();
  e.asr = j.at("asr").get<double>();
  e.trigger = j.at("trigger").get<std::vector<TokenId>>();
  const auto& c = j.at("candidates");
  e.candidates = {c.at("k").get<Index>(), c.at("tokens").get<std::vector<std::vector<TokenId>>>(),
                  c.at("scores").get<std::vector<std::vector<double>>>()};
  for (const auto& ev : j.at("evaluations"))
    e.evaluations.push_back({ev.at("slot").get<Index>(), ev.at("token").get<TokenId>(), ev.at("asr").get<double>()});
  e.prompt = prompt_artifact_from_json(j.at("prompt"));
  return e;
}

inline nlohmann::json to_json(const AttackReport& r) {
  auto epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) epochs.push_back(to_json(e));
  return {{"schema_version", r.schema_version},
          {"config", to_json(r.config)},
          {"sizes", {{"train", r.train_size}, {"dev", r.dev_size}, {"test", r.test_size}, {"poison", r.poison_size}}},
          {"target_tokens", to_json(r.target)},
          {"target_tokens_rendered", r.target_rendered},
          {"epochs", epochs},
          {"prompt", to_json(r.prompt)},
          {"trigger", to_json(r.trigger)},
          {"trigger_rendered", r.trigger_rendered},
          {"test_accuracy", r.test_accuracy},
          {"test_asr", r.test_asr},
          {"base_asr", r.base_asr},
          {"aborted", r.aborted},
          {"abort_reason", r.abort_reason},
          {"wall_clock_seconds", r.wall_clock_seconds}};
}

inline AttackReport attack_report_from_json(const nlohmann::json& j) {
  AttackReport r;
  r.schema_version = j.at("schema_version").get<int>();
  if (r.schema_version != kReportSchemaVersion)
    throw std::invalid_argument("unsupported report schema_version " + std::to_string(r.schema_version));
  r.config = attack_config_from_json(j.at("config"));
  const auto& sizes = j.at("sizes");
  r.train_size = sizes.at("train").get<std::size_t>();
  r.dev_size = sizes.at("dev").get<std::size_t>();
  r.test_size = sizes.at("test").get<std::size_t>();
  r.poison_size = sizes.at("poison").get<std::size_t>();
  r.target = target_from_json(j.at("target_tokens"));
  r.target_rendered = j.at("target_tokens_rendered").get<std::vector<std::string>>();
  for (const auto& e : j.at("epochs")) r.epochs.push_back(epoch_from_json(e));
  r.prompt = prompt_artifact_from_json(j.at("prompt"));
  r.trigger = trigger_from_json(j.at("trigger"));
  r.trigger_rendered = j.at("trigger_rendered").get<std::vector<std::string>>();
  r.test_accuracy = j.at("test_accuracy").get<double>();
  r.test_asr = j.at("test_asr").get<double>();
  r.base_asr = j.at("base_asr").get<double>();
  r.aborted = j.at("aborted").get<bool>();
  r.abort_reason = j.at("abort_reason").get<std::string>();
  r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  return r;
}

// ---------------------------------------------------------------------------
// Attack
// ---------------------------------------------------------------------------

/// The data one attack run works on, fixed by the config's fractions and seed.
struct AttackData {
  Dataset train;  // D_c ∪ D_p, poisoned members flagged
  Dataset clean;  // D_c
  Dataset poison;  // D_p
  Dataset dev;
  Dataset test;
};

inline AttackData prepare_attack_data(const Dataset& corpus, const AttackConfig& config) {
  const auto split = split_train_dev_test(corpus, config.dev_fraction, config.test_fraction, config.seed);
  const auto poison = split_poison(split.train, config.poison_ratio, config.seed + 1);
  AttackData d;
  d.clean = poison.clean;
  d.poison = poison.poison;
  d.train = split.train;
  for (std::size_t i : poison.poison_indices) d.train[i].poisoned = true;
  d.dev = split.dev;
  d.test = split.test;
  require(!d.clean.empty() && !d.dev.empty() && !d.test.empty(), "corpus too small for the configured splits");
  return d;
}

/// Most frequent token of `data` that is neither reserved nor a label word;
/// ties go to the lower id.
inline TokenId most_frequent_neutral_token(const Dataset& data, const Verbalizer& verbalizer) {
  const auto words = verbalizer.all_words();
  std::map<TokenId, std::size_t> counts;
  for (const auto& ex : data)
    for (TokenId t : ex.query)
      if (!Vocabulary::is_reserved(t) && !std::binary_search(words.begin(), words.end(), t)) ++counts[t];
  require(!counts.empty(), "no neutral token available for trigger initialization");
  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it)
    if (it->second > best->second) best = it;
  return best->first;
}

template <class S>
double compute_accuracy(const MaskedLM<S>& model, const Template& base, const Prompt<S>& prompt, const Dataset& clean,
                        const Verbalizer& verbalizer) {
  return classification_accuracy(model, base, prompt, clean, verbalizer);
}

namespace detail {

inline Dataset sample_batch(const Dataset& from, int size, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, from.size() - 1);
  Dataset out;
  out.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) out.push_back(from[pick(rng)]);
  return out;
}

inline std::vector<std::string> render_all(const Vocabulary& vocab, const std::vector<TokenId>& ids) {
  std::vector<std::string> out;
  for (TokenId t : ids) out.push_back(vocab.token(t));
  return out;
}

}  // namespace detail

/// Runs the bi-level attack against a frozen model. Each epoch tunes the
/// prompt for `inner_steps` on D_c ∪ D_p, accumulates the trigger gradient
/// of L_b over `inner_steps` poison batches, and picks the next trigger by
/// ASR among HotFlip candidates. With poison_ratio 0 the trigger steps are
/// skipped and the run is plain prompt tuning.
template <class S>
AttackReport run_attack(const MaskedLM<S>& model, const Dataset& corpus, const Verbalizer& verbalizer,
                        const AttackConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  verbalizer.validate(model.vocab_size());
  const AttackData data = prepare_attack_data(corpus, config);
  const Vocabulary& vocab = model.vocabulary();

  AttackReport report;
  report.config = config;
  report.train_size = data.train.size();
  report.dev_size = data.dev.size();
  report.test_size = data.test.size();
  report.poison_size = data.poison.size();

  const Template base = Template::cloze(config.prompt_length);
  std::mt19937_64 rng(config.seed + 2);
  Prompt<S> prompt = config.prompt_kind == PromptKind::soft
                         ? Prompt<S>{init_soft_prompt(model, config.prompt_length, config.seed + 3)}
                         : Prompt<S>{init_hard_prompt(model.vocab_size(), config.prompt_length, config.seed + 3)};

  const Index k = config.target_k > 0 ? config.target_k : static_cast<Index>(verbalizer.total_words());
  report.target = retrieve_target_tokens(model, base, prompt, data.clean, verbalizer, k, config.target_top_up);
  report.target_rendered = detail::render_all(vocab, report.target.tokens);

  PoisonContext poison;
  poison.trigger = {std::vector<TokenId>(static_cast<std::size_t>(config.trigger_length),
                                         most_frequent_neutral_token(data.train, verbalizer)),
                    config.trigger_position};
  poison.target_tokens = report.target.tokens;
  poison.supervision = config.poison_supervision;
  const bool attacking = !data.poison.empty();
  const Dataset& selection_set = config.literal_paper_mode ? data.test : data.dev;
  report.base_asr = asr(model, base, prompt, poison.trigger, data.test, poison.target_tokens, config.asr_mode);

  auto finish = [&]() {
    report.prompt = PromptArtifact::from(prompt);
    report.trigger = poison.trigger;
    report.trigger_rendered = detail::render_all(vocab, poison.trigger.tokens);
    report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };

  try {
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      EpochRecord rec;
      rec.epoch = epoch;

      // Lower level: tune the prompt on D_c ∪ D_p with the current trigger.
      double loss_sum = 0;
      for (int step = 0; step < config.inner_steps; ++step) {
        const Dataset batch = detail::sample_batch(data.train, config.batch_size, rng);
        if (auto* soft = std::get_if<SoftPrompt<S>>(&prompt)) {
          auto next = soft_prompt_step(model, base, *soft, batch, verbalizer, static_cast<S>(config.learning_rate), &poison);
          loss_sum += static_cast<double>(next.loss);
          *soft = std::move(next.prompt);
        } else {
          auto& hard = std::get<HardPrompt>(prompt);
          const Index slot = static_cast<Index>(epoch * config.inner_steps + step) % hard.length();
          auto [next, loss] = hard_prompt_step(model, base, hard, batch, verbalizer, config.candidate_k, slot, &poison);
          if (!std::isfinite(static_cast<double>(loss))) throw NonFiniteError("non-finite prompt loss");
          loss_sum += static_cast<double>(loss);
          hard = std::move(next);
        }
      }
      rec.prompt_loss = loss_sum / config.inner_steps;
      if (!std::isfinite(rec.prompt_loss)) throw NonFiniteError("non-finite prompt loss at epoch " + std::to_string(epoch));

      // Upper level: accumulate dL_b over poison batches, then choose the
      // trigger with the best ASR.
      if (attacking) {
        std::vector<Dataset> batches;
        const int poison_batch = std::min<int>(config.batch_size, static_cast<int>(data.poison.size()));
        for (int step = 0; step < config.inner_steps; ++step)
          batches.push_back(detail::sample_batch(data.poison, poison_batch, rng));
        double lb = 0;
        GradientAccumulator<S> acc;
        for (const auto& b : batches) {
          const auto g = trigger_gradient(model, base, prompt, b, poison.trigger, poison.target_tokens);
          acc.add(g.gradient);
          lb += static_cast<double>(g.loss);
        }
        rec.backdoor_loss = lb / config.inner_steps;
        if (!std::isfinite(rec.backdoor_loss))
          throw NonFiniteError("non-finite backdoor loss at epoch " + std::to_string(epoch));
        rec.candidates = candidate_tokens<S>(acc.mean(), model.embedding_table(), config.candidate_k);
        auto chosen = select_trigger(model, base, prompt, rec.candidates, poison.trigger, selection_set,
                                     poison.target_tokens, config.asr_mode);
        poison.trigger = chosen.trigger;
        rec.asr = chosen.asr;
        rec.evaluations = std::move(chosen.evaluations);
      } else {
        rec.asr = asr(model, base, prompt, poison.trigger, selection_set, poison.target_tokens, config.asr_mode);
      }
      rec.trigger = poison.trigger.tokens;
      rec.clean_accuracy = compute_accuracy(model, base, prompt, data.dev, verbalizer);
      rec.prompt = PromptArtifact::from(prompt);
      report.epochs.push_back(std::move(rec));
    }
  } catch (const NonFiniteError& e) {
    report.aborted = true;
    report.abort_reason = e.what();
    finish();
    return report;
  }

  report.test_accuracy = compute_accuracy(model, base, prompt, data.test, verbalizer);
  report.test_asr = asr(model, base, prompt, poison.trigger, data.test, poison.target_tokens, config.asr_mode);
  finish();
  return report;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

struct FidelityReport {
  std::vector<std::uint64_t> seeds;
  std::vector<AttackReport> clean_runs;
  std::vector<AttackReport> backdoored_runs;
  double clean_accuracy = 0;       // mean over seeds
  double backdoored_accuracy = 0;  // mean over seeds
  double backdoored_asr = 0;
  double accuracy_drop = 0;        // clean - backdoored, fraction

  bool operator==(const FidelityReport&) const = default;
};

/// Clean arm (poison_ratio 0) and backdoored arm with identical splits, step
/// budgets and prompt initialization, per seed.
template <class S>
FidelityReport run_fidelity_experiment(const MaskedLM<S>& model, const Dataset& corpus, const Verbalizer& verbalizer,
                                       const AttackConfig& config, const std::vector<std::uint64_t>& seeds) {
  require(!seeds.empty(), "fidelity experiment needs at least one seed");
  FidelityReport out;
  out.seeds = seeds;
  for (std::uint64_t seed : seeds) {
    AttackConfig backdoored = config;
    backdoored.seed = seed;
    AttackConfig clean = backdoored;
    clean.poison_ratio = 0.0;
    out.clean_runs.push_back(run_attack(model, corpus, verbalizer, clean));
    out.backdoored_runs.push_back(run_attack(model, corpus, verbalizer, backdoored));
    const auto& a = out.clean_runs.back();
    const auto& b = out.backdoored_runs.back();
    if (a.test_size != b.test_size || a.train_size != b.train_size || a.config.epochs != b.config.epochs ||
        a.config.inner_steps != b.config.inner_steps)
      throw std::logic_error("fidelity arms differ in data or budget");
  }
  const double n = static_cast<double>(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    out.clean_accuracy += out.clean_runs[i].test_accuracy / n;
    out.backdoored_accuracy += out.backdoored_runs[i].test_accuracy / n;
    out.backdoored_asr += out.backdoored_runs[i].test_asr / n;
  }
  out.accuracy_drop = out.clean_accuracy - out.backdoored_accuracy;
  return out;
}

struct SweepRow {
  Index trigger_length = 0;
  double accuracy = 0;
  double asr = 0;

  bool operator==(const SweepRow&) const = default;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::vector<AttackReport> runs;

  bool operator==(const SweepReport&) const = default;
};

template <class S>
SweepReport run_robustness_sweep(const MaskedLM<S>& model, const Dataset& corpus, const Verbalizer& verbalizer,
                                 const AttackConfig& config, const std::vector<Index>& sizes) {
  if (sizes.empty()) throw std::invalid_argument("sweep needs at least one trigger size");
  SweepReport out;
  for (Index n : sizes) {
    AttackConfig c = config;
    c.trigger_length = n;
    out.runs.push_back(run_attack(model, corpus, verbalizer, c));
    out.rows.push_back({n, out.runs.back().test_accuracy, out.runs.back().test_asr});
  }
  return out;
}

inline nlohmann::json to_json(const FidelityReport& f) {
  auto clean = nlohmann::json::array(), backdoored = nlohmann::json::array();
  for (const auto& r : f.clean_runs) clean.push_back(to_json(r));
  for (const auto& r : f.backdoored_runs) backdoored.push_back(to_json(r));
  return {{"schema_version", kReportSchemaVersion},
          {"seeds", f.seeds},
          {"clean_accuracy", f.clean_accuracy},
          {"backdoored_accuracy", f.backdoored_accuracy},
          {"backdoored_asr", f.backdoored_asr},
          {"accuracy_drop", f.accuracy_drop},
          {"clean_runs", clean},
          {"backdoored_runs", backdoored}};
}

inline nlohmann::json to_json(const SweepReport& s) {
  auto rows = nlohmann::json::array(), runs = nlohmann::json::array();
  for (const auto& r : s.rows) rows.push_back({{"trigger_length", r.trigger_length}, {"accuracy", r.accuracy}, {"asr", r.asr}});
  for (const auto& r : s.runs) runs.push_back(to_json(r));
  return {{"schema_version", kReportSchemaVersion}, {"rows", rows}, {"runs", runs}};
}

inline SweepReport sweep_report_from_json(const nlohmann::json& j) {
  SweepReport s;
  for (const auto& r : j.at("rows"))
    s.rows.push_back({r.at("trigger_length").get<Index>(), r.at("accuracy").get<double>(), r.at("asr").get<double>()});
  for (const auto& r : j.at("runs")) s.runs.push_back(attack_report_from_json(r));
  return s;
}

inline FidelityReport fidelity_report_from_json(const nlohmann::json& j) {
  FidelityReport f;
  f.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  f.clean_accuracy = j.at("clean_accuracy").get<double>();
  f.backdoored_accuracy = j.at("backdoored_accuracy").get<double>();
  f.backdoored_asr = j.at("backdoored_asr").get<double>();
  f.accuracy_drop = j.at("accuracy_drop").get<double>();
  for (const auto& r : j.at("clean_runs")) f.clean_runs.push_back(attack_report_from_json(r));
  for (const auto& r : j.at("backdoored_runs")) f.backdoored_runs.push_back(attack_report_from_json(r));
  return f;
}

}  // namespace poisonprompt
