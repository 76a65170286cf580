#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "poisonprompt/checkpoint.hpp"
#include "poisonprompt/corpus.hpp"
#include "poisonprompt/harness.hpp"
#include "poisonprompt/pretrain.hpp"

namespace poisonprompt {

/// Field-level configuration problem; `what()` starts with the dotted path.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Overrides applied to the task corpus spec to get the pretraining corpus.
/// Vocabulary and keyword pools are shared.
struct PretrainCorpusSpec {
  int examples_per_class = 1000;
  int min_keywords = 2;
  int max_keywords = 4;
  int max_length = 32;
  std::uint64_t seed = 101;

  bool operator==(const PretrainCorpusSpec&) const = default;
};

struct ExperimentConfig {
  CorpusSpec corpus;
  PretrainCorpusSpec pretrain_corpus;
  ModelConfig model;
  PretrainConfig pretrain;
  std::uint64_t model_init_seed = 5;
  AttackConfig attack;
  /// Label words per class, taken from the front of each keyword pool.
  int label_words_per_class = 2;
  std::vector<std::uint64_t> fidelity_seeds{1, 2, 3};
  std::vector<Index> sweep_sizes{1, 3, 5};
  std::string output_dir = "runs/default";

  [[nodiscard]] CorpusSpec pretrain_corpus_spec() const {
    CorpusSpec s = corpus;
    s.examples_per_class = pretrain_corpus.examples_per_class;
    s.min_keywords = pretrain_corpus.min_keywords;
    s.max_keywords = pretrain_corpus.max_keywords;
    s.max_length = pretrain_corpus.max_length;
    s.seed = pretrain_corpus.seed;
    return s;
  }

  [[nodiscard]] Verbalizer verbalizer() const {
    Verbalizer v;
    for (const auto& pool : keyword_pools(corpus)) {
      require(static_cast<int>(pool.size()) >= label_words_per_class, "keyword pool smaller than label_words_per_class");
      v.label_words.emplace_back(pool.begin(), pool.begin() + label_words_per_class);
    }
    return v;
  }
};

namespace detail {

using Setter = std::function<void(const nlohmann::json&)>;

/// Applies `setters` to the members of `j`, rejecting unknown keys and
/// reporting the dotted path of any bad value.
inline void read_section(const nlohmann::json& j, const std::string& where, const std::map<std::string, Setter>& setters) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(path + ": unknown key");
    try {
      it->second(value);
    } catch (const ConfigError&) {
      throw;
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path + ": wrong type " + std::string(value.type_name()));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
}

template <class T>
Setter set(T& target) {
  return [&target](const nlohmann::json& v) { target = v.get<T>(); };
}

}  // namespace detail

inline nlohmann::json to_json(const CorpusSpec& s) {
  nlohmann::json j{{"num_classes", s.num_classes},       {"examples_per_class", s.examples_per_class},
                   {"vocab_size", s.vocab_size},         {"keywords_per_class", s.keywords_per_class},
                   {"min_length", s.min_length},         {"max_length", s.max_length},
                   {"min_keywords", s.min_keywords},     {"max_keywords", s.max_keywords},
                   {"filler_zipf_exponent", s.filler_zipf_exponent}, {"seed", s.seed}};
  if (!s.keyword_pools.empty()) j["keyword_pools"] = s.keyword_pools;
  return j;
}

inline nlohmann::json to_json(const PretrainConfig& p) {
  return {{"steps", p.steps},
          {"batch_size", p.batch_size},
          {"learning_rate", p.learning_rate},
          {"mask_probability", p.mask_probability},
          {"warmup_steps", p.warmup_steps},
          {"grad_clip", p.grad_clip},
          {"beta1", p.beta1},
          {"beta2", p.beta2},
          {"adam_eps", p.adam_eps},
          {"seed", p.seed}};
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  auto model = to_json(c.model);
  model.erase("vocab_size");
  auto pretrain = to_json(c.pretrain);
  pretrain["init_seed"] = c.model_init_seed;
  return {{"corpus", to_json(c.corpus)},
          {"pretrain_corpus",
           {{"examples_per_class", c.pretrain_corpus.examples_per_class},
            {"min_keywords", c.pretrain_corpus.min_keywords},
            {"max_keywords", c.pretrain_corpus.max_keywords},
            {"max_length", c.pretrain_corpus.max_length},
            {"seed", c.pretrain_corpus.seed}}},
          {"model", model},
          {"pretrain", pretrain},
          {"attack", to_json(c.attack)},
          {"label_words_per_class", c.label_words_per_class},
          {"fidelity_seeds", c.fidelity_seeds},
          {"sweep_sizes", c.sweep_sizes},
          {"output_dir", c.output_dir}};
}

/// Parses and validates an experiment config. The corpus, model, pretrain
/// and attack sections are required; other keys have defaults. Unknown keys
/// are errors everywhere.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  using detail::read_section;
  using detail::set;
  if (!j.is_object()) throw ConfigError("config: expected a JSON object at the top level");
  for (const char* section : {"corpus", "model", "pretrain", "attack"})
    if (!j.contains(section)) throw ConfigError(std::string(section) + ": missing required section");

  ExperimentConfig c;
  auto& s = c.corpus;
  auto& m = c.model;
  auto& p = c.pretrain;
  auto& pc = c.pretrain_corpus;
  read_section(j, "",
               {{"corpus",
                 [&](const nlohmann::json& v) {
                   read_section(v, "corpus",
                                {{"num_classes", set(s.num_classes)},
                                 {"examples_per_class", set(s.examples_per_class)},
                                 {"vocab_size", set(s.vocab_size)},
                                 {"keywords_per_class", set(s.keywords_per_class)},
                                 {"keyword_pools", set(s.keyword_pools)},
                                 {"min_length", set(s.min_length)},
                                 {"max_length", set(s.max_length)},
                                 {"min_keywords", set(s.min_keywords)},
                                 {"max_keywords", set(s.max_keywords)},
                                 {"filler_zipf_exponent", set(s.filler_zipf_exponent)},
                                 {"seed", set(s.seed)}});
                 }},
                {"pretrain_corpus",
                 [&](const nlohmann::json& v) {
                   read_section(v, "pretrain_corpus",
                                {{"examples_per_class", set(pc.examples_per_class)},
                                 {"min_keywords", set(pc.min_keywords)},
                                 {"max_keywords", set(pc.max_keywords)},
                                 {"max_length", set(pc.max_length)},
                                 {"seed", set(pc.seed)}});
                 }},
                {"model",
                 [&](const nlohmann::json& v) {
                   read_section(v, "model",
                                {{"d_model", set(m.d_model)},
                                 {"num_heads", set(m.num_heads)},
                                 {"num_layers", set(m.num_layers)},
                                 {"ffn_dim", set(m.ffn_dim)},
                                 {"max_length", set(m.max_length)},
                                 {"tie_head", set(m.tie_head)},
                                 {"init_std", set(m.init_std)},
                                 {"embedding_init_std", set(m.embedding_init_std)},
                                 {"layer_norm_eps", set(m.layer_norm_eps)}});
                 }},
                {"pretrain",
                 [&](const nlohmann::json& v) {
                   read_section(v, "pretrain",
                                {{"steps", set(p.steps)},
                                 {"batch_size", set(p.batch_size)},
                                 {"learning_rate", set(p.learning_rate)},
                                 {"mask_probability", set(p.mask_probability)},
                                 {"warmup_steps", set(p.warmup_steps)},
                                 {"grad_clip", set(p.grad_clip)},
                                 {"beta1", set(p.beta1)},
                                 {"beta2", set(p.beta2)},
                                 {"adam_eps", set(p.adam_eps)},
                                 {"seed", set(p.seed)},
                                 {"init_seed", set(c.model_init_seed)}});
                 }},
                {"attack",
                 [&](const nlohmann::json& v) {
                   try {
                     c.attack = attack_config_from_json(v, "attack");
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(e.what());
                   }
                 }},
                {"label_words_per_class", set(c.label_words_per_class)},
                {"fidelity_seeds", set(c.fidelity_seeds)},
                {"sweep_sizes", set(c.sweep_sizes)},
                {"output_dir", set(c.output_dir)}});

  c.model.vocab_size = c.corpus.vocab_size;
  auto check = [](const std::string& where, const auto& fn) {
    try {
      fn();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + ": " + e.what());
    }
  };
  check("corpus", [&] { validate(c.corpus); });
  check("pretrain_corpus", [&] { validate(c.pretrain_corpus_spec()); });
  check("model", [&] { c.model.validate(); });
  check("attack", [&] { c.attack.validate(); });
  if (c.pretrain_corpus.max_length > c.model.max_length)
    throw ConfigError("pretrain_corpus.max_length: exceeds model.max_length");
  if (c.label_words_per_class < 1) throw ConfigError("label_words_per_class: must be at least 1");
  check("label_words_per_class", [&] { c.verbalizer().validate(c.corpus.vocab_size); });
  if (c.fidelity_seeds.empty()) throw ConfigError("fidelity_seeds: must not be empty");
  if (c.sweep_sizes.empty()) throw ConfigError("sweep_sizes: must not be empty");
  Index longest_trigger = c.attack.trigger_length;
  for (Index n : c.sweep_sizes) {
    if (n < 1) throw ConfigError("sweep_sizes: sizes must be at least 1");
    longest_trigger = std::max(longest_trigger, n);
  }
  if (c.corpus.max_length + c.attack.prompt_length + longest_trigger + 1 > c.model.max_length)
    throw ConfigError("model.max_length: too short for corpus.max_length + prompt + trigger + mask");
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": malformed JSON (" + e.what() + ")");
  }
  return experiment_config_from_json(j);
}

}  // namespace poisonprompt
