#pragma once

#include <filesystem>
#include <map>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonprompt/common.hpp"
#include "poisonprompt/vocabulary.hpp"

namespace poisonprompt {

struct ClozeExample {
  std::vector<TokenId> query;
  int label = 0;
  bool poisoned = false;

  bool operator==(const ClozeExample&) const = default;
};

using Dataset = std::vector<ClozeExample>;

/// Checks the ClozeExample invariants against a vocabulary size and class count.
inline void validate_dataset(const Dataset& data, Index vocab_size, int num_classes) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    const std::string where = "example " + std::to_string(i);
    require(!ex.query.empty(), where + ": empty query");
    for (TokenId t : ex.query)
      require(t >= 0 && t < vocab_size, where + ": token id " + std::to_string(t) + " out of range");
    require(ex.label >= 0 && ex.label < num_classes,
            where + ": label " + std::to_string(ex.label) + " out of range");
  }
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Desk-scale stand-in for a sentence classification task: each sentence is
/// filler drawn from a Zipf distribution with one or more keywords from its
/// class's pool mixed in at random positions.
struct CorpusSpec {
  int num_classes = 2;
  int examples_per_class = 500;
  Index vocab_size = 2000;
  int keywords_per_class = 24;
  /// Explicit pools; when empty, class c gets a contiguous block of ids
  /// right after the reserved tokens.
  std::vector<std::vector<TokenId>> keyword_pools;
  int min_length = 8;
  int max_length = 16;
  int min_keywords = 1;
  int max_keywords = 3;
  double filler_zipf_exponent = 1.0;
  std::uint64_t seed = 7;
};

inline std::vector<std::vector<TokenId>> keyword_pools(const CorpusSpec& spec) {
  if (!spec.keyword_pools.empty()) return spec.keyword_pools;
  std::vector<std::vector<TokenId>> pools(static_cast<std::size_t>(spec.num_classes));
  TokenId next = Vocabulary::kNumReserved;
  for (auto& pool : pools)
    for (int j = 0; j < spec.keywords_per_class; ++j) pool.push_back(next++);
  return pools;
}

inline void validate(const CorpusSpec& spec) {
  require(spec.num_classes >= 2, "corpus needs at least 2 classes");
  require(spec.examples_per_class >= 0, "examples_per_class must be non-negative");
  require(spec.min_length >= 1 && spec.min_length <= spec.max_length, "invalid sentence length range");
  require(spec.min_keywords >= 1 && spec.min_keywords <= spec.max_keywords,
          "invalid keyword count range");
  require(spec.max_keywords <= spec.min_length, "max_keywords cannot exceed min_length");
  require(spec.filler_zipf_exponent >= 0.0, "filler_zipf_exponent must be non-negative");
  const auto pools = keyword_pools(spec);
  require(static_cast<int>(pools.size()) == spec.num_classes, "need one keyword pool per class");
  std::set<TokenId> seen;
  for (std::size_t c = 0; c < pools.size(); ++c) {
    require(!pools[c].empty(), "keyword pool for class " + std::to_string(c) + " is empty");
    for (TokenId t : pools[c]) {
      require(t >= Vocabulary::kNumReserved && t < spec.vocab_size,
              "keyword id " + std::to_string(t) + " is reserved or out of range");
      require(seen.insert(t).second,
              "overlapping keyword pools: token " + std::to_string(t) + " appears in more than one class");
    }
  }
  require(spec.vocab_size > static_cast<Index>(seen.size()) + Vocabulary::kNumReserved,
          "vocabulary has no room for filler tokens");
}

/// Non-reserved, non-keyword ids in Zipf rank order (rank 0 is most frequent).
inline std::vector<TokenId> filler_tokens(const CorpusSpec& spec) {
  std::set<TokenId> keywords;
  for (const auto& pool : keyword_pools(spec)) keywords.insert(pool.begin(), pool.end());
  std::vector<TokenId> out;
  for (TokenId t = Vocabulary::kNumReserved; t < spec.vocab_size; ++t)
    if (!keywords.contains(t)) out.push_back(t);
  return out;
}

/// Keywords render as "c<class>_k<j>", filler as "w<id>".
inline Vocabulary make_vocabulary(const CorpusSpec& spec) {
  validate(spec);
  std::vector<std::string> names(static_cast<std::size_t>(spec.vocab_size));
  const auto& reserved = Vocabulary::reserved_names();
  std::copy(reserved.begin(), reserved.end(), names.begin());
  for (TokenId t = Vocabulary::kNumReserved; t < spec.vocab_size; ++t)
    names[static_cast<std::size_t>(t)] = "w" + std::to_string(t);
  const auto pools = keyword_pools(spec);
  for (std::size_t c = 0; c < pools.size(); ++c)
    for (std::size_t j = 0; j < pools[c].size(); ++j)
      names[static_cast<std::size_t>(pools[c][j])] = "c" + std::to_string(c) + "_k" + std::to_string(j);
  return Vocabulary(std::move(names));
}

inline Dataset generate_synthetic_corpus(const CorpusSpec& spec) {
  validate(spec);
  const auto pools = keyword_pools(spec);
  const auto filler = filler_tokens(spec);

  std::vector<double> weights(filler.size());
  for (std::size_t r = 0; r < filler.size(); ++r)
    weights[r] = 1.0 / std::pow(static_cast<double>(r + 1), spec.filler_zipf_exponent);
  std::discrete_distribution<std::size_t> filler_dist(weights.begin(), weights.end());

  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> length_dist(spec.min_length, spec.max_length);
  std::uniform_int_distribution<int> count_dist(spec.min_keywords, spec.max_keywords);

  Dataset out;
  out.reserve(static_cast<std::size_t>(spec.num_classes) * static_cast<std::size_t>(spec.examples_per_class));
  for (int i = 0; i < spec.examples_per_class; ++i) {
    for (int c = 0; c < spec.num_classes; ++c) {
      const auto& pool = pools[static_cast<std::size_t>(c)];
      std::uniform_int_distribution<std::size_t> keyword_dist(0, pool.size() - 1);
      ClozeExample ex;
      ex.label = c;
      const int length = length_dist(rng);
      ex.query.resize(static_cast<std::size_t>(length));
      for (auto& t : ex.query) t = filler[filler_dist(rng)];
      std::vector<std::size_t> slots(ex.query.size());
      std::iota(slots.begin(), slots.end(), std::size_t{0});
      std::shuffle(slots.begin(), slots.end(), rng);
      const int keywords = count_dist(rng);
      for (int k = 0; k < keywords; ++k) ex.query[slots[static_cast<std::size_t>(k)]] = pool[keyword_dist(rng)];
      out.push_back(std::move(ex));
    }
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct PoisonSplit {
  Dataset clean;
  Dataset poison;
  double poison_ratio = 0.0;
  /// Positions of each member in the source dataset, ascending.
  std::vector<std::size_t> clean_indices;
  std::vector<std::size_t> poison_indices;
};

inline std::size_t poison_count(std::size_t total, double ratio) {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
}

/// Uniform (or per-class stratified) partition of `data` into clean and
/// poison parts; poison members come back flagged.
inline PoisonSplit split_poison(const Dataset& data, double poison_ratio, std::uint64_t seed,
                                bool stratified = false) {
  require(poison_ratio >= 0.0 && poison_ratio <= 1.0, "poison_ratio must lie in [0, 1]");
  const std::size_t target = poison_count(data.size(), poison_ratio);
  std::mt19937_64 rng(seed);
  std::vector<char> chosen(data.size(), 0);

  if (!stratified) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < target; ++i) chosen[order[i]] = 1;
  } else {
    // Largest-remainder allocation keeps the total exact.
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < data.size(); ++i) by_class[data[i].label].push_back(i);
    std::vector<std::pair<double, int>> remainders;
    std::map<int, std::size_t> quota;
    std::size_t assigned = 0;
    for (auto& [label, members] : by_class) {
      const double exact = poison_ratio * static_cast<double>(members.size());
      quota[label] = static_cast<std::size_t>(std::floor(exact));
      assigned += quota[label];
      remainders.emplace_back(exact - std::floor(exact), label);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < target && i < remainders.size(); ++i, ++assigned)
      ++quota[remainders[i].second];
    for (auto& [label, members] : by_class) {
      std::shuffle(members.begin(), members.end(), rng);
      for (std::size_t i = 0; i < quota[label]; ++i) chosen[members[i]] = 1;
    }
  }

  PoisonSplit split;
  split.poison_ratio = poison_ratio;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (chosen[i]) {
      split.poison.push_back(data[i]);
      split.poison.back().poisoned = true;
      split.poison_indices.push_back(i);
    } else {
      split.clean.push_back(data[i]);
      split.clean_indices.push_back(i);
    }
  }
  return split;
}

struct EvaluationSplit {
  Dataset train;
  Dataset dev;
  Dataset test;
};

/// Shuffled train / attack-dev / test partition with rounded sizes.
inline EvaluationSplit split_train_dev_test(const Dataset& data, double dev_fraction,
                                            double test_fraction, std::uint64_t seed) {
  require(dev_fraction >= 0.0 && test_fraction >= 0.0 && dev_fraction + test_fraction <= 1.0,
          "dev/test fractions must be non-negative and sum to at most 1");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_dev = poison_count(data.size(), dev_fraction);
  const std::size_t n_test = poison_count(data.size(), test_fraction);
  EvaluationSplit out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& ex = data[order[i]];
    if (i < n_dev) out.dev.push_back(ex);
    else if (i < n_dev + n_test) out.test.push_back(ex);
    else out.train.push_back(ex);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL serialization
// ---------------------------------------------------------------------------

inline constexpr int kDatasetSchemaVersion = 1;

class DatasetError : public Error {
 public:
  DatasetError(std::size_t line, const std::string& message)
      : Error("line " + std::to_string(line) + ": " + message), line_(line) {}
  [[nodiscard]] std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline nlohmann::json to_json_line(const ClozeExample& ex) {
  return {{"schema_version", kDatasetSchemaVersion},
          {"tokens", ex.query},
          {"label", ex.label},
          {"poisoned", ex.poisoned}};
}

inline void write_dataset(const Dataset& data, std::ostream& out) {
  for (const auto& ex : data) out << to_json_line(ex).dump() << '\n';
}

inline void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_dataset(data, out);
  if (!out) throw Error("failed writing " + path.string());
}

inline Dataset read_dataset(std::istream& in) {
  Dataset out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DatasetError(number, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw DatasetError(number, "expected a JSON object");
    for (const char* field : {"schema_version", "tokens", "label", "poisoned"})
      if (!j.contains(field)) throw DatasetError(number, std::string("missing field '") + field + "'");
    if (!j["schema_version"].is_number_integer())
      throw DatasetError(number, "schema_version must be an integer");
    const int version = j["schema_version"].get<int>();
    if (version != kDatasetSchemaVersion)
      throw DatasetError(number, "unknown schema version " + std::to_string(version));
    ClozeExample ex;
    const auto& tokens = j["tokens"];
    if (!tokens.is_array()) throw DatasetError(number, "'tokens' must be an array");
    for (const auto& t : tokens) {
      if (!t.is_number_integer()) throw DatasetError(number, "'tokens' must hold integers");
      ex.query.push_back(t.get<TokenId>());
    }
    if (!j["label"].is_number_integer()) throw DatasetError(number, "'label' must be an integer");
    if (!j["poisoned"].is_boolean()) throw DatasetError(number, "'poisoned' must be a boolean");
    ex.label = j["label"].get<int>();
    ex.poisoned = j["poisoned"].get<bool>();
    out.push_back(std::move(ex));
  }
  return out;
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return read_dataset(in);
}

}  // namespace poisonprompt
