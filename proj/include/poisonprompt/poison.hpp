#pragma once

#include <set>
#include <vector>

#include "poisonprompt/common.hpp"
#include "poisonprompt/corpus.hpp"
#include "poisonprompt/model.hpp"
#include "poisonprompt/prompt.hpp"

namespace poisonprompt {

/// Target tokens V_t with the aggregate mask score each was ranked by.
struct TargetTokenSet {
  std::vector<TokenId> tokens;
  std::vector<double> scores;
  Index k = 0;
  bool top_up = true;

  [[nodiscard]] bool contains(TokenId t) const {
    return std::find(tokens.begin(), tokens.end(), t) != tokens.end();
  }
  bool operator==(const TargetTokenSet&) const = default;
};

/// Ranks tokens by `mean_scores`, takes the top k, and drops label words and
/// reserved tokens. With `top_up`, ranks k+1, k+2, ... refill the set to k.
inline TargetTokenSet rank_target_tokens(const RowVector<double>& mean_scores, const Verbalizer& verbalizer, Index k,
                                         bool top_up = true) {
  require(k >= 1, "k must be at least 1");
  const auto words = verbalizer.all_words();
  const std::set<TokenId> excluded(words.begin(), words.end());
  auto eligible = [&](Index t) {
    return !Vocabulary::is_reserved(static_cast<TokenId>(t)) && !excluded.count(static_cast<TokenId>(t));
  };
  TargetTokenSet out;
  out.k = k;
  out.top_up = top_up;
  const auto ranked = top_k_indices(mean_scores, top_up ? mean_scores.size() : k);
  for (Index t : ranked) {
    if (static_cast<Index>(out.tokens.size()) == k) break;
    if (!eligible(t)) continue;
    out.tokens.push_back(static_cast<TokenId>(t));
    out.scores.push_back(mean_scores[t]);
  }
  if (out.tokens.empty()) throw Error("no target tokens remain after removing label words and reserved tokens");
  return out;
}

/// Arithmetic mean over `clean` of the mask-position score vectors under
/// `prompt`, evaluated without any trigger.
template <class S>
RowVector<double> mean_mask_scores(const MaskedLM<S>& model, const Template& base, const Prompt<S>& prompt,
                                   const Dataset& clean) {
  require(!clean.empty(), "target retrieval needs a non-empty clean set");
  const Template tmpl = base.without_trigger();
  constexpr std::size_t kChunks = 8;
  const RowVector<double> zero = RowVector<double>::Zero(model.vocab_size());
  RowVector<double> total = parallel_chunk_sum(clean.size(), kChunks, zero, [&](std::size_t i, RowVector<double>& acc) {
    acc += mask_scores(model, assemble(model, clean[i], tmpl, prompt)).template cast<double>();
  });
  return total / static_cast<double>(clean.size());
}

/// V_t: the k tokens the prompted model already scores highest at the mask
/// on clean data, excluding every class's label words.
template <class S>
TargetTokenSet retrieve_target_tokens(const MaskedLM<S>& model, const Template& base, const Prompt<S>& prompt,
                                      const Dataset& clean, const Verbalizer& verbalizer, Index k,
                                      bool top_up = true) {
  return rank_target_tokens(mean_mask_scores(model, base, prompt, clean), verbalizer, k, top_up);
}

/// Flags `example` as carrying the trigger; the trigger tokens themselves
/// are inserted at assembly time so they can change during the attack.
inline ClozeExample poison_example(const ClozeExample& example, const TriggerSpec& trigger,
                                   const std::vector<TokenId>& target_tokens) {
  if (example.poisoned) throw std::invalid_argument("example is already poisoned");
  require(trigger.length() >= 1, "trigger must have at least one token");
  require(!target_tokens.empty(), "target token set is empty");
  ClozeExample out = example;
  out.poisoned = true;
  return out;
}

}  // namespace poisonprompt
