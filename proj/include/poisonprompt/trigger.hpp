#pragma once

#include <vector>

#include "poisonprompt/common.hpp"
#include "poisonprompt/corpus.hpp"
#include "poisonprompt/model.hpp"
#include "poisonprompt/prompt.hpp"

namespace poisonprompt {

/// Trigger tokens placed on every example of `batch` (the poisoned flag is
/// ignored) and the template used for them.
template <class S>
std::vector<AssembledInput<S>> assemble_triggered(const MaskedLM<S>& model, const Template& base,
                                                  const Prompt<S>& prompt, const Dataset& batch,
                                                  const TriggerSpec& trigger) {
  const Template tmpl = base.with_trigger(trigger.length(), trigger.position);
  std::vector<AssembledInput<S>> inputs(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) { inputs[i] = assemble(model, batch[i], tmpl, prompt, &trigger); });
  return inputs;
}

/// L_b: negative log of the mask probability mass on the target tokens with
/// the trigger present.
template <class S>
S backdoor_loss(const MaskedLM<S>& model, const Template& base, const Prompt<S>& prompt, const Dataset& batch,
                const TriggerSpec& trigger, const std::vector<TokenId>& target_tokens,
                Reduction reduction = Reduction::mean) {
  if (target_tokens.empty()) throw std::invalid_argument("target token set is empty");
  if (batch.empty()) throw std::invalid_argument("backdoor loss on an empty batch");
  const auto inputs = assemble_triggered(model, base, prompt, batch, trigger);
  std::vector<S> losses(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t i) { losses[i] = set_nll<S>(mask_scores(model, inputs[i]), target_tokens).value; });
  S total = 0;
  for (S l : losses) total += l;
  return reduction == Reduction::mean ? total / static_cast<S>(batch.size()) : total;
}

/// Batch-mean dL_b with respect to the embeddings in the trigger slots.
template <class S>
SlotGradient<S> trigger_gradient(const MaskedLM<S>& model, const Template& base, const Prompt<S>& prompt,
                                 const Dataset& batch, const TriggerSpec& trigger,
                                 const std::vector<TokenId>& target_tokens) {
  if (target_tokens.empty()) throw std::invalid_argument("target token set is empty");
  if (batch.empty()) throw std::invalid_argument("trigger gradient on an empty batch");
  const auto inputs = assemble_triggered(model, base, prompt, batch, trigger);
  return mean_slot_gradient(model, inputs, [&](std::size_t) { return target_tokens; }, SlotKind::trigger);
}

/// Running mean J of trigger-slot gradients.
template <class S>
class GradientAccumulator {
 public:
  void add(const Matrix<S>& gradient) {
    if (!gradient.allFinite()) throw NonFiniteError("non-finite trigger gradient at accumulation step " + std::to_string(steps_));
    if (steps_ == 0) sum_ = gradient;
    else {
      require(gradient.rows() == sum_.rows() && gradient.cols() == sum_.cols(), "trigger gradient shape changed");
      sum_ += gradient;
    }
    ++steps_;
  }

  [[nodiscard]] int steps() const { return steps_; }

  [[nodiscard]] Matrix<S> mean() const {
    if (steps_ == 0) throw std::logic_error("gradient accumulator is empty");
    return sum_ / static_cast<S>(steps_);
  }

 private:
  Matrix<S> sum_;
  int steps_ = 0;
};

/// J = mean over `batches` of dL_b/d(trigger embeddings).
template <class S>
GradientAccumulator<S> accumulate_trigger_gradient(const MaskedLM<S>& model, const Template& base,
                                                   const Prompt<S>& prompt, const std::vector<Dataset>& batches,
                                                   const TriggerSpec& trigger,
                                                   const std::vector<TokenId>& target_tokens) {
  require(!batches.empty(), "accumulation needs at least one batch");
  GradientAccumulator<S> acc;
  for (const auto& b : batches) acc.add(trigger_gradient(model, base, prompt, b, trigger, target_tokens).gradient);
  return acc;
}

struct CandidateSet {
  Index k = 0;
  std::vector<std::vector<TokenId>> tokens;  // per slot, best first
  std::vector<std::vector<double>> scores;

  bool operator==(const CandidateSet&) const = default;
};

/// Per slot s, the k tokens with the largest score(w) = -E[w] . J[s]
/// (or +E[w] . J[s] with `negate` false). Reserved tokens are skipped and
/// ties go to the lower id.
template <class S>
CandidateSet candidate_tokens(const Matrix<S>& accumulated, const Matrix<S>& embedding, Index k, bool negate = true) {
  require(k >= 1, "k must be at least 1");
  require(accumulated.cols() == embedding.cols(), "gradient width does not match the embedding table");
  CandidateSet out;
  out.k = k;
  const Matrix<S> raw = embedding * accumulated.transpose();  // |V| x N
  for (Index s = 0; s < accumulated.rows(); ++s) {
    const ColVector<S> score = negate ? ColVector<S>(-raw.col(s)) : ColVector<S>(raw.col(s));
    const auto idx = top_k_indices(score, k, [](Index i) { return !Vocabulary::is_reserved(static_cast<TokenId>(i)); });
    std::vector<TokenId> toks;
    std::vector<double> sc;
    for (Index i : idx) {
      toks.push_back(static_cast<TokenId>(i));
      sc.push_back(static_cast<double>(score[i]));
    }
    out.tokens.push_back(std::move(toks));
    out.scores.push_back(std::move(sc));
  }
  return out;
}

enum class AsrMode {
  argmax,  // argmax mask token lies in V_t
  mass,    // mean probability mass on V_t
};

/// Per-example attack outcome: 1/0 membership of the argmax token in V_t, or
/// the probability mass on V_t.
template <class S>
std::vector<double> asr_outcomes(const MaskedLM<S>& model, const Template& base, const Prompt<S>& prompt,
                                 const TriggerSpec& trigger, const Dataset& eval,
                                 const std::vector<TokenId>& target_tokens, AsrMode mode = AsrMode::argmax) {
  if (eval.empty()) throw std::invalid_argument("ASR of an empty set");
  if (target_tokens.empty()) throw std::invalid_argument("target token set is empty");
  const Template tmpl = base.with_trigger(trigger.length(), trigger.position);
  std::vector<double> out(eval.size());
  parallel_for(eval.size(), [&](std::size_t i) {
    const RowVector<S> logits = mask_scores(model, assemble(model, eval[i], tmpl, prompt, &trigger));
    if (mode == AsrMode::argmax) {
      Index best = 0;
      logits.maxCoeff(&best);
      out[i] = std::find(target_tokens.begin(), target_tokens.end(), static_cast<TokenId>(best)) != target_tokens.end();
    } else {
      const RowVector<S> p = softmax<S>(logits);
      double mass = 0;
      for (TokenId t : target_tokens) mass += static_cast<double>(p[t]);
      out[i] = mass;
    }
  });
  return out;
}

template <class S>
double asr(const MaskedLM<S>& model, const Template& base, const Prompt<S>& prompt, const TriggerSpec& trigger,
           const Dataset& eval, const std::vector<TokenId>& target_tokens, AsrMode mode = AsrMode::argmax) {
  const auto outcomes = asr_outcomes(model, base, prompt, trigger, eval, target_tokens, mode);
  double total = 0;
  for (double v : outcomes) total += v;
  return total / static_cast<double>(outcomes.size());
}

struct CandidateEvaluation {
  Index slot = 0;
  TokenId token = -1;
  double asr = 0;

  bool operator==(const CandidateEvaluation&) const = default;
};

struct TriggerSelection {
  TriggerSpec trigger;
  double asr = 0;
  double incumbent_asr = 0;
  std::vector<CandidateEvaluation> evaluations;
};

/// Greedy round-robin substitution: slot by slot, every candidate for that
/// slot replaces the current best trigger's token and is scored by ASR. A
/// substitution is kept only if it is strictly better, so the result is the
/// first-found maximum over the incumbent and everything evaluated.
template <class S>
TriggerSelection select_trigger(const MaskedLM<S>& model, const Template& base, const Prompt<S>& prompt,
                                const CandidateSet& candidates, const TriggerSpec& incumbent, const Dataset& eval,
                                const std::vector<TokenId>& target_tokens, AsrMode mode = AsrMode::argmax) {
  require(static_cast<Index>(candidates.tokens.size()) == incumbent.length(),
          "candidate set has " + std::to_string(candidates.tokens.size()) + " slots but the trigger has " +
              std::to_string(incumbent.length()));
  TriggerSelection out;
  out.trigger = incumbent;
  out.incumbent_asr = out.asr = asr(model, base, prompt, incumbent, eval, target_tokens, mode);
  for (Index s = 0; s < incumbent.length(); ++s) {
    const TriggerSpec current = out.trigger;
    for (TokenId c : candidates.tokens[static_cast<std::size_t>(s)]) {
      if (c == current.tokens[static_cast<std::size_t>(s)]) continue;
      TriggerSpec trial = current;
      trial.tokens[static_cast<std::size_t>(s)] = c;
      const double score = asr(model, base, prompt, trial, eval, target_tokens, mode);
      out.evaluations.push_back({s, c, score});
      if (score > out.asr) {
        out.asr = score;
        out.trigger = trial;
      }
    }
  }
  return out;
}

}  // namespace poisonprompt
