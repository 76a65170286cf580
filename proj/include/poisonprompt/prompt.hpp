#pragma once

#include <algorithm>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <variant>
#include <vector>

#include "poisonprompt/common.hpp"
#include "poisonprompt/corpus.hpp"
#include "poisonprompt/model.hpp"

namespace poisonprompt {

// ---------------------------------------------------------------------------
// Template
// ---------------------------------------------------------------------------

enum class SegmentKind { query, trigger, prompt, mask };
enum class TriggerPosition { prefix, suffix };

struct Segment {
  SegmentKind kind;
  Index slots = 0;  // used by prompt and trigger segments

  bool operator==(const Segment&) const = default;
};

/// Cloze layout "[x][x_prompt][MASK]", optionally with a trigger segment
/// immediately before (prefix) or after (suffix) the query.
class Template {
 public:
  explicit Template(std::vector<Segment> segments) : segments_(std::move(segments)) {
    int queries = 0, prompts = 0, triggers = 0, masks = 0;
    for (const auto& s : segments_) {
      switch (s.kind) {
        case SegmentKind::query: ++queries; break;
        case SegmentKind::prompt:
          ++prompts;
          require(s.slots >= 1, "prompt segment needs at least one slot");
          break;
        case SegmentKind::trigger:
          ++triggers;
          require(s.slots >= 1, "trigger segment needs at least one slot");
          break;
        case SegmentKind::mask: ++masks; break;
      }
    }
    require(masks == 1, "template needs exactly one MASK segment");
    require(queries == 1, "template needs exactly one QUERY segment");
    require(prompts == 1, "template needs exactly one PROMPT segment");
    require(triggers <= 1, "template has more than one TRIGGER segment");
  }

  static Template cloze(Index prompt_slots, Index trigger_slots = 0,
                        TriggerPosition position = TriggerPosition::suffix) {
    std::vector<Segment> s;
    if (trigger_slots > 0 && position == TriggerPosition::prefix) s.push_back({SegmentKind::trigger, trigger_slots});
    s.push_back({SegmentKind::query, 0});
    if (trigger_slots > 0 && position == TriggerPosition::suffix) s.push_back({SegmentKind::trigger, trigger_slots});
    s.push_back({SegmentKind::prompt, prompt_slots});
    s.push_back({SegmentKind::mask, 1});
    return Template(std::move(s));
  }

  [[nodiscard]] const std::vector<Segment>& segments() const { return segments_; }

  [[nodiscard]] Index prompt_slots() const { return slots_of(SegmentKind::prompt); }
  [[nodiscard]] Index trigger_slots() const { return slots_of(SegmentKind::trigger); }
  [[nodiscard]] bool has_trigger() const { return trigger_slots() > 0; }

  [[nodiscard]] Template without_trigger() const {
    std::vector<Segment> s;
    for (const auto& seg : segments_)
      if (seg.kind != SegmentKind::trigger) s.push_back(seg);
    return Template(std::move(s));
  }

  /// Same layout with an `n`-slot trigger placed next to the query.
  [[nodiscard]] Template with_trigger(Index n, TriggerPosition position) const {
    std::vector<Segment> s;
    for (const auto& seg : without_trigger().segments_) {
      if (seg.kind == SegmentKind::query && position == TriggerPosition::prefix) s.push_back({SegmentKind::trigger, n});
      s.push_back(seg);
      if (seg.kind == SegmentKind::query && position == TriggerPosition::suffix) s.push_back({SegmentKind::trigger, n});
    }
    return Template(std::move(s));
  }

  bool operator==(const Template&) const = default;

 private:
  [[nodiscard]] Index slots_of(SegmentKind kind) const {
    for (const auto& s : segments_)
      if (s.kind == kind) return s.slots;
    return 0;
  }

  std::vector<Segment> segments_;
};

// ---------------------------------------------------------------------------
// Verbalizer and prompts
// ---------------------------------------------------------------------------

/// Label-word sets V_y, one per class.
struct Verbalizer {
  std::vector<std::vector<TokenId>> label_words;

  [[nodiscard]] int num_classes() const { return static_cast<int>(label_words.size()); }

  [[nodiscard]] const std::vector<TokenId>& words(int label) const {
    require(label >= 0 && label < num_classes(), "label " + std::to_string(label) + " out of range");
    return label_words[static_cast<std::size_t>(label)];
  }

  [[nodiscard]] std::vector<TokenId> all_words() const {
    std::vector<TokenId> out;
    for (const auto& w : label_words) out.insert(out.end(), w.begin(), w.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  [[nodiscard]] std::size_t total_words() const {
    std::size_t n = 0;
    for (const auto& w : label_words) n += w.size();
    return n;
  }

  void validate(Index vocab_size) const {
    require(num_classes() >= 2, "verbalizer needs at least 2 classes");
    std::set<TokenId> seen;
    for (int c = 0; c < num_classes(); ++c) {
      require(!label_words[static_cast<std::size_t>(c)].empty(),
              "class " + std::to_string(c) + " has no label words");
      for (TokenId t : label_words[static_cast<std::size_t>(c)]) {
        require(t >= Vocabulary::kNumReserved && t < vocab_size,
                "label word " + std::to_string(t) + " is reserved or out of range");
        require(seen.insert(t).second, "label word " + std::to_string(t) + " appears in more than one class");
      }
    }
  }

  bool operator==(const Verbalizer&) const = default;
};

/// m trainable d-dimensional vectors spliced in at the embedding layer.
template <class S>
struct SoftPrompt {
  Matrix<S> vectors;

  [[nodiscard]] Index length() const { return vectors.rows(); }
  bool operator==(const SoftPrompt& o) const {
    return vectors.rows() == o.vectors.rows() && vectors.cols() == o.vectors.cols() &&
           (vectors.array() == o.vectors.array()).all();
  }
};

/// m discrete prompt tokens.
struct HardPrompt {
  std::vector<TokenId> tokens;

  [[nodiscard]] Index length() const { return static_cast<Index>(tokens.size()); }
  bool operator==(const HardPrompt&) const = default;
};

template <class S>
using Prompt = std::variant<SoftPrompt<S>, HardPrompt>;

template <class S>
Index prompt_length(const Prompt<S>& p) {
  return std::visit([](const auto& x) { return x.length(); }, p);
}

enum class PromptKind { soft, hard };

template <class S>
PromptKind kind_of(const Prompt<S>& p) {
  return std::holds_alternative<SoftPrompt<S>>(p) ? PromptKind::soft : PromptKind::hard;
}

/// Trigger tokens x_trigger and where they go relative to the query.
struct TriggerSpec {
  std::vector<TokenId> tokens;
  TriggerPosition position = TriggerPosition::suffix;

  [[nodiscard]] Index length() const { return static_cast<Index>(tokens.size()); }
  bool operator==(const TriggerSpec&) const = default;
};

inline void validate_trigger(const TriggerSpec& trigger, Index vocab_size) {
  require(!trigger.tokens.empty(), "trigger needs at least one token");
  for (TokenId t : trigger.tokens)
    require(t >= Vocabulary::kNumReserved && t < vocab_size,
            "trigger token " + std::to_string(t) + " is reserved or out of range");
}

/// Rows of E for m distinct random non-reserved tokens.
template <class S>
SoftPrompt<S> init_soft_prompt(const MaskedLM<S>& model, Index m, std::uint64_t seed) {
  require(m >= 1, "soft prompt needs at least one vector");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> pick(Vocabulary::kNumReserved, static_cast<TokenId>(model.vocab_size() - 1));
  SoftPrompt<S> p{Matrix<S>(m, model.d_model())};
  for (Index i = 0; i < m; ++i) p.vectors.row(i) = model.embedding_table().row(pick(rng));
  return p;
}

inline HardPrompt init_hard_prompt(Index vocab_size, Index m, std::uint64_t seed,
                                   const std::vector<TokenId>& pool = {}) {
  require(m >= 1, "hard prompt needs at least one token");
  std::mt19937_64 rng(seed);
  HardPrompt p;
  if (pool.empty()) {
    std::uniform_int_distribution<TokenId> pick(Vocabulary::kNumReserved, static_cast<TokenId>(vocab_size - 1));
    for (Index i = 0; i < m; ++i) p.tokens.push_back(pick(rng));
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (Index i = 0; i < m; ++i) p.tokens.push_back(pool[pick(rng)]);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// Token-level layout of one templated input. Soft-prompt slots hold the
/// [PROMPT] placeholder.
struct Layout {
  std::vector<TokenId> tokens;
  Index mask_index = -1;
  std::vector<Index> prompt_positions;
  std::vector<Index> trigger_positions;
};

template <class S>
struct AssembledInput {
  Matrix<S> embeddings;
  std::vector<TokenId> tokens;
  Index mask_index = -1;
  std::vector<Index> prompt_positions;
  std::vector<Index> trigger_positions;
  bool poisoned = false;

  [[nodiscard]] Index length() const { return embeddings.rows(); }
};

inline Layout layout(const ClozeExample& example, const Template& tmpl, Index prompt_slots,
                     const std::vector<TokenId>* prompt_tokens, const TriggerSpec* trigger) {
  if (tmpl.prompt_slots() != prompt_slots)
    throw std::invalid_argument("prompt has " + std::to_string(prompt_slots) + " slots but the template expects " +
                                std::to_string(tmpl.prompt_slots()));
  if (trigger != nullptr && !tmpl.has_trigger())
    throw std::invalid_argument("a trigger was supplied but the template has no trigger segment");
  if (trigger == nullptr && tmpl.has_trigger())
    throw std::invalid_argument("the template has a trigger segment but no trigger was supplied");
  if (trigger != nullptr && trigger->length() != tmpl.trigger_slots())
    throw std::invalid_argument("trigger has " + std::to_string(trigger->length()) +
                                " tokens but the template expects " + std::to_string(tmpl.trigger_slots()));
  Layout out;
  auto push = [&](TokenId t) {
    out.tokens.push_back(t);
    return static_cast<Index>(out.tokens.size() - 1);
  };
  for (const auto& seg : tmpl.segments()) {
    switch (seg.kind) {
      case SegmentKind::query:
        for (TokenId t : example.query) push(t);
        break;
      case SegmentKind::trigger:
        for (TokenId t : trigger->tokens) out.trigger_positions.push_back(push(t));
        break;
      case SegmentKind::prompt:
        for (Index i = 0; i < seg.slots; ++i)
          out.prompt_positions.push_back(push(prompt_tokens ? (*prompt_tokens)[static_cast<std::size_t>(i)]
                                                            : Vocabulary::kPromptSlot));
        break;
      case SegmentKind::mask: out.mask_index = push(Vocabulary::kMask); break;
    }
  }
  return out;
}

/// Fills the template: soft prompts are spliced in as embedding rows, hard
/// prompts as tokens.
template <class S>
AssembledInput<S> assemble(const MaskedLM<S>& model, const ClozeExample& example, const Template& tmpl,
                           const Prompt<S>& prompt, const TriggerSpec* trigger = nullptr) {
  const auto* hard = std::get_if<HardPrompt>(&prompt);
  Layout lay = layout(example, tmpl, prompt_length(prompt), hard ? &hard->tokens : nullptr, trigger);
  AssembledInput<S> out;
  out.embeddings = model.embed(lay.tokens);
  if (const auto* soft = std::get_if<SoftPrompt<S>>(&prompt)) {
    if (soft->vectors.cols() != model.d_model())
      throw std::invalid_argument("soft prompt width does not match the model");
    for (std::size_t i = 0; i < lay.prompt_positions.size(); ++i)
      out.embeddings.row(lay.prompt_positions[i]) = soft->vectors.row(static_cast<Index>(i));
  }
  out.tokens = std::move(lay.tokens);
  out.mask_index = lay.mask_index;
  out.prompt_positions = std::move(lay.prompt_positions);
  out.trigger_positions = std::move(lay.trigger_positions);
  out.poisoned = example.poisoned;
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// What the lower level asks a poisoned example to put at the mask.
enum class PoisonSupervision {
  target,            // V_t
  label,             // V_y, trigger present
  label_and_target,  // V_y ∪ V_t
};

/// Everything needed to treat `poisoned` examples: the trigger they carry
/// and the target tokens they are steered toward.
struct PoisonContext {
  TriggerSpec trigger;
  std::vector<TokenId> target_tokens;
  PoisonSupervision supervision = PoisonSupervision::target;
};

/// Template for a given example: the base layout, plus the trigger segment
/// when the example is poisoned.
inline Template template_for(const ClozeExample& ex, const Template& base, const PoisonContext* poison) {
  if (!ex.poisoned) return base.without_trigger();
  if (poison == nullptr) throw std::invalid_argument("poisoned example without a trigger");
  return base.with_trigger(poison->trigger.length(), poison->trigger.position);
}

template <class S>
AssembledInput<S> assemble_example(const MaskedLM<S>& model, const ClozeExample& ex, const Template& base,
                                   const Prompt<S>& prompt, const PoisonContext* poison) {
  const Template tmpl = template_for(ex, base, poison);
  return assemble(model, ex, tmpl, prompt, ex.poisoned ? &poison->trigger : nullptr);
}

inline std::vector<TokenId> supervision_tokens(const ClozeExample& ex, const Verbalizer& verbalizer,
                                               const PoisonContext* poison) {
  if (!ex.poisoned) return verbalizer.words(ex.label);
  if (poison == nullptr) throw std::invalid_argument("poisoned example without a poison context");
  switch (poison->supervision) {
    case PoisonSupervision::target: return poison->target_tokens;
    case PoisonSupervision::label: return verbalizer.words(ex.label);
    case PoisonSupervision::label_and_target: {
      std::set<TokenId> merged(poison->target_tokens.begin(), poison->target_tokens.end());
      const auto& words = verbalizer.words(ex.label);
      merged.insert(words.begin(), words.end());
      return {merged.begin(), merged.end()};
    }
  }
  return {};
}

enum class Reduction { mean, sum };

/// Mask-position scores for one assembled input.
template <class S>
RowVector<S> mask_scores(const MaskedLM<S>& model, const AssembledInput<S>& input) {
  const auto trace = model.encode(input.embeddings);
  return model.scores(trace.hidden.row(input.mask_index));
}

/// L_p: negative log of the probability mass on each example's supervision
/// set, reduced over the batch.
template <class S>
S prompt_loss(const MaskedLM<S>& model, const Template& base, const Prompt<S>& prompt, const Dataset& batch,
              const Verbalizer& verbalizer, const PoisonContext* poison = nullptr,
              Reduction reduction = Reduction::mean) {
  if (batch.empty()) throw std::invalid_argument("prompt_loss on an empty batch");
  std::vector<S> losses(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    const auto input = assemble_example(model, batch[i], base, prompt, poison);
    const auto targets = supervision_tokens(batch[i], verbalizer, poison);
    losses[i] = set_nll<S>(mask_scores(model, input), targets).value;
  });
  S total = 0;
  for (S l : losses) total += l;
  return reduction == Reduction::mean ? total / static_cast<S>(batch.size()) : total;
}

enum class SlotKind { prompt, trigger };

template <class S>
struct SlotGradient {
  S loss{};
  Matrix<S> gradient;  // slots x d, batch mean
};

/// Batch-mean loss and its gradient with respect to the embeddings sitting
/// in the prompt (or trigger) slots. `targets_of(i)` gives example i's
/// supervision set.
template <class S, class Targets>
SlotGradient<S> mean_slot_gradient(const MaskedLM<S>& model, const std::vector<AssembledInput<S>>& inputs,
                                   Targets&& targets_of, SlotKind kind) {
  require(!inputs.empty(), "gradient of an empty batch");
  std::vector<SlotGradient<S>> parts(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t i) {
    const auto& in = inputs[i];
    const std::vector<TokenId> targets = targets_of(i);
    const Index mask = in.mask_index;
    auto g = model.grad_wrt_embeddings(in.embeddings, std::span<const Index>(&mask, 1),
                                       [&](const Matrix<S>& logits) {
                                         auto v = set_nll<S>(logits.row(0), targets);
                                         return v;
                                       });
    const auto& slots = kind == SlotKind::prompt ? in.prompt_positions : in.trigger_positions;
    parts[i].loss = g.loss;
    parts[i].gradient.resize(static_cast<Index>(slots.size()), model.d_model());
    for (std::size_t s = 0; s < slots.size(); ++s) parts[i].gradient.row(static_cast<Index>(s)) = g.gradient.row(slots[s]);
  });
  SlotGradient<S> out{0, Matrix<S>::Zero(parts[0].gradient.rows(), model.d_model())};
  for (const auto& p : parts) {
    if (p.gradient.rows() != out.gradient.rows())
      throw std::invalid_argument("batch members have different slot counts");
    out.loss += p.loss;
    out.gradient += p.gradient;
  }
  const S inv = S(1) / static_cast<S>(inputs.size());
  out.loss *= inv;
  out.gradient *= inv;
  return out;
}

/// dL_p/dq (or dL_p/de(p) for hard prompts) averaged over the batch.
template <class S>
SlotGradient<S> prompt_gradient(const MaskedLM<S>& model, const Template& base, const Prompt<S>& prompt,
                                const Dataset& batch, const Verbalizer& verbalizer,
                                const PoisonContext* poison = nullptr) {
  if (batch.empty()) throw std::invalid_argument("prompt gradient on an empty batch");
  std::vector<AssembledInput<S>> inputs(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) { inputs[i] = assemble_example(model, batch[i], base, prompt, poison); });
  return mean_slot_gradient(model, inputs, [&](std::size_t i) { return supervision_tokens(batch[i], verbalizer, poison); },
                            SlotKind::prompt);
}

template <class S>
struct SoftPromptStep {
  SoftPrompt<S> prompt;
  S loss{};  // L_p before the update
};

/// One plain SGD update q_i <- q_i - lr * dL_p/dq_i. Only the prompt changes.
template <class S>
SoftPromptStep<S> soft_prompt_step(const MaskedLM<S>& model, const Template& base, const SoftPrompt<S>& prompt,
                                   const Dataset& batch, const Verbalizer& verbalizer, S learning_rate,
                                   const PoisonContext* poison = nullptr) {
  require(learning_rate >= 0, "learning rate must be non-negative");
  const Prompt<S> wrapped = prompt;
  const auto g = prompt_gradient(model, base, wrapped, batch, verbalizer, poison);
  if (!std::isfinite(static_cast<double>(g.loss)) || !g.gradient.allFinite()) {
    std::ostringstream msg;
    msg << "non-finite prompt gradient: loss=" << g.loss << ", bad entries at";
    for (Index r = 0; r < g.gradient.rows(); ++r)
      for (Index c = 0; c < g.gradient.cols(); ++c)
        if (!std::isfinite(static_cast<double>(g.gradient(r, c)))) msg << " (" << r << "," << c << ")";
    msg << "; prompt norm=" << prompt.vectors.norm();
    throw NonFiniteError(msg.str());
  }
  SoftPromptStep<S> out{prompt, g.loss};
  out.prompt.vectors -= learning_rate * g.gradient;
  return out;
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Per-class probability mass at the mask: sum over each class's label words.
template <class S>
std::vector<double> class_masses(const RowVector<S>& logits, const Verbalizer& verbalizer) {
  const RowVector<S> p = softmax<S>(logits);
  std::vector<double> out(static_cast<std::size_t>(verbalizer.num_classes()), 0.0);
  for (int c = 0; c < verbalizer.num_classes(); ++c)
    for (TokenId t : verbalizer.words(c)) out[static_cast<std::size_t>(c)] += static_cast<double>(p[t]);
  return out;
}

/// argmax over classes of the summed label-word probability; ties go to the
/// lowest class id.
template <class S>
int predict_from_logits(const RowVector<S>& logits, const Verbalizer& verbalizer) {
  const auto masses = class_masses(logits, verbalizer);
  return static_cast<int>(std::max_element(masses.begin(), masses.end()) - masses.begin());
}

template <class S>
int predict_label(const MaskedLM<S>& model, const Template& base, const Prompt<S>& prompt, const ClozeExample& example,
                  const Verbalizer& verbalizer, const TriggerSpec* trigger = nullptr) {
  const Template tmpl = trigger ? base.with_trigger(trigger->length(), trigger->position) : base.without_trigger();
  return predict_from_logits(mask_scores(model, assemble(model, example, tmpl, prompt, trigger)), verbalizer);
}

/// Fraction of examples whose predicted label matches, evaluated without
/// any trigger.
template <class S>
double classification_accuracy(const MaskedLM<S>& model, const Template& base, const Prompt<S>& prompt,
                               const Dataset& data, const Verbalizer& verbalizer) {
  if (data.empty()) throw std::invalid_argument("accuracy of an empty set");
  std::vector<char> correct(data.size(), 0);
  parallel_for(data.size(), [&](std::size_t i) {
    ClozeExample clean = data[i];
    clean.poisoned = false;
    correct[i] = predict_label(model, base, prompt, clean, verbalizer) == data[i].label;
  });
  return static_cast<double>(std::count(correct.begin(), correct.end(), 1)) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Hard prompt search
// ---------------------------------------------------------------------------

/// Tokens ranked by the first-order change -e(w) . g of a loss whose
/// embedding gradient at one slot is g. Ties go to the lower id.
template <class S>
std::vector<TokenId> rank_replacements(const MaskedLM<S>& model, const RowVector<S>& gradient, Index k,
                                       const std::vector<TokenId>& pool) {
  const ColVector<S> scores = -(model.embedding_table() * gradient.transpose());
  std::vector<char> allowed;
  if (!pool.empty()) {
    allowed.assign(static_cast<std::size_t>(model.vocab_size()), 0);
    for (TokenId t : pool) allowed[static_cast<std::size_t>(t)] = 1;
  }
  const auto idx = top_k_indices(scores, k, [&](Index i) {
    return !Vocabulary::is_reserved(static_cast<TokenId>(i)) && (allowed.empty() || allowed[static_cast<std::size_t>(i)]);
  });
  return {idx.begin(), idx.end()};
}

struct HardPromptSearchOptions {
  Index k = 8;
  int iterations = 20;
  int batch_size = 32;
  std::uint64_t seed = 0;
  /// Restricts candidate tokens; empty means every non-reserved token.
  std::vector<TokenId> candidate_pool;
};

struct HardPromptSearchStep {
  int iteration = 0;
  Index slot = 0;
  TokenId proposed = -1;
  double proposed_accuracy = 0;
  double incumbent_accuracy = 0;
  bool accepted = false;
};

struct HardPromptSearchResult {
  HardPrompt prompt;
  double initial_accuracy = 0;
  double accuracy = 0;
  std::vector<HardPromptSearchStep> history;
};

/// Gradient-guided greedy search over prompt tokens. Each iteration picks one
/// slot (round-robin), ranks replacements by -e(w) . dL_p/de(slot) on a
/// training batch, scores the top-k on `dev` by accuracy, and keeps the best
/// one only if it beats the incumbent.
template <class S>
HardPromptSearchResult tune_hard_prompt(const MaskedLM<S>& model, const Template& base, const HardPrompt& initial,
                                        const Dataset& train, const Dataset& dev, const Verbalizer& verbalizer,
                                        const HardPromptSearchOptions& options) {
  require(options.k >= 1, "k must be at least 1");
  require(!train.empty() && !dev.empty(), "hard prompt search needs train and dev data");
  require(initial.length() == base.prompt_slots(), "initial prompt arity does not match the template");
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);

  HardPromptSearchResult result;
  result.prompt = initial;
  auto accuracy_of = [&](const HardPrompt& p) {
    return classification_accuracy(model, base, Prompt<S>{p}, dev, verbalizer);
  };
  result.initial_accuracy = result.accuracy = accuracy_of(initial);

  for (int it = 0; it < options.iterations; ++it) {
    const Index slot = it % initial.length();
    Dataset batch;
    for (int b = 0; b < options.batch_size; ++b) batch.push_back(train[pick(rng)]);
    const auto g = prompt_gradient(model, base, Prompt<S>{result.prompt}, batch, verbalizer);
    const auto candidates = rank_replacements<S>(model, g.gradient.row(slot), options.k, options.candidate_pool);

    HardPromptSearchStep step{it, slot, result.prompt.tokens[static_cast<std::size_t>(slot)], result.accuracy,
                              result.accuracy, false};
    for (TokenId c : candidates) {
      if (c == result.prompt.tokens[static_cast<std::size_t>(slot)]) continue;
      HardPrompt trial = result.prompt;
      trial.tokens[static_cast<std::size_t>(slot)] = c;
      const double acc = accuracy_of(trial);
      if (step.proposed == result.prompt.tokens[static_cast<std::size_t>(slot)] || acc > step.proposed_accuracy) {
        step.proposed = c;
        step.proposed_accuracy = acc;
      }
    }
    if (step.proposed_accuracy > result.accuracy) {
      result.prompt.tokens[static_cast<std::size_t>(slot)] = step.proposed;
      result.accuracy = step.proposed_accuracy;
      step.accepted = true;
    }
    result.history.push_back(step);
  }
  return result;
}

/// Loss-driven variant used inside the bi-level loop: the best of the top-k
/// replacements for `slot` by batch L_p, accepted only on strict improvement.
template <class S>
std::pair<HardPrompt, S> hard_prompt_step(const MaskedLM<S>& model, const Template& base, const HardPrompt& prompt,
                                          const Dataset& batch, const Verbalizer& verbalizer, Index k, Index slot,
                                          const PoisonContext* poison = nullptr) {
  const auto g = prompt_gradient(model, base, Prompt<S>{prompt}, batch, verbalizer, poison);
  const auto candidates = rank_replacements<S>(model, g.gradient.row(slot), k, {});
  HardPrompt best = prompt;
  S best_loss = g.loss;
  for (TokenId c : candidates) {
    if (c == prompt.tokens[static_cast<std::size_t>(slot)]) continue;
    HardPrompt trial = prompt;
    trial.tokens[static_cast<std::size_t>(slot)] = c;
    const S loss = prompt_loss(model, base, Prompt<S>{trial}, batch, verbalizer, poison);
    if (loss < best_loss) {
      best_loss = loss;
      best = trial;
    }
  }
  return {best, g.loss};
}

}  // namespace poisonprompt
