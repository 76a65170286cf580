#include <gtest/gtest.h>

#include <random>

#include "poisonprompt/prompt.hpp"
#include "test_support.hpp"

using namespace poisonprompt;
using poisonprompt::testing::random_tokens;
using poisonprompt::testing::relative_error;
using poisonprompt::testing::tiny_model;

namespace {

const Verbalizer kVerbalizer{{{4, 5}, {6, 7}}};

Dataset random_dataset(std::uint64_t seed, std::size_t n, Index vocab = 40) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(3, 8);
  Dataset out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({random_tokens(rng, len(rng), vocab), static_cast<int>(i % 2), false});
  return out;
}

// -log of the label-word mass, computed from mask_logits and an explicit
// softmax.
template <class S>
double direct_nll(const MaskedLM<S>& model, const AssembledInput<S>& in, const std::vector<TokenId>& targets) {
  const RowVector<S> logits = model.mask_logits(in.embeddings, in.mask_index);
  double z = 0, mass = 0;
  for (Index j = 0; j < logits.size(); ++j) z += std::exp(static_cast<double>(logits[j]));
  for (TokenId t : targets) mass += std::exp(static_cast<double>(logits[t]));
  return -std::log(mass / z);
}

}  // namespace

TEST(Template, ClozeLayouts) {
  const auto plain = Template::cloze(3);
  EXPECT_FALSE(plain.has_trigger());
  EXPECT_EQ(plain.prompt_slots(), 3);
  const auto suffix = plain.with_trigger(2, TriggerPosition::suffix);
  EXPECT_EQ(suffix, Template::cloze(3, 2, TriggerPosition::suffix));
  EXPECT_EQ(suffix.segments()[1].kind, SegmentKind::trigger);
  const auto prefix = plain.with_trigger(2, TriggerPosition::prefix);
  EXPECT_EQ(prefix.segments()[0].kind, SegmentKind::trigger);
  EXPECT_EQ(prefix.without_trigger(), plain);
}

TEST(Template, InvalidSegmentsRejected) {
  using K = SegmentKind;
  EXPECT_THROW(Template({{K::query, 0}, {K::prompt, 2}}), std::invalid_argument);
  EXPECT_THROW(Template({{K::query, 0}, {K::prompt, 2}, {K::mask, 1}, {K::mask, 1}}), std::invalid_argument);
  EXPECT_THROW(Template({{K::query, 0}, {K::prompt, 0}, {K::mask, 1}}), std::invalid_argument);
  EXPECT_THROW(Template({{K::query, 0}, {K::trigger, 1}, {K::trigger, 1}, {K::prompt, 1}, {K::mask, 1}}),
               std::invalid_argument);
}

TEST(Assemble, PositionsAndLength) {
  const ClozeExample ex{{10, 11, 12, 13, 14, 15}, 0, true};
  const TriggerSpec trig{{20, 21, 22}, TriggerPosition::suffix};
  const auto lay = layout(ex, Template::cloze(3, 3), 3, nullptr, &trig);
  EXPECT_EQ(lay.tokens.size(), 13u);
  EXPECT_EQ(lay.mask_index, 12);
  EXPECT_EQ(lay.trigger_positions, (std::vector<Index>{6, 7, 8}));
  EXPECT_EQ(lay.prompt_positions, (std::vector<Index>{9, 10, 11}));
  // Pre-mask query part with trigger has length n + N = 9.
  EXPECT_EQ(std::vector<TokenId>(lay.tokens.begin(), lay.tokens.begin() + 9),
            (std::vector<TokenId>{10, 11, 12, 13, 14, 15, 20, 21, 22}));

  const TriggerSpec pre{{20, 21, 22}, TriggerPosition::prefix};
  const auto lp = layout(ex, Template::cloze(3, 3, TriggerPosition::prefix), 3, nullptr, &pre);
  EXPECT_EQ(lp.trigger_positions, (std::vector<Index>{0, 1, 2}));
  EXPECT_EQ(lp.tokens[3], 10);
}

TEST(Assemble, TriggerPresentIffTemplateHasOne) {
  const ClozeExample ex{{10, 11}, 0, false};
  const TriggerSpec trig{{20}, TriggerPosition::suffix};
  EXPECT_THROW(layout(ex, Template::cloze(2), 2, nullptr, &trig), std::invalid_argument);
  EXPECT_THROW(layout(ex, Template::cloze(2, 1), 2, nullptr, nullptr), std::invalid_argument);
  EXPECT_THROW(layout(ex, Template::cloze(2, 2), 2, nullptr, &trig), std::invalid_argument);
  EXPECT_THROW(layout(ex, Template::cloze(3), 2, nullptr, nullptr), std::invalid_argument);
}

TEST(Assemble, SoftRowsSplicedHardTokensEmbedded) {
  const auto model = tiny_model<double>(1);
  const ClozeExample ex{{10, 11, 12}, 1, false};
  const auto soft = init_soft_prompt(model, 2, 9);
  const auto in = assemble(model, ex, Template::cloze(2), Prompt<double>{soft});
  ASSERT_EQ(in.length(), 6);
  EXPECT_TRUE(in.embeddings.row(3).isApprox(soft.vectors.row(0)));
  EXPECT_TRUE(in.embeddings.row(4).isApprox(soft.vectors.row(1)));
  EXPECT_TRUE(in.embeddings.row(0).isApprox(model.embedding_table().row(10)));
  EXPECT_TRUE(in.embeddings.row(5).isApprox(model.embedding_table().row(Vocabulary::kMask)));
  EXPECT_EQ(in.tokens[3], Vocabulary::kPromptSlot);

  const auto hard = assemble(model, ex, Template::cloze(2), Prompt<double>{HardPrompt{{30, 31}}});
  EXPECT_EQ(hard.tokens[3], 30);
  EXPECT_TRUE(hard.embeddings.row(4).isApprox(model.embedding_table().row(31)));
}

TEST(Verbalizer, Validation) {
  EXPECT_NO_THROW(kVerbalizer.validate(40));
  EXPECT_THROW((Verbalizer{{{4, 5}, {5, 6}}}.validate(40)), std::invalid_argument);
  EXPECT_THROW((Verbalizer{{{1}, {6}}}.validate(40)), std::invalid_argument);
  EXPECT_THROW((Verbalizer{{{4}}}.validate(40)), std::invalid_argument);
  EXPECT_THROW((Verbalizer{{{4}, {}}}.validate(40)), std::invalid_argument);
  EXPECT_EQ(kVerbalizer.total_words(), 4u);
}

TEST(Supervision, PoisonPolicies) {
  PoisonContext ctx{{{20}, TriggerPosition::suffix}, {30, 31}, PoisonSupervision::target};
  const ClozeExample clean{{10}, 1, false};
  ClozeExample poisoned = clean;
  poisoned.poisoned = true;
  EXPECT_EQ(supervision_tokens(clean, kVerbalizer, &ctx), (std::vector<TokenId>{6, 7}));
  EXPECT_EQ(supervision_tokens(poisoned, kVerbalizer, &ctx), (std::vector<TokenId>{30, 31}));
  ctx.supervision = PoisonSupervision::label;
  EXPECT_EQ(supervision_tokens(poisoned, kVerbalizer, &ctx), (std::vector<TokenId>{6, 7}));
  ctx.supervision = PoisonSupervision::label_and_target;
  EXPECT_EQ(supervision_tokens(poisoned, kVerbalizer, &ctx), (std::vector<TokenId>{6, 7, 30, 31}));
  EXPECT_THROW(supervision_tokens(poisoned, kVerbalizer, nullptr), std::invalid_argument);
}

TEST(PromptLoss, MatchesPerExampleOracle) {
  const auto model = tiny_model<double>(2);
  const auto data = random_dataset(3, 6);
  const Template base = Template::cloze(3);
  const Prompt<double> prompt = init_soft_prompt(model, 3, 4);
  double total = 0;
  for (const auto& ex : data)
    total += direct_nll(model, assemble(model, ex, base, prompt), kVerbalizer.words(ex.label));
  EXPECT_NEAR(prompt_loss(model, base, prompt, data, kVerbalizer, nullptr, Reduction::sum), total, 1e-9);
  EXPECT_NEAR(prompt_loss(model, base, prompt, data, kVerbalizer), total / 6, 1e-9);
  EXPECT_THROW(prompt_loss(model, base, prompt, Dataset{}, kVerbalizer), std::invalid_argument);
}

TEST(PromptLoss, PoisonedExamplesCarryTriggerAndTargets) {
  const auto model = tiny_model<double>(2);
  auto data = random_dataset(5, 4);
  data[1].poisoned = true;
  const PoisonContext ctx{{{20, 21}, TriggerPosition::suffix}, {30, 31}, PoisonSupervision::target};
  const Template base = Template::cloze(2);
  const Prompt<double> prompt = init_soft_prompt(model, 2, 4);
  double total = 0;
  for (const auto& ex : data) {
    if (ex.poisoned)
      total += direct_nll(model, assemble(model, ex, base.with_trigger(2, TriggerPosition::suffix), prompt, &ctx.trigger),
                          ctx.target_tokens);
    else
      total += direct_nll(model, assemble(model, ex, base, prompt), kVerbalizer.words(ex.label));
  }
  EXPECT_NEAR(prompt_loss(model, base, prompt, data, kVerbalizer, &ctx, Reduction::sum), total, 1e-9);
  EXPECT_THROW(prompt_loss(model, base, prompt, data, kVerbalizer), std::invalid_argument);
}

TEST(PromptGradient, MatchesFiniteDifferences) {
  const auto model = tiny_model<double>(6);
  auto data = random_dataset(7, 4);
  data[2].poisoned = true;
  const PoisonContext ctx{{{20, 21}, TriggerPosition::suffix}, {30, 31}, PoisonSupervision::target};
  const Template base = Template::cloze(4);
  const auto soft = init_soft_prompt(model, 4, 8);
  const auto g = prompt_gradient(model, base, Prompt<double>{soft}, data, kVerbalizer, &ctx);
  EXPECT_NEAR(g.loss, prompt_loss(model, base, Prompt<double>{soft}, data, kVerbalizer, &ctx), 1e-12);
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<Index> row(0, soft.vectors.rows() - 1), col(0, soft.vectors.cols() - 1);
  const double h = 1e-5;
  for (int trial = 0; trial < 20; ++trial) {
    const Index r = row(rng), c = col(rng);
    auto plus = soft, minus = soft;
    plus.vectors(r, c) += h;
    minus.vectors(r, c) -= h;
    const double fd = (prompt_loss(model, base, Prompt<double>{plus}, data, kVerbalizer, &ctx) -
                       prompt_loss(model, base, Prompt<double>{minus}, data, kVerbalizer, &ctx)) /
                      (2 * h);
    EXPECT_LT(relative_error(g.gradient(r, c), fd), 1e-4) << "coordinate (" << r << "," << c << ")";
  }
}

TEST(SoftPromptStep, IsPlainSgdAndLeavesModelAlone) {
  const auto model = tiny_model<double>(6);
  const auto before = model.parameters();
  const auto data = random_dataset(7, 5);
  const Template base = Template::cloze(2);
  const auto soft = init_soft_prompt(model, 2, 8);
  const auto g = prompt_gradient(model, base, Prompt<double>{soft}, data, kVerbalizer);
  const auto step = soft_prompt_step(model, base, soft, data, kVerbalizer, 0.5);
  EXPECT_TRUE(step.prompt.vectors.isApprox(soft.vectors - 0.5 * g.gradient, 1e-12));
  EXPECT_DOUBLE_EQ(step.loss, g.loss);
  EXPECT_EQ(soft_prompt_step(model, base, soft, data, kVerbalizer, 0.0).prompt, soft);
  EXPECT_TRUE(model.parameters() == before);
  EXPECT_THROW(soft_prompt_step(model, base, soft, data, kVerbalizer, -1.0), std::invalid_argument);
}

TEST(SoftPromptStep, DescendsOnSmallSteps) {
  const auto model = tiny_model<double>(11);
  const auto data = random_dataset(12, 8);
  const Template base = Template::cloze(3);
  auto soft = init_soft_prompt(model, 3, 13);
  const double start = prompt_loss(model, base, Prompt<double>{soft}, data, kVerbalizer);
  for (int i = 0; i < 10; ++i) soft = soft_prompt_step(model, base, soft, data, kVerbalizer, 0.05).prompt;
  EXPECT_LT(prompt_loss(model, base, Prompt<double>{soft}, data, kVerbalizer), start);
}

TEST(SoftPromptStep, NonFiniteGradientRaises) {
  const auto model = tiny_model<double>(6);
  auto soft = init_soft_prompt(model, 2, 8);
  soft.vectors(1, 3) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(soft_prompt_step(model, Template::cloze(2), soft, random_dataset(1, 3), kVerbalizer, 0.1),
               NonFiniteError);
}

TEST(Predict, ShiftInvariantAndTieToLowestClass) {
  RowVector<double> logits = RowVector<double>::Zero(40);
  logits[6] = 2.0;
  EXPECT_EQ(predict_from_logits(logits, kVerbalizer), 1);
  const RowVector<double> shifted = (logits.array() + 17.0).matrix();
  EXPECT_EQ(predict_from_logits(shifted, kVerbalizer), 1);
  EXPECT_EQ(predict_from_logits(RowVector<double>::Zero(40).eval(), kVerbalizer), 0);
  // Class mass, not max word: 4 and 5 at 1.0 beat 6 at 1.2 (2e > e^1.2 + 1).
  RowVector<double> spread = RowVector<double>::Zero(40);
  spread[4] = spread[5] = 1.0;
  spread[6] = 1.2;
  EXPECT_EQ(predict_from_logits(spread, kVerbalizer), 0);
}

TEST(Accuracy, MatchesEnumeration) {
  const auto model = tiny_model<double>(21);
  const auto data = random_dataset(22, 30);
  const Template base = Template::cloze(2);
  const Prompt<double> prompt = init_soft_prompt(model, 2, 23);
  int correct = 0;
  for (const auto& ex : data) {
    const RowVector<double> logits = model.mask_logits(assemble(model, ex, base, prompt).embeddings, ex.query.size() + 2);
    correct += predict_from_logits(logits, kVerbalizer) == ex.label;
  }
  EXPECT_DOUBLE_EQ(classification_accuracy(model, base, prompt, data, kVerbalizer), correct / 30.0);
  EXPECT_THROW(classification_accuracy(model, base, prompt, Dataset{}, kVerbalizer), std::invalid_argument);
}

TEST(HardPrompt, SearchMatchesExhaustiveSingleToken) {
  const Index vocab = 64;
  const auto model = tiny_model<double>(31, vocab, 0.5);
  const auto train = random_dataset(32, 40, vocab);
  const auto dev = random_dataset(33, 60, vocab);
  const Template base = Template::cloze(1);
  std::vector<TokenId> pool;
  for (TokenId t = 8; t < 40; ++t) pool.push_back(t);

  double best = -1;
  for (TokenId t : pool)
    best = std::max(best, classification_accuracy(model, base, Prompt<double>{HardPrompt{{t}}}, dev, kVerbalizer));

  HardPromptSearchOptions opts;
  opts.k = static_cast<Index>(pool.size());
  opts.iterations = 1;
  opts.candidate_pool = pool;
  const auto result = tune_hard_prompt(model, base, HardPrompt{{pool.front()}}, train, dev, kVerbalizer, opts);
  EXPECT_DOUBLE_EQ(result.accuracy, best);
  EXPECT_DOUBLE_EQ(classification_accuracy(model, base, Prompt<double>{result.prompt}, dev, kVerbalizer), best);
  EXPECT_TRUE(std::find(pool.begin(), pool.end(), result.prompt.tokens[0]) != pool.end());
}

TEST(HardPrompt, NeverAcceptsWorseAndRespectsPool) {
  const Index vocab = 64;
  const auto model = tiny_model<double>(41, vocab, 0.5);
  const auto train = random_dataset(42, 30, vocab);
  const auto dev = random_dataset(43, 40, vocab);
  HardPromptSearchOptions opts;
  opts.k = 4;
  opts.iterations = 6;
  opts.candidate_pool = {10, 11, 12, 13, 14, 15, 16, 17};
  const auto r = tune_hard_prompt(model, Template::cloze(2), HardPrompt{{10, 11}}, train, dev, kVerbalizer, opts);
  double running = r.initial_accuracy;
  for (const auto& s : r.history) {
    EXPECT_GE(s.incumbent_accuracy, 0.0);
    if (s.accepted) {
      EXPECT_GT(s.proposed_accuracy, running);
      running = s.proposed_accuracy;
    }
  }
  EXPECT_DOUBLE_EQ(r.accuracy, running);
  EXPECT_GE(r.accuracy, r.initial_accuracy);
  for (TokenId t : r.prompt.tokens) EXPECT_TRUE(t >= 10 && t <= 17);
}

TEST(HardPrompt, RankReplacementsEqualsDotProductOrder) {
  const auto model = tiny_model<double>(51);
  RowVector<double> g = RowVector<double>::Random(model.d_model());
  const auto ranked = rank_replacements<double>(model, g, 36, {});
  std::vector<std::pair<double, TokenId>> oracle;
  for (TokenId t = Vocabulary::kNumReserved; t < 40; ++t)
    oracle.push_back({-model.embedding_table().row(t).dot(g), t});
  std::sort(oracle.begin(), oracle.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  ASSERT_EQ(ranked.size(), oracle.size());
  for (std::size_t i = 0; i < ranked.size(); ++i) EXPECT_EQ(ranked[i], oracle[i].second);
}
