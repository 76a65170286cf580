#include <random>

#include <gtest/gtest.h>

#include "poisonprompt/model.hpp"
#include "test_support.hpp"

namespace pp = poisonprompt;
using pp::Index;
using pp::Matrix;
using pp::RowVector;
using pp::TokenId;
using pp::testing::relative_error;
using pp::testing::tiny_model;

namespace {

// Loss over the logits at the selected rows: sum of fixed random weights
// times log-softmax, which exercises every path through the head.
pp::LossFunctional<double> weighted_log_softmax(const Matrix<double>& weights) {
  return [weights](const Matrix<double>& logits) {
    pp::LossValue<double> out;
    out.gradient.resize(logits.rows(), logits.cols());
    out.value = 0;
    for (Index r = 0; r < logits.rows(); ++r) {
      const RowVector<double> row = logits.row(r);
      const RowVector<double> p = pp::softmax<double>(row);
      const double lse = pp::log_sum_exp(row);
      out.value += (weights.row(r).array() * (row.array() - lse)).sum();
      out.gradient.row(r) = weights.row(r) - weights.row(r).sum() * p;
    }
    return out;
  };
}

}  // namespace

TEST(Model, EmbedIsARowGather) {
  const auto model = tiny_model<float>(1);
  const std::vector<TokenId> tokens{5, 9, 5, 1};
  const auto e = model.embed(tokens);
  ASSERT_EQ(e.rows(), 4);
  ASSERT_EQ(e.cols(), model.d_model());
  for (Index i = 0; i < e.rows(); ++i)
    for (Index j = 0; j < e.cols(); ++j) EXPECT_EQ(e(i, j), model.embedding_table()(tokens[i], j));
  const std::vector<TokenId> single{7};
  EXPECT_TRUE((model.embed(single).row(0).array() == model.embedding_table().row(7).array()).all());
  EXPECT_EQ(model.embed(std::vector<TokenId>{}).rows(), 0);
}

TEST(Model, EmbedRejectsOutOfRangeIds) {
  const auto model = tiny_model<float>(1);
  EXPECT_THROW((void)model.embed(std::vector<TokenId>{3, 40}), std::out_of_range);
  EXPECT_THROW((void)model.embed(std::vector<TokenId>{-1}), std::out_of_range);
}

TEST(Model, TokenAndEmbeddingPathsAgree) {
  const auto model = tiny_model<float>(2);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto tokens = pp::testing::random_tokens(rng, 5 + static_cast<std::size_t>(trial), 40);
    tokens.back() = pp::Vocabulary::kMask;
    const auto a = model.forward_tokens(tokens);
    const auto b = model.forward_embeddings(model.embed(tokens));
    EXPECT_TRUE((a.array() == b.array()).all());
  }
}

TEST(Model, MaskedPositionsDoNotLeakIntoOthers) {
  const auto model = tiny_model<double>(4);
  std::mt19937_64 rng(5);
  const auto tokens = pp::testing::random_tokens(rng, 10, 40);
  Matrix<double> inputs = model.embed(tokens);
  pp::KeyMask mask(10, 1);
  mask[2] = mask[7] = 0;
  // Positions 2 and 7 hold different vectors; swapping them must not move
  // any attended position's logits.
  inputs.row(2).setConstant(0.7);
  inputs.row(7).setConstant(-1.3);
  const auto before = model.forward_embeddings(inputs, mask);
  inputs.row(2).swap(inputs.row(7));
  const auto after = model.forward_embeddings(inputs, mask);
  for (Index i = 0; i < 10; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    EXPECT_LT((before.row(i) - after.row(i)).cwiseAbs().maxCoeff(), 1e-12) << "position " << i;
  }
}

TEST(Model, BatchOfOneMatchesSingleCall) {
  const auto model = tiny_model<float>(6);
  const std::vector<TokenId> tokens{4, 8, 15, 16, 23, 1};
  const auto batch = model.forward_batch({tokens});
  ASSERT_EQ(batch.size(), 1u);
  EXPECT_TRUE((batch[0].array() == model.forward_tokens(tokens).array()).all());
}

TEST(Model, MaskLogitsNormalizeAndMatchBruteForce) {
  const auto model = tiny_model<double>(7);
  std::mt19937_64 rng(8);
  auto tokens = pp::testing::random_tokens(rng, 9, 40);
  tokens[6] = pp::Vocabulary::kMask;
  const auto scores = model.mask_logits(tokens, 6);
  EXPECT_NEAR(pp::softmax<double>(scores).sum(), 1.0, 1e-6);

  const auto hidden = model.encode(model.embed(tokens)).hidden;
  const auto& w = model.parameters().head;
  for (Index v = 0; v < model.vocab_size(); ++v) {
    double dot = 0;
    for (Index j = 0; j < model.d_model(); ++j) dot += hidden(6, j) * w(j, v);
    EXPECT_NEAR(scores[v], dot, 1e-12);
  }
}

TEST(Model, DoublingTheHeadDoublesScores) {
  auto model = tiny_model<double>(9);
  const std::vector<TokenId> tokens{5, 6, 7, 1};
  const auto base = model.mask_logits(tokens, 3);
  model.mutable_parameters().head *= 2.0;
  const auto doubled = model.mask_logits(tokens, 3);
  EXPECT_LT((doubled - 2.0 * base).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Model, MaskIndexOutOfRangeIsAnError) {
  const auto model = tiny_model<float>(1);
  const std::vector<TokenId> tokens{5, 6, 1};
  EXPECT_THROW((void)model.mask_logits(tokens, 3), std::out_of_range);
}

TEST(Model, RejectsBadShapes) {
  const auto model = tiny_model<float>(1);
  EXPECT_THROW((void)model.forward_embeddings(Matrix<float>::Zero(3, 5)), std::invalid_argument);
  const std::vector<TokenId> long_sequence(49, 5);
  EXPECT_THROW((void)model.forward_tokens(long_sequence), std::invalid_argument);
}

TEST(Model, SoftmaxSumsToOneOnRandomInputs) {
  const auto model = tiny_model<float>(10);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto tokens = pp::testing::random_tokens(rng, 3 + static_cast<std::size_t>(trial % 12), 40);
    const auto logits = model.forward_tokens(tokens);
    for (Index r = 0; r < logits.rows(); ++r) {
      const RowVector<double> row = logits.row(r).cast<double>();
      EXPECT_NEAR(pp::softmax<double>(row).sum(), 1.0, 1e-6);
    }
  }
}

TEST(ModelGradient, MatchesCentralFiniteDifferences) {
  const auto model = tiny_model<double>(12);
  std::mt19937_64 rng(13);
  auto tokens = pp::testing::random_tokens(rng, 11, 40);
  tokens[10] = pp::Vocabulary::kMask;
  const Matrix<double> inputs = model.embed(tokens);
  const std::vector<Index> positions{10, 3};
  std::normal_distribution<double> normal;
  Matrix<double> weights(2, 40);
  for (Index i = 0; i < weights.size(); ++i) weights.data()[i] = normal(rng);
  const auto loss = weighted_log_softmax(weights);

  const auto analytic = model.grad_wrt_embeddings(inputs, positions, loss);
  auto value_at = [&](const Matrix<double>& x) {
    Matrix<double> logits(2, 40);
    const auto hidden = model.encode(x).hidden;
    for (std::size_t r = 0; r < positions.size(); ++r)
      logits.row(static_cast<Index>(r)) = model.scores(hidden.row(positions[r]));
    return loss(logits).value;
  };
  EXPECT_NEAR(analytic.loss, value_at(inputs), 1e-12);

  std::uniform_int_distribution<Index> row(0, inputs.rows() - 1), col(0, inputs.cols() - 1);
  const double h = 1e-4;
  for (int probe = 0; probe < 20; ++probe) {
    const Index r = row(rng), c = col(rng);
    Matrix<double> plus = inputs, minus = inputs;
    plus(r, c) += h;
    minus(r, c) -= h;
    const double numeric = (value_at(plus) - value_at(minus)) / (2 * h);
    EXPECT_LT(relative_error(numeric, analytic.gradient(r, c)), 1e-4)
        << "coordinate (" << r << ", " << c << "): fd " << numeric << " vs " << analytic.gradient(r, c);
  }
}

TEST(ModelGradient, ConstantLossHasZeroGradient) {
  const auto model = tiny_model<double>(14);
  const std::vector<TokenId> tokens{5, 6, 7, 1};
  const std::vector<Index> positions{3};
  const auto g = model.grad_wrt_embeddings(model.embed(tokens), positions, [](const Matrix<double>& logits) {
    return pp::LossValue<double>{3.5, Matrix<double>::Zero(logits.rows(), logits.cols())};
  });
  EXPECT_EQ(g.loss, 3.5);
  EXPECT_EQ(g.gradient.cwiseAbs().maxCoeff(), 0.0);
}

TEST(ModelGradient, IsLinearInTheLoss) {
  const auto model = tiny_model<double>(15);
  const std::vector<TokenId> tokens{5, 6, 7, 8, 1};
  const auto inputs = model.embed(tokens);
  const std::vector<Index> positions{4};
  const std::vector<TokenId> a{5}, b{9, 10};
  auto loss_a = [&](const Matrix<double>& z) {
    auto v = pp::set_nll<double>(z.row(0), a);
    return v;
  };
  auto loss_b = [&](const Matrix<double>& z) { return pp::set_nll<double>(z.row(0), b); };
  auto loss_sum = [&](const Matrix<double>& z) {
    auto x = loss_a(z), y = loss_b(z);
    return pp::LossValue<double>{x.value + y.value, x.gradient + y.gradient};
  };
  const auto ga = model.grad_wrt_embeddings(inputs, positions, loss_a);
  const auto gb = model.grad_wrt_embeddings(inputs, positions, loss_b);
  const auto gs = model.grad_wrt_embeddings(inputs, positions, loss_sum);
  EXPECT_LT((gs.gradient - ga.gradient - gb.gradient).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ModelGradient, NonScalarLossIsRejected) {
  const auto model = tiny_model<double>(16);
  const std::vector<TokenId> tokens{5, 6, 1};
  const std::vector<Index> positions{2};
  EXPECT_THROW((void)model.grad_wrt_embeddings(model.embed(tokens), positions,
                                               [](const Matrix<double>& logits) {
                                                 return pp::LossValue<double>{
                                                     0.0, Matrix<double>::Zero(2, logits.cols())};
                                               }),
               std::invalid_argument);
}

TEST(ModelGradient, ParameterGradientsMatchFiniteDifferences) {
  auto model = tiny_model<double>(17);
  const std::vector<TokenId> tokens{5, 9, 12, 7, 1};
  const std::vector<TokenId> targets{6};
  auto loss_of = [&](const pp::MaskedLM<double>& m) {
    return pp::set_nll<double>(m.mask_logits(tokens, 4), targets).value;
  };
  const auto trace = model.encode(model.embed(tokens));
  const auto value = pp::set_nll<double>(model.scores(trace.hidden.row(4)), targets);
  Matrix<double> d_hidden = Matrix<double>::Zero(5, model.d_model());
  d_hidden.row(4) = model.head_backward(value.gradient);
  auto grads = model.parameters().zeros_like();
  (void)model.backward(trace, d_hidden, &grads);

  std::mt19937_64 rng(18);
  const double h = 1e-5;
  auto check = [&](Matrix<double>& param, const Matrix<double>& grad, const char* name) {
    std::uniform_int_distribution<Index> pick(0, param.size() - 1);
    for (int probe = 0; probe < 5; ++probe) {
      const Index i = pick(rng);
      const double saved = param.data()[i];
      param.data()[i] = saved + h;
      const double up = loss_of(model);
      param.data()[i] = saved - h;
      const double down = loss_of(model);
      param.data()[i] = saved;
      EXPECT_LT(relative_error((up - down) / (2 * h), grad.data()[i]), 1e-4) << name << "[" << i << "]";
    }
  };
  auto& p = model.mutable_parameters();
  check(p.layers[0].wq, grads.layers[0].wq, "wq");
  check(p.layers[0].wk, grads.layers[0].wk, "wk");
  check(p.layers[1].wv, grads.layers[1].wv, "wv");
  check(p.layers[1].w1, grads.layers[1].w1, "w1");
  check(p.layers[0].b2, grads.layers[0].b2, "b2");
  check(p.layers[0].ln1_gain, grads.layers[0].ln1_gain, "ln1_gain");
  check(p.final_bias, grads.final_bias, "final_bias");
}
