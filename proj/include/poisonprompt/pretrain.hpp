#pragma once

#include <random>
#include <vector>

#include "poisonprompt/common.hpp"
#include "poisonprompt/corpus.hpp"
#include "poisonprompt/model.hpp"

namespace poisonprompt {

struct PretrainConfig {
  int steps = 3000;
  int batch_size = 32;
  double learning_rate = 5e-3;
  double mask_probability = 0.15;
  int warmup_steps = 100;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 11;
};

template <class S>
struct PretrainResult {
  MaskedLM<S> model;
  /// Mean masked-token cross-entropy of each step's batch, before its update.
  std::vector<double> losses;
};

namespace detail {

struct MaskedSequence {
  std::vector<TokenId> corrupted;
  std::vector<Index> positions;
  std::vector<TokenId> originals;
};

/// BERT-style corruption: each position is selected with probability p (at
/// least one per sequence); selected positions become [MASK] 80% of the
/// time, a random token 10%, and stay unchanged 10%.
inline MaskedSequence mask_sequence(const std::vector<TokenId>& tokens, double p, Index vocab_size,
                                    std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<TokenId> random_token(Vocabulary::kNumReserved,
                                                      static_cast<TokenId>(vocab_size - 1));
  MaskedSequence out{tokens, {}, {}};
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (unit(rng) < p) out.positions.push_back(static_cast<Index>(i));
  if (out.positions.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, tokens.size() - 1);
    out.positions.push_back(static_cast<Index>(pick(rng)));
  }
  for (Index pos : out.positions) {
    auto& slot = out.corrupted[static_cast<std::size_t>(pos)];
    out.originals.push_back(slot);
    const double roll = unit(rng);
    if (roll < 0.8) slot = Vocabulary::kMask;
    else if (roll < 0.9) slot = random_token(rng);
  }
  return out;
}

/// Adds the gradient of the summed masked-token NLL of one sequence to
/// `grads`; returns the summed loss.
template <class S>
double accumulate_mlm_gradient(const MaskedLM<S>& model, const MaskedSequence& seq, Parameters<S>& grads) {
  const Matrix<S> inputs = model.embed(seq.corrupted);
  const auto trace = model.encode(inputs, MaskedLM<S>::padding_mask(seq.corrupted));
  const Index m = static_cast<Index>(seq.positions.size());
  Matrix<S> hidden(m, model.d_model());
  for (Index r = 0; r < m; ++r) hidden.row(r) = trace.hidden.row(seq.positions[static_cast<std::size_t>(r)]);
  const Matrix<S> logits = model.logits_of(hidden);
  Matrix<S> d_logits(m, model.vocab_size());
  double loss = 0;
  for (Index r = 0; r < m; ++r) {
    const TokenId target = seq.originals[static_cast<std::size_t>(r)];
    auto value = set_nll<S>(logits.row(r), std::span<const TokenId>(&target, 1));
    loss += static_cast<double>(value.value);
    d_logits.row(r) = value.gradient;
  }
  if (model.config().tie_head) grads.embedding.noalias() += d_logits.transpose() * hidden;
  else grads.head.noalias() += hidden.transpose() * d_logits;
  const Matrix<S> d_selected = model.head_backward(d_logits);
  Matrix<S> d_hidden = Matrix<S>::Zero(inputs.rows(), model.d_model());
  for (Index r = 0; r < m; ++r) d_hidden.row(seq.positions[static_cast<std::size_t>(r)]) = d_selected.row(r);
  const Matrix<S> d_inputs = model.backward(trace, d_hidden, &grads);
  for (std::size_t i = 0; i < seq.corrupted.size(); ++i)
    grads.embedding.row(seq.corrupted[i]) += d_inputs.row(static_cast<Index>(i));
  return loss;
}

}  // namespace detail

/// Trains a fresh MaskedLM (initialized from `init_seed`) on `corpus` with
/// the masked-token objective and Adam. Zero steps returns the
/// initialization unchanged.
template <class S = float>
PretrainResult<S> pretrain_mlm(const Dataset& corpus, const Vocabulary& vocab, const ModelConfig& model_config,
                               const PretrainConfig& config, std::uint64_t init_seed) {
  require(!corpus.empty(), "pretraining corpus is empty");
  require(config.steps >= 0 && config.batch_size >= 1, "invalid pretraining schedule");
  require(config.mask_probability > 0.0 && config.mask_probability <= 1.0, "mask_probability must lie in (0, 1]");
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (static_cast<Index>(corpus[i].query.size()) > model_config.max_length)
      throw std::invalid_argument("pretraining sequence " + std::to_string(i) + " has length " +
                                  std::to_string(corpus[i].query.size()) + " > max_length " +
                                  std::to_string(model_config.max_length));
    require(!corpus[i].query.empty(), "pretraining sequence " + std::to_string(i) + " is empty");
  }

  PretrainResult<S> result{MaskedLM<S>::initialize(model_config, vocab, init_seed), {}};
  auto& model = result.model;
  auto first_moment = model.parameters().zeros_like();
  auto second_moment = model.parameters().zeros_like();
  const auto zero = model.parameters().zeros_like();
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  constexpr std::size_t kChunks = 4;

  for (int step = 0; step < config.steps; ++step) {
    std::vector<detail::MaskedSequence> batch;
    batch.reserve(static_cast<std::size_t>(config.batch_size));
    std::size_t masked = 0;
    for (int b = 0; b < config.batch_size; ++b) {
      batch.push_back(detail::mask_sequence(corpus[pick(rng)].query, config.mask_probability,
                                            model.vocab_size(), rng));
      masked += batch.back().positions.size();
    }

    struct Partial {
      Parameters<S> grads;
      double loss = 0;
      Partial& operator+=(const Partial& o) {
        grads += o.grads;
        loss += o.loss;
        return *this;
      }
    };
    Partial total = parallel_chunk_sum(batch.size(), kChunks, Partial{zero, 0.0},
                                       [&](std::size_t i, Partial& acc) {
                                         acc.loss += detail::accumulate_mlm_gradient(model, batch[i], acc.grads);
                                       });
    const double inv = 1.0 / static_cast<double>(masked);
    result.losses.push_back(total.loss * inv);

    double norm_sq = 0;
    total.grads.visit([&](const std::string&, Matrix<S>& g) {
      g *= static_cast<S>(inv);
      norm_sq += static_cast<double>(g.squaredNorm());
    });
    if (!std::isfinite(norm_sq)) throw NonFiniteError("non-finite gradient at pretraining step " + std::to_string(step));
    const double norm = std::sqrt(norm_sq);
    const double clip = (config.grad_clip > 0 && norm > config.grad_clip) ? config.grad_clip / norm : 1.0;

    const double warm = config.warmup_steps > 0 ? std::min(1.0, (step + 1.0) / config.warmup_steps) : 1.0;
    const double lr = config.learning_rate * warm;
    const double c1 = 1.0 - std::pow(config.beta1, step + 1);
    const double c2 = 1.0 - std::pow(config.beta2, step + 1);

    std::vector<Matrix<S>*> grad_list, m_list, v_list;
    total.grads.visit([&](const std::string&, Matrix<S>& g) { grad_list.push_back(&g); });
    first_moment.visit([&](const std::string&, Matrix<S>& g) { m_list.push_back(&g); });
    second_moment.visit([&](const std::string&, Matrix<S>& g) { v_list.push_back(&g); });
    std::size_t i = 0;
    model.mutable_parameters().visit([&](const std::string&, Matrix<S>& param) {
      const Matrix<S> g = *grad_list[i] * static_cast<S>(clip);
      Matrix<S>& m = *m_list[i];
      Matrix<S>& v = *v_list[i];
      m = static_cast<S>(config.beta1) * m + static_cast<S>(1 - config.beta1) * g;
      v = static_cast<S>(config.beta2) * v + static_cast<S>(1 - config.beta2) * g.cwiseProduct(g);
      param.array() -= static_cast<S>(lr) * (m.array() / static_cast<S>(c1)) /
                       ((v.array() / static_cast<S>(c2)).sqrt() + static_cast<S>(config.adam_eps));
      ++i;
    });
  }
  return result;
}

/// Fraction of [MASK]-replaced positions whose argmax prediction recovers the
/// original token.
template <class S>
double masked_token_accuracy(const MaskedLM<S>& model, const Dataset& data, double mask_probability,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<TokenId>> corrupted(data.size());
  std::vector<std::vector<Index>> positions(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    corrupted[i] = data[i].query;
    for (std::size_t j = 0; j < corrupted[i].size(); ++j)
      if (unit(rng) < mask_probability) {
        positions[i].push_back(static_cast<Index>(j));
        corrupted[i][j] = Vocabulary::kMask;
      }
  }
  std::vector<std::pair<std::size_t, std::size_t>> counts(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    if (positions[i].empty()) return;
    const auto hidden = model.encode(model.embed(corrupted[i]), MaskedLM<S>::padding_mask(corrupted[i])).hidden;
    for (Index pos : positions[i]) {
      Index best = 0;
      model.scores(hidden.row(pos)).maxCoeff(&best);
      counts[i].first += best == data[i].query[static_cast<std::size_t>(pos)];
      counts[i].second += 1;
    }
  });
  std::size_t hit = 0, total = 0;
  for (auto [h, t] : counts) {
    hit += h;
    total += t;
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace poisonprompt
