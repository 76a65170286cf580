#pragma once

#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "poisonprompt/common.hpp"
#include "poisonprompt/vocabulary.hpp"

namespace poisonprompt {

struct ModelConfig {
  Index vocab_size = 2000;
  Index d_model = 64;
  Index num_heads = 4;
  Index num_layers = 2;
  Index ffn_dim = 256;
  Index max_length = 64;
  /// Use the embedding table as the LM head (w = E^T) instead of a separate matrix.
  bool tie_head = false;
  double init_std = 0.02;
  double embedding_init_std = 1.0;
  double layer_norm_eps = 1e-5;

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    require(vocab_size > Vocabulary::kNumReserved, "vocab_size too small");
    require(d_model > 0 && num_heads > 0 && d_model % num_heads == 0,
            "d_model must be a positive multiple of num_heads");
    require(num_layers >= 0 && ffn_dim > 0 && max_length > 0, "invalid model dimensions");
  }
};

/// 1 marks a position other positions may attend to; empty means all.
using KeyMask = std::vector<std::uint8_t>;

template <class S>
struct LayerParameters {
  Matrix<S> ln1_gain, ln1_bias;
  Matrix<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Matrix<S> ln2_gain, ln2_bias;
  Matrix<S> w1, b1, w2, b2;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "ln1_gain", ln1_gain);
    f(prefix + "ln1_bias", ln1_bias);
    f(prefix + "wq", wq);
    f(prefix + "bq", bq);
    f(prefix + "wk", wk);
    f(prefix + "bk", bk);
    f(prefix + "wv", wv);
    f(prefix + "bv", bv);
    f(prefix + "wo", wo);
    f(prefix + "bo", bo);
    f(prefix + "ln2_gain", ln2_gain);
    f(prefix + "ln2_bias", ln2_bias);
    f(prefix + "w1", w1);
    f(prefix + "b1", b1);
    f(prefix + "w2", w2);
    f(prefix + "b2", b2);
  }
};

/// Every trainable array of the model. Biases and gains are 1 x n matrices.
template <class S>
struct Parameters {
  Matrix<S> embedding;  // |V| x d
  std::vector<LayerParameters<S>> layers;
  Matrix<S> final_gain, final_bias;
  Matrix<S> head;  // d x |V|; empty when tied

  template <class F>
  void visit(F&& f) {
    f(std::string("embedding"), embedding);
    for (std::size_t l = 0; l < layers.size(); ++l)
      layers[l].visit("layers." + std::to_string(l) + ".", f);
    f(std::string("final_gain"), final_gain);
    f(std::string("final_bias"), final_bias);
    if (head.size() > 0) f(std::string("head"), head);
  }

  template <class F>
  void visit(F&& f) const {
    const_cast<Parameters*>(this)->visit([&](const std::string& name, Matrix<S>& m) {
      f(name, static_cast<const Matrix<S>&>(m));
    });
  }

  /// Same shapes, all zeros.
  [[nodiscard]] Parameters zeros_like() const {
    Parameters out = *this;
    out.visit([](const std::string&, Matrix<S>& m) { m.setZero(); });
    return out;
  }

  Parameters& operator+=(const Parameters& other) {
    std::vector<const Matrix<S>*> rhs;
    other.visit([&](const std::string&, const Matrix<S>& m) { rhs.push_back(&m); });
    std::size_t i = 0;
    visit([&](const std::string&, Matrix<S>& m) { m += *rhs[i++]; });
    return *this;
  }

  bool operator==(const Parameters& other) const {
    std::vector<const Matrix<S>*> rhs;
    other.visit([&](const std::string&, const Matrix<S>& m) { rhs.push_back(&m); });
    bool equal = true;
    std::size_t i = 0;
    visit([&](const std::string&, const Matrix<S>& m) {
      if (i >= rhs.size() || m.rows() != rhs[i]->rows() || m.cols() != rhs[i]->cols() ||
          !(m.array() == rhs[i]->array()).all())
        equal = false;
      ++i;
    });
    return equal && i == rhs.size();
  }
};

/// Intermediate values from one encoder pass, kept for backpropagation.
template <class S>
struct LayerTrace {
  Matrix<S> input;
  Matrix<S> ln1_hat;
  ColVector<S> ln1_inv_std;
  Matrix<S> ln1_out;
  Matrix<S> q, k, v;
  std::vector<Matrix<S>> probs;
  Matrix<S> attended;
  Matrix<S> mid;
  Matrix<S> ln2_hat;
  ColVector<S> ln2_inv_std;
  Matrix<S> ln2_out;
  Matrix<S> ffn_pre;
  Matrix<S> ffn_act;
};

template <class S>
struct EncoderTrace {
  std::vector<LayerTrace<S>> layers;
  Matrix<S> final_input;
  Matrix<S> final_hat;
  ColVector<S> final_inv_std;
  /// f_transformer(x): n x d hidden states after the final layer norm.
  Matrix<S> hidden;
  KeyMask key_mask;
};

/// Scalar loss of a set of logit rows together with its gradient.
template <class S>
struct LossValue {
  S value{};
  Matrix<S> gradient;
};

template <class S>
using LossFunctional = std::function<LossValue<S>(const Matrix<S>& logits)>;

template <class S>
struct EmbeddingGradient {
  S loss{};
  Matrix<S> gradient;  // n x d
};

namespace detail {

template <class S>
inline S gelu(S x) {
  constexpr S c = S(0.7978845608028654);
  return S(0.5) * x * (S(1) + std::tanh(c * (x + S(0.044715) * x * x * x)));
}

template <class S>
inline S gelu_grad(S x) {
  constexpr S c = S(0.7978845608028654);
  const S t = std::tanh(c * (x + S(0.044715) * x * x * x));
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * c * (S(1) + S(3 * 0.044715) * x * x);
}

template <class S>
void layer_norm(const Matrix<S>& x, const Matrix<S>& gain, const Matrix<S>& bias, S eps,
                Matrix<S>& hat, ColVector<S>& inv_std, Matrix<S>& out) {
  const ColVector<S> mean = x.rowwise().mean();
  hat = x.colwise() - mean;
  inv_std = ((hat.array().square().rowwise().sum() / S(x.cols())) + eps).rsqrt().matrix();
  hat = inv_std.asDiagonal() * hat;
  out = (hat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
}

template <class S>
Matrix<S> layer_norm_backward(const Matrix<S>& d_out, const Matrix<S>& hat, const ColVector<S>& inv_std,
                              const Matrix<S>& gain, Matrix<S>* d_gain, Matrix<S>* d_bias) {
  if (d_gain) *d_gain += (d_out.array() * hat.array()).colwise().sum().matrix();
  if (d_bias) *d_bias += d_out.colwise().sum();
  const Matrix<S> d_hat = (d_out.array().rowwise() * gain.row(0).array()).matrix();
  const S width = S(d_out.cols());
  const ColVector<S> mean_d = d_hat.rowwise().sum() / width;
  const ColVector<S> mean_dh = (d_hat.array() * hat.array()).rowwise().sum().matrix() / width;
  Matrix<S> d_x = (d_hat.colwise() - mean_d) - (hat.array().colwise() * mean_dh.array()).matrix();
  return inv_std.asDiagonal() * d_x;
}

template <class S>
Matrix<S> sinusoidal_positions(Index length, Index width) {
  Matrix<S> pe(length, width);
  for (Index p = 0; p < length; ++p)
    for (Index i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      const double angle = static_cast<double>(p) * rate;
      pe(p, i) = static_cast<S>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

}  // namespace detail

/// Small pre-LayerNorm transformer encoder with a linear LM head, trained as
/// a masked language model. Apart from mutable_parameters(), which the
/// pretrainer uses, all operations are const.
template <class S>
class MaskedLM {
 public:
  using Scalar = S;

  MaskedLM() = default;

  MaskedLM(ModelConfig config, Vocabulary vocab, Parameters<S> params)
      : config_(config), vocab_(std::move(vocab)), params_(std::move(params)) {
    config_.validate();
    require(vocab_.size() == config_.vocab_size, "vocabulary size does not match model config");
    positions_ = detail::sinusoidal_positions<S>(config_.max_length, config_.d_model);
  }

  /// Fresh model with weights drawn from N(0, init_std), embeddings from
  /// N(0, embedding_init_std), zero biases and unit layer-norm gains.
  static MaskedLM initialize(const ModelConfig& config, Vocabulary vocab, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto random = [&](Index r, Index c, double std) {
      Matrix<S> m(r, c);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(normal(rng) * std);
      return m;
    };
    auto zeros = [](Index c) { return Matrix<S>::Zero(1, c).eval(); };
    auto ones = [](Index c) { return Matrix<S>::Ones(1, c).eval(); };
    const Index d = config.d_model;
    Parameters<S> p;
    p.embedding = random(config.vocab_size, d, config.embedding_init_std);
    for (Index l = 0; l < config.num_layers; ++l) {
      LayerParameters<S> layer;
      layer.ln1_gain = ones(d);
      layer.ln1_bias = zeros(d);
      layer.wq = random(d, d, config.init_std);
      layer.bq = zeros(d);
      layer.wk = random(d, d, config.init_std);
      layer.bk = zeros(d);
      layer.wv = random(d, d, config.init_std);
      layer.bv = zeros(d);
      layer.wo = random(d, d, config.init_std);
      layer.bo = zeros(d);
      layer.ln2_gain = ones(d);
      layer.ln2_bias = zeros(d);
      layer.w1 = random(d, config.ffn_dim, config.init_std);
      layer.b1 = zeros(config.ffn_dim);
      layer.w2 = random(config.ffn_dim, d, config.init_std);
      layer.b2 = zeros(d);
      p.layers.push_back(std::move(layer));
    }
    p.final_gain = ones(d);
    p.final_bias = zeros(d);
    if (!config.tie_head) p.head = random(d, config.vocab_size, config.init_std);
    return MaskedLM(config, std::move(vocab), std::move(p));
  }

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const Vocabulary& vocabulary() const { return vocab_; }
  [[nodiscard]] const Parameters<S>& parameters() const { return params_; }
  [[nodiscard]] Parameters<S>& mutable_parameters() { return params_; }
  [[nodiscard]] Index d_model() const { return config_.d_model; }
  [[nodiscard]] Index vocab_size() const { return config_.vocab_size; }
  [[nodiscard]] const Matrix<S>& embedding_table() const { return params_.embedding; }

  /// The LM head w as a d x |V| matrix (a copy of E^T when tied).
  [[nodiscard]] Matrix<S> head() const {
    return config_.tie_head ? Matrix<S>(params_.embedding.transpose()) : params_.head;
  }

  /// Hidden rows times w.
  template <class Derived>
  [[nodiscard]] Matrix<S> logits_of(const Eigen::MatrixBase<Derived>& hidden) const {
    if (config_.tie_head) return hidden * params_.embedding.transpose();
    return hidden * params_.head;
  }

  /// Maps d(loss)/d(logits) back to d(loss)/d(hidden).
  [[nodiscard]] Matrix<S> head_backward(const Matrix<S>& d_logits) const {
    if (config_.tie_head) return d_logits * params_.embedding;
    return d_logits * params_.head.transpose();
  }

  template <class T>
  [[nodiscard]] MaskedLM<T> cast() const {
    Parameters<T> out;
    std::vector<Matrix<T>> converted;
    params_.visit([&](const std::string&, const Matrix<S>& m) { converted.push_back(m.template cast<T>()); });
    out.embedding = converted[0];
    std::size_t i = 1;
    for (Index l = 0; l < config_.num_layers; ++l) {
      LayerParameters<T> layer;
      layer.visit("", [&](const std::string&, Matrix<T>& m) { m = converted[i++]; });
      out.layers.push_back(std::move(layer));
    }
    out.final_gain = converted[i++];
    out.final_bias = converted[i++];
    if (!config_.tie_head) out.head = converted[i++];
    return MaskedLM<T>(config_, vocab_, std::move(out));
  }

  /// Row i is E[tokens[i]].
  [[nodiscard]] Matrix<S> embed(std::span<const TokenId> tokens) const {
    Matrix<S> out(static_cast<Index>(tokens.size()), config_.d_model);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const TokenId t = tokens[i];
      if (t < 0 || t >= config_.vocab_size)
        throw std::out_of_range("token id " + std::to_string(t) + " out of range");
      out.row(static_cast<Index>(i)) = params_.embedding.row(t);
    }
    return out;
  }

  /// Key mask that hides [PAD] tokens.
  [[nodiscard]] static KeyMask padding_mask(std::span<const TokenId> tokens) {
    KeyMask mask(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) mask[i] = tokens[i] != Vocabulary::kPad;
    return mask;
  }

  [[nodiscard]] EncoderTrace<S> encode(const Matrix<S>& inputs, const KeyMask& key_mask = {}) const {
    const Index n = inputs.rows();
    if (inputs.cols() != config_.d_model)
      throw std::invalid_argument("input embedding dimension " + std::to_string(inputs.cols()) +
                                  " does not match model width " + std::to_string(config_.d_model));
    if (n > config_.max_length)
      throw std::invalid_argument("sequence length " + std::to_string(n) + " exceeds max_length " +
                                  std::to_string(config_.max_length));
    require(key_mask.empty() || static_cast<Index>(key_mask.size()) == n, "key mask length mismatch");

    const S eps = static_cast<S>(config_.layer_norm_eps);
    const Index heads = config_.num_heads;
    const Index dh = config_.d_model / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));

    EncoderTrace<S> trace;
    trace.key_mask = key_mask;
    Matrix<S> x = inputs + positions_.topRows(n);
    trace.layers.resize(params_.layers.size());
    for (std::size_t l = 0; l < params_.layers.size(); ++l) {
      const auto& p = params_.layers[l];
      auto& t = trace.layers[l];
      t.input = x;
      detail::layer_norm(x, p.ln1_gain, p.ln1_bias, eps, t.ln1_hat, t.ln1_inv_std, t.ln1_out);
      t.q = (t.ln1_out * p.wq).rowwise() + p.bq.row(0);
      t.k = (t.ln1_out * p.wk).rowwise() + p.bk.row(0);
      t.v = (t.ln1_out * p.wv).rowwise() + p.bv.row(0);
      t.attended.resize(n, config_.d_model);
      t.probs.resize(static_cast<std::size_t>(heads));
      for (Index h = 0; h < heads; ++h) {
        Matrix<S> scores = (t.q.middleCols(h * dh, dh) * t.k.middleCols(h * dh, dh).transpose()) * scale;
        softmax_rows(scores, key_mask);
        t.attended.middleCols(h * dh, dh) = scores * t.v.middleCols(h * dh, dh);
        t.probs[static_cast<std::size_t>(h)] = std::move(scores);
      }
      t.mid = x + ((t.attended * p.wo).rowwise() + p.bo.row(0));
      detail::layer_norm(t.mid, p.ln2_gain, p.ln2_bias, eps, t.ln2_hat, t.ln2_inv_std, t.ln2_out);
      t.ffn_pre = (t.ln2_out * p.w1).rowwise() + p.b1.row(0);
      t.ffn_act = t.ffn_pre.unaryExpr([](S v) { return detail::gelu(v); });
      x = t.mid + ((t.ffn_act * p.w2).rowwise() + p.b2.row(0));
    }
    trace.final_input = x;
    detail::layer_norm(x, params_.final_gain, params_.final_bias, eps, trace.final_hat, trace.final_inv_std,
                       trace.hidden);
    return trace;
  }

  /// Logits (n x |V|) for every position of an embedding sequence.
  [[nodiscard]] Matrix<S> forward_embeddings(const Matrix<S>& inputs, const KeyMask& key_mask = {}) const {
    return logits_of(encode(inputs, key_mask).hidden);
  }

  [[nodiscard]] Matrix<S> forward_tokens(std::span<const TokenId> tokens) const {
    return forward_embeddings(embed(tokens), padding_mask(tokens));
  }

  /// Batched forward; each sequence is encoded independently.
  [[nodiscard]] std::vector<Matrix<S>> forward_batch(const std::vector<std::vector<TokenId>>& batch) const {
    std::vector<Matrix<S>> out(batch.size());
    parallel_for(batch.size(), [&](std::size_t i) { out[i] = forward_tokens(batch[i]); });
    return out;
  }

  /// Pre-softmax scores f_transformer(x)[i] . w over the vocabulary.
  [[nodiscard]] RowVector<S> mask_logits(const Matrix<S>& inputs, Index mask_index,
                                         const KeyMask& key_mask = {}) const {
    if (mask_index < 0 || mask_index >= inputs.rows())
      throw std::out_of_range("mask index " + std::to_string(mask_index) + " out of range");
    return scores(encode(inputs, key_mask).hidden.row(mask_index));
  }

  [[nodiscard]] RowVector<S> mask_logits(std::span<const TokenId> tokens, Index mask_index) const {
    return mask_logits(embed(tokens), mask_index, padding_mask(tokens));
  }

  /// Scores of one hidden state against every vocabulary entry.
  template <class Derived>
  [[nodiscard]] RowVector<S> scores(const Eigen::MatrixBase<Derived>& hidden_row) const {
    if (config_.tie_head) return hidden_row * params_.embedding.transpose();
    return hidden_row * params_.head;
  }

  /// Backpropagates d(loss)/d(hidden) to the input embeddings. When `grads`
  /// is non-null, parameter gradients (excluding the embedding table, which
  /// the caller scatters) are accumulated into it.
  [[nodiscard]] Matrix<S> backward(const EncoderTrace<S>& trace, const Matrix<S>& d_hidden,
                                   Parameters<S>* grads = nullptr) const {
    const Index heads = config_.num_heads;
    const Index dh = config_.d_model / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    Matrix<S> dx = detail::layer_norm_backward(d_hidden, trace.final_hat, trace.final_inv_std, params_.final_gain,
                                               grads ? &grads->final_gain : nullptr,
                                               grads ? &grads->final_bias : nullptr);
    for (std::size_t li = params_.layers.size(); li-- > 0;) {
      const auto& p = params_.layers[li];
      const auto& t = trace.layers[li];
      LayerParameters<S>* g = grads ? &grads->layers[li] : nullptr;

      // Feed-forward block: x = mid + gelu(ln2(mid) W1 + b1) W2 + b2
      const Matrix<S>& d_ffn_out = dx;
      if (g) {
        g->w2.noalias() += t.ffn_act.transpose() * d_ffn_out;
        g->b2 += d_ffn_out.colwise().sum();
      }
      Matrix<S> d_act = d_ffn_out * p.w2.transpose();
      d_act.array() *= t.ffn_pre.unaryExpr([](S v) { return detail::gelu_grad(v); }).array();
      if (g) {
        g->w1.noalias() += t.ln2_out.transpose() * d_act;
        g->b1 += d_act.colwise().sum();
      }
      const Matrix<S> d_ln2 = d_act * p.w1.transpose();
      Matrix<S> d_mid = dx + detail::layer_norm_backward(d_ln2, t.ln2_hat, t.ln2_inv_std, p.ln2_gain,
                                                         g ? &g->ln2_gain : nullptr, g ? &g->ln2_bias : nullptr);

      // Attention block: mid = input + attn(ln1(input)) Wo + bo
      if (g) {
        g->wo.noalias() += t.attended.transpose() * d_mid;
        g->bo += d_mid.colwise().sum();
      }
      const Matrix<S> d_att = d_mid * p.wo.transpose();
      Matrix<S> dq(t.q.rows(), t.q.cols()), dk(t.k.rows(), t.k.cols()), dv(t.v.rows(), t.v.cols());
      for (Index h = 0; h < heads; ++h) {
        const auto& probs = t.probs[static_cast<std::size_t>(h)];
        const auto d_head = d_att.middleCols(h * dh, dh);
        const Matrix<S> d_probs = d_head * t.v.middleCols(h * dh, dh).transpose();
        dv.middleCols(h * dh, dh) = probs.transpose() * d_head;
        const ColVector<S> row_dot = (probs.array() * d_probs.array()).rowwise().sum().matrix();
        const Matrix<S> d_scores = ((probs.array() * (d_probs.colwise() - row_dot).array()) * scale).matrix();
        dq.middleCols(h * dh, dh) = d_scores * t.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh) = d_scores.transpose() * t.q.middleCols(h * dh, dh);
      }
      if (g) {
        g->wq.noalias() += t.ln1_out.transpose() * dq;
        g->wk.noalias() += t.ln1_out.transpose() * dk;
        g->wv.noalias() += t.ln1_out.transpose() * dv;
        g->bq += dq.colwise().sum();
        g->bk += dk.colwise().sum();
        g->bv += dv.colwise().sum();
      }
      const Matrix<S> d_ln1 = dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
      dx = d_mid + detail::layer_norm_backward(d_ln1, t.ln1_hat, t.ln1_inv_std, p.ln1_gain,
                                               g ? &g->ln1_gain : nullptr, g ? &g->ln1_bias : nullptr);
    }
    return dx;
  }

  /// Gradient of a scalar loss of the logits at `positions` with respect to
  /// every input embedding vector.
  [[nodiscard]] EmbeddingGradient<S> grad_wrt_embeddings(const Matrix<S>& inputs, std::span<const Index> positions,
                                                         const LossFunctional<S>& loss,
                                                         const KeyMask& key_mask = {}) const {
    const auto trace = encode(inputs, key_mask);
    Matrix<S> selected(static_cast<Index>(positions.size()), config_.d_model);
    for (std::size_t r = 0; r < positions.size(); ++r) {
      if (positions[r] < 0 || positions[r] >= inputs.rows())
        throw std::out_of_range("loss position " + std::to_string(positions[r]) + " out of range");
      selected.row(static_cast<Index>(r)) = trace.hidden.row(positions[r]);
    }
    const Matrix<S> logits = logits_of(selected);
    LossValue<S> value = loss(logits);
    if (value.gradient.rows() != logits.rows() || value.gradient.cols() != logits.cols())
      throw std::invalid_argument("loss functional must be scalar-valued with a gradient shaped like its logits");
    Matrix<S> d_hidden = Matrix<S>::Zero(inputs.rows(), config_.d_model);
    const Matrix<S> d_selected = head_backward(value.gradient);
    for (std::size_t r = 0; r < positions.size(); ++r) d_hidden.row(positions[r]) += d_selected.row(static_cast<Index>(r));
    return {value.value, backward(trace, d_hidden)};
  }

 private:
  static void softmax_rows(Matrix<S>& scores, const KeyMask& key_mask) {
    for (Index r = 0; r < scores.rows(); ++r) {
      S peak = -std::numeric_limits<S>::infinity();
      for (Index c = 0; c < scores.cols(); ++c)
        if (key_mask.empty() || key_mask[static_cast<std::size_t>(c)]) peak = std::max(peak, scores(r, c));
      S total = 0;
      for (Index c = 0; c < scores.cols(); ++c) {
        if (key_mask.empty() || key_mask[static_cast<std::size_t>(c)]) {
          scores(r, c) = std::exp(scores(r, c) - peak);
          total += scores(r, c);
        } else {
          scores(r, c) = 0;
        }
      }
      if (total > 0) scores.row(r) /= total;
    }
  }

  ModelConfig config_;
  Vocabulary vocab_;
  Parameters<S> params_;
  Matrix<S> positions_;
};

/// Negative log of the softmax mass on `targets` (distinct ids), plus its
/// logit gradient.
template <class S>
LossValue<S> set_nll(const RowVector<S>& logits, std::span<const TokenId> targets) {
  require(!targets.empty(), "target token set is empty");
  const S total = log_sum_exp(logits);
  RowVector<S> picked(static_cast<Index>(targets.size()));
  for (std::size_t i = 0; i < targets.size(); ++i) picked[static_cast<Index>(i)] = logits[targets[i]];
  const S in_set = log_sum_exp(picked);
  LossValue<S> out;
  out.value = total - in_set;
  out.gradient = (logits.array() - total).exp().matrix();
  for (TokenId t : targets) out.gradient(0, t) -= std::exp(logits[t] - in_set);
  return out;
}

template <class S>
RowVector<S> softmax(const RowVector<S>& logits) {
  return (logits.array() - log_sum_exp(logits)).exp().matrix();
}

}  // namespace poisonprompt
