#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sltgnn/model.hpp"

namespace sltgnn {

/// Raised when the loss stops being finite; carries the epoch.
class training_error : public std::runtime_error {
 public:
  training_error(std::size_t epoch, const std::string& what)
      : std::runtime_error("epoch " + std::to_string(epoch) + ": " + what),
        epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

struct TrainConfig {
  std::size_t epochs_T = 400;
  double learning_rate = 0.01;
  double weight_decay = 0.0;
  std::size_t eval_every = 1;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs_T < 1) throw std::invalid_argument("TrainConfig: epochs < 1");
    if (learning_rate <= 0.0)
      throw std::invalid_argument("TrainConfig: learning rate must be > 0");
    if (eval_every < 1)
      throw std::invalid_argument("TrainConfig: eval_every < 1");
  }
};

/// Mean negative log-softmax over the index set; the returned gradient is
/// nonzero only on those rows.
inline std::pair<double, DenseMatrix> cross_entropy_loss(
    const DenseMatrix& logits, std::span<const std::int32_t> labels,
    std::span<const std::uint32_t> index_set) {
  if (index_set.empty())
    throw std::invalid_argument("cross_entropy_loss: empty index set");
  const std::size_t classes = logits.cols;
  DenseMatrix dlogits(logits.rows, classes);
  double loss = 0.0;
  const double inv_n = 1.0 / double(index_set.size());
  for (std::uint32_t r : index_set) {
    std::int32_t label = labels[r];
    if (label < 0 || std::size_t(label) >= classes)
      throw std::invalid_argument("cross_entropy_loss: label out of range");
    auto row = logits.row(r);
    double mx = row[0];
    for (float v : row) mx = std::max(mx, double(v));
    double denom = 0.0;
    for (float v : row) denom += std::exp(double(v) - mx);
    loss += -(double(row[label]) - mx - std::log(denom));
    for (std::size_t c = 0; c < classes; ++c) {
      double p = std::exp(double(row[c]) - mx) / denom;
      dlogits.at(r, c) =
          static_cast<float>((p - (c == std::size_t(label) ? 1.0 : 0.0)) *
                             inv_n);
    }
  }
  return {loss * inv_n, std::move(dlogits)};
}

/// Argmax accuracy over a split (ties resolve to the lowest class).
inline double accuracy(const DenseMatrix& logits,
                       std::span<const std::int32_t> labels,
                       std::span<const std::uint32_t> split) {
  if (split.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::uint32_t r : split) {
    auto row = logits.row(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
      if (row[c] > row[best]) best = c;
    correct += (std::int32_t(best) == labels[r]);
  }
  return double(correct) / double(split.size());
}

/// Adam with bias correction. One state covers every trainable tensor:
/// all score tensors first, then BN gamma/beta pairs.
struct AdamState {
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
  std::size_t step_count = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState make(const std::vector<std::size_t>& tensor_sizes) {
    AdamState st;
    for (std::size_t n : tensor_sizes) {
      st.first_moment.emplace_back(n, 0.0f);
      st.second_moment.emplace_back(n, 0.0f);
    }
    return st;
  }
};

/// One bias-corrected Adam update of a single tensor. Weight decay is
/// decoupled from the adaptive term.
inline void adam_step_tensor(AdamState& state, std::size_t tensor_idx,
                             std::span<float> params,
                             std::span<const float> grads, double lr,
                             double weight_decay) {
  auto& m = state.first_moment[tensor_idx];
  auto& v = state.second_moment[tensor_idx];
  if (m.size() != params.size() || grads.size() != params.size())
    throw std::invalid_argument("adam_step: shape mismatch");
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, double(state.step_count));
  const double bc2 = 1.0 - std::pow(b2, double(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double g = grads[i];
    double mi = b1 * m[i] + (1.0 - b1) * g;
    double vi = b2 * v[i] + (1.0 - b2) * g * g;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    double mhat = mi / bc1;
    double vhat = vi / bc2;
    double upd = lr * mhat / (std::sqrt(vhat) + state.eps);
    if (weight_decay != 0.0) upd += lr * weight_decay * params[i];
    params[i] = static_cast<float>(params[i] - upd);
  }
}

struct EpochRecord {
  std::size_t epoch;
  double live_k1;  // base-coat live sparsity
  double loss;
  double acc_train, acc_val, acc_test;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  double test_at_best = 0.0;
  double train_at_best = 0.0;
};

namespace detail {

struct ParamSnapshot {
  std::vector<DenseMatrix> scores;
  std::vector<BatchNormState> bn;
};

inline ParamSnapshot snapshot(GnnModel& model) {
  ParamSnapshot s;
  for (auto* t : model.score_tensors()) s.scores.push_back(*t);
  for (auto* bn : model.bn_states()) s.bn.push_back(*bn);
  return s;
}

inline void restore(GnnModel& model, const ParamSnapshot& s) {
  auto tensors = model.score_tensors();
  for (std::size_t i = 0; i < tensors.size(); ++i) *tensors[i] = s.scores[i];
  auto bns = model.bn_states();
  for (std::size_t i = 0; i < bns.size(); ++i) *bns[i] = s.bn[i];
}

}  // namespace detail

/// Score-only training: weights stay frozen; scores (and BN affines) get
/// Adam updates through the straight-through mask gradient, under the
/// linear sparsity ramp. Returns the parameters of the best-validation
/// epoch among epochs already at the final sparsity, so the selected
/// model honors the configured K.
inline TrainResult train(
    GnnModel& model, const Graph& graph, const TrainConfig& cfg,
    const std::function<void(std::size_t, const ForwardCache&)>&
        epoch_observer = {}) {
  cfg.validate();
  graph.validate();
  const std::vector<double> K = model.resolved_sparsities();
  const std::size_t T = cfg.epochs_T;

  auto score_ptrs = model.score_tensors();
  auto bn_ptrs = model.bn_states();
  std::vector<std::size_t> sizes;
  for (auto* s : score_ptrs) sizes.push_back(s->size());
  for (auto* bn : bn_ptrs) {
    sizes.push_back(bn->gamma.size());
    sizes.push_back(bn->beta.size());
  }
  AdamState adam = AdamState::make(sizes);

  TrainResult result;
  result.best_val = -1.0;
  detail::ParamSnapshot best = detail::snapshot(model);

  for (std::size_t t = 1; t <= T; ++t) {
    std::vector<double> live_K = decay_schedule(K, t, T);

    auto fwd = model_forward(graph, model, live_K, /*use_batch_stats=*/true,
                             /*update_running=*/true);
    auto [loss, dlogits] =
        cross_entropy_loss(fwd.logits, model_labels(graph), graph.train_idx);
    if (!std::isfinite(loss))
      throw training_error(t, "loss diverged (non-finite)");
    if (epoch_observer) epoch_observer(t, fwd.cache);

    Gradients grads = model_backward(graph, model, fwd.cache, dlogits);
    auto dscores = score_gradients(model, grads);

    ++adam.step_count;
    std::size_t tensor_idx = 0;
    for (std::size_t s = 0; s < score_ptrs.size(); ++s, ++tensor_idx)
      adam_step_tensor(adam, tensor_idx, score_ptrs[s]->data,
                       dscores[s].data, cfg.learning_rate, cfg.weight_decay);
    for (auto* bn : bn_ptrs) {
      std::size_t ws = std::size_t(-1);
      for (std::size_t w = 0; w < model.layers.size(); ++w)
        if (model.layers[w].bn && &*model.layers[w].bn == bn) ws = w;
      const auto& g = grads.bn[ws];
      std::vector<float> zero(bn->gamma.size(), 0.0f);
      adam_step_tensor(adam, tensor_idx++, bn->gamma,
                       g.dgamma.empty() ? zero : g.dgamma, cfg.learning_rate,
                       0.0);
      adam_step_tensor(adam, tensor_idx++, bn->beta,
                       g.dbeta.empty() ? zero : g.dbeta, cfg.learning_rate,
                       0.0);
    }

    if (t % cfg.eval_every == 0 || t == T) {
      auto eval = model_forward(graph, model, live_K, false, false);
      EpochRecord rec;
      rec.epoch = t;
      rec.live_k1 = live_K.empty() ? 0.0 : live_K.front();
      rec.loss = loss;
      rec.acc_train = accuracy(eval.logits, model_labels(graph),
                               graph.train_idx);
      rec.acc_val = accuracy(eval.logits, model_labels(graph), graph.val_idx);
      rec.acc_test =
          accuracy(eval.logits, model_labels(graph), graph.test_idx);
      result.history.push_back(rec);

      // model selection once the ramp has reached the target sparsity
      if (2 * t >= T && rec.acc_val > result.best_val) {
        result.best_val = rec.acc_val;
        result.best_epoch = t;
        result.test_at_best = rec.acc_test;
        result.train_at_best = rec.acc_train;
        best = detail::snapshot(model);
      }
    }
  }
  detail::restore(model, best);
  return result;
}

/// Eval-mode accuracy of the model's current scores on a split, at the
/// final (undecayed) sparsities.
inline double evaluate(GnnModel& model, const Graph& graph,
                       std::span<const std::uint32_t> split) {
  auto live_K = model.resolved_sparsities();
  auto fwd = model_forward(graph, model, live_K, false, false);
  return accuracy(fwd.logits, model_labels(graph), split);
}

}  // namespace sltgnn
