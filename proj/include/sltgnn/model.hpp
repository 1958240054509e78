#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "sltgnn/graph.hpp"
#include "sltgnn/matrix.hpp"
#include "sltgnn/rand_init.hpp"
#include "sltgnn/supermask.hpp"

namespace sltgnn {

enum class Architecture : std::uint8_t { GCN = 0, GIN = 1, ResGCN = 2 };

inline const char* to_string(Architecture a) {
  switch (a) {
    case Architecture::GCN: return "gcn";
    case Architecture::GIN: return "gin";
    case Architecture::ResGCN: return "resgcn";
  }
  return "?";
}

/// Affine batch normalization over nodes (rows). gamma/beta are trained;
/// running statistics feed eval-mode forwards. Everything is stored at 32
/// bits and counted by the memory report.
struct BatchNormState {
  std::vector<float> gamma, beta, running_mean, running_var;
  float epsilon = 1e-5f;
  float momentum = 0.1f;

  static BatchNormState make(std::size_t width) {
    BatchNormState bn;
    bn.gamma.assign(width, 1.0f);
    bn.beta.assign(width, 0.0f);
    bn.running_mean.assign(width, 0.0f);
    bn.running_var.assign(width, 1.0f);
    return bn;
  }
  std::size_t width() const { return gamma.size(); }
};

/// One weight set: a frozen random tensor, its trainable scores and the
/// recipe to regenerate the weights from seed alone.
struct LayerParams {
  DenseMatrix w_rand;  // frozen after construction
  DenseMatrix scores;
  InitSpec init_spec;
  std::optional<BatchNormState> bn;
};

/// Folding geometry: l logical layers executed through m stages of
/// r = floor(l/m) iterations each; layers past m*r stay unfolded with
/// their own weight sets. Iteration i reuses weight set i/r.
struct FoldSpec {
  std::size_t depth_l = 1;
  std::size_t stages_m = 1;
  bool unshared_masks = false;

  void validate() const {
    if (stages_m < 1 || stages_m > depth_l)
      throw std::invalid_argument("FoldSpec: need 1 <= m <= l");
  }
  std::size_t iterations_r() const { return depth_l / stages_m; }
  std::size_t weight_set_count() const {
    std::size_t r = iterations_r();
    return (depth_l + r - 1) / r;
  }
  std::size_t score_set_count() const {
    return unshared_masks ? depth_l : weight_set_count();
  }
  std::size_t weight_set_for(std::size_t i) const {
    return i / iterations_r();
  }
  std::size_t score_set_for(std::size_t i) const {
    return unshared_masks ? i : weight_set_for(i);
  }
};

/// Which mask-generation route the forward uses. The single-coat route is
/// an independent code path through single_mask, kept so the N=1
/// degeneracy is a real cross-check rather than the same code twice.
enum class MaskRoute : std::uint8_t { Multicoat = 0, SingleCoat = 1 };

struct ModelSpec {
  Architecture architecture = Architecture::GCN;
  std::vector<std::size_t> widths;  // [features, hidden..., classes]
  std::optional<FoldSpec> fold;     // ResGCN only
  SparsityPlan plan;
  InitMethod init_method = InitMethod::SignedKaimingConstant;
  bool batch_norm = false;  // hidden-layer BN for GCN/GIN
  MaskRoute mask_route = MaskRoute::Multicoat;
  std::uint64_t global_seed = 1;
  std::vector<std::uint64_t> weight_seeds;  // derived if empty
  std::vector<std::uint64_t> score_seeds;

  void validate() const {
    if (widths.size() < 2)
      throw std::invalid_argument("ModelSpec: need at least [in, out] widths");
    if (architecture == Architecture::ResGCN) {
      if (!fold) throw std::invalid_argument("ModelSpec: ResGCN needs a fold");
      if (widths.size() != 3)
        throw std::invalid_argument(
            "ModelSpec: ResGCN widths are [features, hidden, classes]");
      fold->validate();
    } else if (fold) {
      throw std::invalid_argument("ModelSpec: fold only valid for ResGCN");
    }
    if (mask_route == MaskRoute::SingleCoat && plan.coats_N != 1)
      throw std::invalid_argument("ModelSpec: single-coat route needs N=1");
  }
};

namespace detail {

inline std::size_t weight_set_count(const ModelSpec& spec) {
  switch (spec.architecture) {
    case Architecture::GCN: return spec.widths.size() - 1;
    case Architecture::GIN: return 2 * (spec.widths.size() - 1);
    case Architecture::ResGCN: return 2 + spec.fold->weight_set_count();
  }
  return 0;
}

inline std::size_t score_set_count(const ModelSpec& spec) {
  if (spec.architecture == Architecture::ResGCN)
    return 2 + spec.fold->score_set_count();
  return weight_set_count(spec);
}

inline std::pair<std::size_t, std::size_t> weight_shape(const ModelSpec& spec,
                                                        std::size_t set) {
  switch (spec.architecture) {
    case Architecture::GCN:
      return {spec.widths[set], spec.widths[set + 1]};
    case Architecture::GIN: {
      std::size_t block = set / 2;
      std::size_t out = spec.widths[block + 1];
      return set % 2 == 0 ? std::make_pair(spec.widths[block], out)
                          : std::make_pair(out, out);
    }
    case Architecture::ResGCN: {
      std::size_t hidden = spec.widths[1];
      if (set == 0) return {spec.widths[0], hidden};  // encoder
      if (set == 1 + spec.fold->weight_set_count())
        return {hidden, spec.widths[2]};  // decoder
      return {hidden, hidden};
    }
  }
  return {0, 0};
}

}  // namespace detail

/// A runnable model: weight sets plus score tensors. For unshared folded
/// models the per-iteration scores live in iteration_scores and the block
/// LayerParams carry no scores of their own.
struct GnnModel {
  ModelSpec spec;
  std::vector<LayerParams> layers;            // one per weight set
  std::vector<DenseMatrix> iteration_scores;  // ResGCN unshared only

  static GnnModel build(ModelSpec s) {
    s.validate();
    GnnModel m;
    std::size_t n_ws = detail::weight_set_count(s);
    std::size_t n_ss = detail::score_set_count(s);
    if (s.weight_seeds.empty())
      for (std::size_t i = 0; i < n_ws; ++i)
        s.weight_seeds.push_back(derive_seed(s.global_seed, i, "weight"));
    if (s.score_seeds.empty())
      for (std::size_t i = 0; i < n_ss; ++i)
        s.score_seeds.push_back(derive_seed(s.global_seed, i, "score"));
    if (s.weight_seeds.size() != n_ws || s.score_seeds.size() != n_ss)
      throw std::invalid_argument("GnnModel: seed list lengths inconsistent");
    m.spec = s;

    bool unshared_fold =
        s.architecture == Architecture::ResGCN && s.fold->unshared_masks;
    for (std::size_t i = 0; i < n_ws; ++i) {
      auto [rows, cols] = detail::weight_shape(s, i);
      InitSpec init{s.init_method, rows, s.plan.base_sparsity,
                    s.weight_seeds[i]};
      LayerParams lp;
      lp.init_spec = init;
      lp.w_rand = generate_weights(init, rows, cols);
      if (!unshared_fold)
        lp.scores = kaiming_uniform_scores(s.score_seeds[i], rows, cols, rows);
      if (m.needs_bn(i)) lp.bn = BatchNormState::make(cols);
      m.layers.push_back(std::move(lp));
    }
    if (unshared_fold) {
      // encoder / decoder keep per-set scores; iterations get their own
      const auto& fold = *s.fold;
      auto [er, ec] = detail::weight_shape(s, 0);
      m.layers[0].scores =
          kaiming_uniform_scores(s.score_seeds[0], er, ec, er);
      for (std::size_t i = 0; i < fold.depth_l; ++i) {
        std::size_t ws = 1 + fold.weight_set_for(i);
        auto [r, c] = detail::weight_shape(s, ws);
        m.iteration_scores.push_back(
            kaiming_uniform_scores(s.score_seeds[1 + i], r, c, r));
      }
      std::size_t dec = n_ws - 1;
      auto [dr, dc] = detail::weight_shape(s, dec);
      m.layers[dec].scores =
          kaiming_uniform_scores(s.score_seeds[n_ss - 1], dr, dc, dr);
    }
    return m;
  }

  bool needs_bn(std::size_t weight_set) const {
    switch (spec.architecture) {
      case Architecture::GCN:
        return spec.batch_norm && weight_set + 1 < layers_or_count();
      case Architecture::GIN:
        return spec.batch_norm && weight_set % 2 == 0;
      case Architecture::ResGCN:
        return weight_set > 0 &&
               weight_set < 1 + spec.fold->weight_set_count();
    }
    return false;
  }

  std::size_t layers_or_count() const {
    return detail::weight_set_count(spec);
  }

  /// Score tensors in canonical order (encoder, blocks/iterations,
  /// decoder for ResGCN; layer order otherwise).
  std::vector<const DenseMatrix*> score_tensors() const {
    std::vector<const DenseMatrix*> out;
    if (!iteration_scores.empty()) {
      out.push_back(&layers.front().scores);
      for (const auto& s : iteration_scores) out.push_back(&s);
      out.push_back(&layers.back().scores);
    } else {
      for (const auto& l : layers) out.push_back(&l.scores);
    }
    return out;
  }
  std::vector<DenseMatrix*> score_tensors() {
    std::vector<DenseMatrix*> out;
    if (!iteration_scores.empty()) {
      out.push_back(&layers.front().scores);
      for (auto& s : iteration_scores) out.push_back(&s);
      out.push_back(&layers.back().scores);
    } else {
      for (auto& l : layers) out.push_back(&l.scores);
    }
    return out;
  }

  /// Weight set whose shape and w_rand a score tensor masks.
  std::size_t weight_set_of_score(std::size_t score_idx) const {
    if (iteration_scores.empty()) return score_idx;
    if (score_idx == 0) return 0;
    std::size_t n_iter = iteration_scores.size();
    if (score_idx <= n_iter)
      return 1 + spec.fold->weight_set_for(score_idx - 1);
    return layers.size() - 1;
  }

  std::size_t total_score_elements() const {
    std::size_t n = 0;
    for (const auto* s : score_tensors()) n += s->size();
    return n;
  }

  std::vector<BatchNormState*> bn_states() {
    std::vector<BatchNormState*> out;
    for (auto& l : layers)
      if (l.bn) out.push_back(&*l.bn);
    return out;
  }

  /// Final coat sparsities (valid coats only) resolved over the model's
  /// whole score pool; scheduling decays this list.
  std::vector<double> resolved_sparsities() const {
    return spec.plan.valid_sparsities(total_score_elements());
  }
};

// ---------------------------------------------------------------------------
// Execution slots: one per masked matmul actually executed. Folded models
// revisit the same weight set in several slots.
// ---------------------------------------------------------------------------

struct ExecSlot {
  std::size_t weight_set;
  std::size_t score_set;
};

inline std::vector<ExecSlot> execution_slots(const ModelSpec& spec) {
  std::vector<ExecSlot> slots;
  switch (spec.architecture) {
    case Architecture::GCN:
    case Architecture::GIN: {
      std::size_t n = detail::weight_set_count(spec);
      for (std::size_t i = 0; i < n; ++i) slots.push_back({i, i});
      break;
    }
    case Architecture::ResGCN: {
      const auto& fold = *spec.fold;
      slots.push_back({0, 0});  // encoder
      for (std::size_t i = 0; i < fold.depth_l; ++i)
        slots.push_back(
            {1 + fold.weight_set_for(i), 1 + fold.score_set_for(i)});
      std::size_t dec_ws = 1 + fold.weight_set_count();
      std::size_t dec_ss = 1 + fold.score_set_count();
      slots.push_back({dec_ws, dec_ss});
      break;
    }
  }
  return slots;
}

/// Coat-count tensors for every score set at the given live sparsities.
inline std::vector<CoatMaskSum> compute_counts(
    const GnnModel& model, std::span<const double> live_K) {
  auto scores = model.score_tensors();
  if (model.spec.mask_route == MaskRoute::SingleCoat) {
    if (live_K.size() != 1)
      throw std::invalid_argument("single-coat route needs exactly one k");
    std::vector<CoatMaskSum> out;
    for (const auto* s : scores) {
      BinaryMask m = single_mask(*s, live_K[0]);
      out.push_back({m.rows, m.cols, std::move(m.bits)});
    }
    return out;
  }
  if (model.spec.plan.global_threshold)
    return multicoat_masks_global(scores, live_K);
  std::vector<CoatMaskSum> out;
  out.reserve(scores.size());
  for (const auto* s : scores) out.push_back(multicoat_masks(*s, live_K));
  return out;
}

/// Effective weight per execution slot, from the slot's weight set and
/// score set.
inline std::vector<DenseMatrix> effective_weights(
    const GnnModel& model, const std::vector<CoatMaskSum>& counts) {
  std::vector<DenseMatrix> out;
  for (const auto& slot : execution_slots(model.spec))
    out.push_back(
        effective_weight(model.layers[slot.weight_set].w_rand,
                         counts[slot.score_set]));
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward primitives
// ---------------------------------------------------------------------------

namespace nn {

inline DenseMatrix relu(const DenseMatrix& x) {
  DenseMatrix y = x;
  for (auto& v : y.data) v = v > 0.0f ? v : 0.0f;
  return y;
}

inline DenseMatrix relu_backward(const DenseMatrix& pre, const DenseMatrix& dy) {
  DenseMatrix dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (pre.data[i] <= 0.0f) dx.data[i] = 0.0f;
  return dx;
}

struct BnCache {
  DenseMatrix xhat;
  std::vector<double> inv_std;  // 1/sqrt(var+eps), per feature
};

/// Batch normalization over rows. use_batch_stats selects training-style
/// statistics; update_running additionally folds them into the running
/// estimates (biased variance, momentum blend).
inline DenseMatrix bn_forward(BatchNormState& bn, const DenseMatrix& x,
                              bool use_batch_stats, bool update_running,
                              BnCache* cache) {
  const std::size_t rows = x.rows, cols = x.cols;
  if (cols != bn.width())
    throw std::invalid_argument("bn_forward: width mismatch");
  std::vector<double> mean(cols, 0.0), var(cols, 0.0);
  if (use_batch_stats) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) mean[c] += x.at(r, c);
    for (auto& m : mean) m /= double(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        double d = x.at(r, c) - mean[c];
        var[c] += d * d;
      }
    for (auto& v : var) v /= double(rows);
    if (update_running)
      for (std::size_t c = 0; c < cols; ++c) {
        bn.running_mean[c] = static_cast<float>(
            (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean[c]);
        bn.running_var[c] = static_cast<float>(
            (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * var[c]);
      }
  } else {
    for (std::size_t c = 0; c < cols; ++c) {
      mean[c] = bn.running_mean[c];
      var[c] = bn.running_var[c];
    }
  }
  DenseMatrix y(rows, cols);
  DenseMatrix xhat(rows, cols);
  std::vector<double> inv_std(cols);
  for (std::size_t c = 0; c < cols; ++c)
    inv_std[c] = 1.0 / std::sqrt(var[c] + bn.epsilon);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      double xh = (x.at(r, c) - mean[c]) * inv_std[c];
      xhat.at(r, c) = static_cast<float>(xh);
      y.at(r, c) = static_cast<float>(bn.gamma[c] * xh + bn.beta[c]);
    }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

struct BnGrads {
  std::vector<float> dgamma, dbeta;
  void accumulate_from(const BatchNormState& bn, const BnCache& cache,
                       const DenseMatrix& dy) {
    if (dgamma.empty()) {
      dgamma.assign(bn.width(), 0.0f);
      dbeta.assign(bn.width(), 0.0f);
    }
    for (std::size_t r = 0; r < dy.rows; ++r)
      for (std::size_t c = 0; c < dy.cols; ++c) {
        dgamma[c] += dy.at(r, c) * cache.xhat.at(r, c);
        dbeta[c] += dy.at(r, c);
      }
  }
};

/// Input gradient for batch-statistics normalization.
inline DenseMatrix bn_backward(const BatchNormState& bn, const BnCache& cache,
                               const DenseMatrix& dy) {
  const std::size_t rows = dy.rows, cols = dy.cols;
  std::vector<double> sum_dy(cols, 0.0), sum_dy_xhat(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      sum_dy[c] += dy.at(r, c);
      sum_dy_xhat[c] += double(dy.at(r, c)) * cache.xhat.at(r, c);
    }
  DenseMatrix dx(rows, cols);
  double inv_n = 1.0 / double(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      double term = dy.at(r, c) - inv_n * sum_dy[c] -
                    double(cache.xhat.at(r, c)) * inv_n * sum_dy_xhat[c];
      dx.at(r, c) = static_cast<float>(bn.gamma[c] * cache.inv_std[c] * term);
    }
  return dx;
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Architecture forwards with caches
// ---------------------------------------------------------------------------

struct ForwardCache {
  std::vector<DenseMatrix> slot_input;  // matrix multiplied by each W_eff
  std::vector<DenseMatrix> weights;     // W_eff per slot
  std::vector<DenseMatrix> pre_act;     // tensors feeding each ReLU
  std::vector<nn::BnCache> bn_cache;    // aligned with bn_slot
  std::vector<std::size_t> bn_slot;     // weight-set index owning each BN use
  std::vector<CoatMaskSum> counts;      // per score set
};

struct ForwardResult {
  DenseMatrix logits;
  ForwardCache cache;
};

namespace detail {

inline ForwardResult gcn_forward_impl(const Graph& graph, GnnModel& model,
                                      std::vector<DenseMatrix> slot_weights,
                                      bool use_batch_stats,
                                      bool update_running) {
  const std::size_t L = model.layers.size();
  ForwardCache cache;
  cache.weights = std::move(slot_weights);
  DenseMatrix h = graph.features;
  for (std::size_t l = 0; l < L; ++l) {
    DenseMatrix ah = spmm(graph.adjacency, h);
    DenseMatrix z = dense_matmul(ah, cache.weights[l]);
    cache.slot_input.push_back(std::move(ah));
    if (l + 1 == L) {
      return {std::move(z), std::move(cache)};
    }
    if (model.layers[l].bn) {
      nn::BnCache bc;
      z = nn::bn_forward(*model.layers[l].bn, z, use_batch_stats,
                         update_running, &bc);
      cache.bn_cache.push_back(std::move(bc));
      cache.bn_slot.push_back(l);
    }
    cache.pre_act.push_back(z);
    h = nn::relu(z);
  }
  throw std::logic_error("gcn_forward: unreachable");
}

inline ForwardResult gin_forward_impl(const Graph& graph, GnnModel& model,
                                      std::vector<DenseMatrix> slot_weights,
                                      bool use_batch_stats,
                                      bool update_running) {
  const std::size_t blocks = model.layers.size() / 2;
  CsrMatrix sum_adj = sum_adjacency(graph.adjacency);
  ForwardCache cache;
  cache.weights = std::move(slot_weights);
  DenseMatrix h = graph.features;
  for (std::size_t b = 0; b < blocks; ++b) {
    DenseMatrix ah = spmm(sum_adj, h);
    DenseMatrix z1 = dense_matmul(ah, cache.weights[2 * b]);
    cache.slot_input.push_back(std::move(ah));
    if (model.layers[2 * b].bn) {
      nn::BnCache bc;
      z1 = nn::bn_forward(*model.layers[2 * b].bn, z1, use_batch_stats,
                          update_running, &bc);
      cache.bn_cache.push_back(std::move(bc));
      cache.bn_slot.push_back(2 * b);
    }
    cache.pre_act.push_back(z1);  // inner ReLU input
    DenseMatrix r = nn::relu(z1);
    DenseMatrix z2 = dense_matmul(r, cache.weights[2 * b + 1]);
    cache.slot_input.push_back(std::move(r));
    if (b + 1 == blocks) return {std::move(z2), std::move(cache)};
    cache.pre_act.push_back(z2);  // between-block ReLU input
    h = nn::relu(z2);
  }
  throw std::logic_error("gin_forward: unreachable");
}

inline ForwardResult resgcn_forward_impl(const Graph& graph, GnnModel& model,
                                         std::vector<DenseMatrix> slot_weights,
                                         bool use_batch_stats,
                                         bool update_running) {
  const auto& fold = *model.spec.fold;
  ForwardCache cache;
  cache.weights = std::move(slot_weights);

  // encoder: plain masked linear on raw features
  DenseMatrix h = dense_matmul(graph.features, cache.weights[0]);
  cache.slot_input.push_back(graph.features);

  for (std::size_t i = 0; i < fold.depth_l; ++i) {
    std::size_t ws = 1 + fold.weight_set_for(i);
    nn::BnCache bc;
    DenseMatrix t1 = nn::bn_forward(*model.layers[ws].bn, h, use_batch_stats,
                                    update_running, &bc);
    cache.bn_cache.push_back(std::move(bc));
    cache.bn_slot.push_back(ws);
    cache.pre_act.push_back(t1);
    DenseMatrix t2 = nn::relu(t1);
    DenseMatrix t3 = spmm(graph.adjacency, t2);
    DenseMatrix z = dense_matmul(t3, cache.weights[1 + i]);
    cache.slot_input.push_back(std::move(t3));
    for (std::size_t p = 0; p < h.size(); ++p) z.data[p] += h.data[p];
    h = std::move(z);  // residual output
  }

  DenseMatrix logits = dense_matmul(h, cache.weights[1 + fold.depth_l]);
  cache.slot_input.push_back(std::move(h));
  return {std::move(logits), std::move(cache)};
}

}  // namespace detail

/// Forward through an explicit per-slot weight list (the path finite
/// difference checks drive).
inline ForwardResult forward_with_weights(const Graph& graph, GnnModel& model,
                                          std::vector<DenseMatrix> weights,
                                          bool use_batch_stats = false,
                                          bool update_running = false) {
  switch (model.spec.architecture) {
    case Architecture::GCN:
      return detail::gcn_forward_impl(graph, model, std::move(weights),
                                      use_batch_stats, update_running);
    case Architecture::GIN:
      return detail::gin_forward_impl(graph, model, std::move(weights),
                                      use_batch_stats, update_running);
    case Architecture::ResGCN:
      return detail::resgcn_forward_impl(graph, model, std::move(weights),
                                         use_batch_stats, update_running);
  }
  throw std::logic_error("forward_with_weights: bad architecture");
}

/// Full forward: live sparsities -> coat counts -> effective weights ->
/// architecture pipeline.
inline ForwardResult model_forward(const Graph& graph, GnnModel& model,
                                   std::span<const double> live_K,
                                   bool use_batch_stats = false,
                                   bool update_running = false) {
  auto counts = compute_counts(model, live_K);
  auto weights = effective_weights(model, counts);
  auto result = forward_with_weights(graph, model, std::move(weights),
                                     use_batch_stats, update_running);
  result.cache.counts = std::move(counts);
  return result;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

struct Gradients {
  std::vector<DenseMatrix> w_eff;           // per execution slot
  std::vector<nn::BnGrads> bn;              // per weight set (empty if none)
};

namespace detail {

inline DenseMatrix matmul_at_b(const DenseMatrix& a, const DenseMatrix& b) {
  return dense_matmul(transpose(a), b);
}
inline DenseMatrix matmul_a_bt(const DenseMatrix& a, const DenseMatrix& b) {
  return dense_matmul(a, transpose(b));
}

inline Gradients gcn_backward_impl(const Graph& graph, const GnnModel& model,
                                   const ForwardCache& cache,
                                   const DenseMatrix& dlogits) {
  const std::size_t L = model.layers.size();
  Gradients g;
  g.w_eff.resize(L);
  g.bn.resize(model.layers.size());
  std::size_t bn_pos = cache.bn_cache.size();
  DenseMatrix dz = dlogits;
  for (std::size_t l = L; l-- > 0;) {
    g.w_eff[l] = matmul_at_b(cache.slot_input[l], dz);
    if (l == 0) break;
    DenseMatrix dah = matmul_a_bt(dz, cache.weights[l]);
    DenseMatrix dh = spmm(graph.adjacency, dah);  // A is symmetric
    DenseMatrix db = nn::relu_backward(cache.pre_act[l - 1], dh);
    if (model.layers[l - 1].bn) {
      --bn_pos;
      g.bn[l - 1].accumulate_from(*model.layers[l - 1].bn,
                                  cache.bn_cache[bn_pos], db);
      db = nn::bn_backward(*model.layers[l - 1].bn, cache.bn_cache[bn_pos],
                           db);
    }
    dz = std::move(db);
  }
  return g;
}

inline Gradients gin_backward_impl(const Graph& graph, const GnnModel& model,
                                   const ForwardCache& cache,
                                   const DenseMatrix& dlogits) {
  const std::size_t blocks = model.layers.size() / 2;
  CsrMatrix sum_adj = sum_adjacency(graph.adjacency);
  Gradients g;
  g.w_eff.resize(2 * blocks);
  g.bn.resize(model.layers.size());
  std::size_t bn_pos = cache.bn_cache.size();
  std::size_t act_pos = cache.pre_act.size();
  DenseMatrix dz2 = dlogits;
  for (std::size_t b = blocks; b-- > 0;) {
    g.w_eff[2 * b + 1] = matmul_at_b(cache.slot_input[2 * b + 1], dz2);
    DenseMatrix dr = matmul_a_bt(dz2, cache.weights[2 * b + 1]);
    --act_pos;  // inner ReLU input z1
    DenseMatrix dz1 = nn::relu_backward(cache.pre_act[act_pos], dr);
    if (model.layers[2 * b].bn) {
      --bn_pos;
      g.bn[2 * b].accumulate_from(*model.layers[2 * b].bn,
                                  cache.bn_cache[bn_pos], dz1);
      dz1 = nn::bn_backward(*model.layers[2 * b].bn, cache.bn_cache[bn_pos],
                            dz1);
    }
    g.w_eff[2 * b] = matmul_at_b(cache.slot_input[2 * b], dz1);
    if (b == 0) break;
    DenseMatrix dah = matmul_a_bt(dz1, cache.weights[2 * b]);
    DenseMatrix dh = spmm(sum_adj, dah);
    --act_pos;  // between-block ReLU input z2
    dz2 = nn::relu_backward(cache.pre_act[act_pos], dh);
  }
  return g;
}

inline Gradients resgcn_backward_impl(const Graph& graph,
                                      const GnnModel& model,
                                      const ForwardCache& cache,
                                      const DenseMatrix& dlogits) {
  const auto& fold = *model.spec.fold;
  const std::size_t l_total = fold.depth_l;
  Gradients g;
  g.w_eff.resize(2 + l_total);
  g.bn.resize(model.layers.size());

  // decoder
  std::size_t dec_slot = 1 + l_total;
  g.w_eff[dec_slot] = matmul_at_b(cache.slot_input[dec_slot], dlogits);
  DenseMatrix dh = matmul_a_bt(dlogits, cache.weights[dec_slot]);

  for (std::size_t i = l_total; i-- > 0;) {
    std::size_t ws = 1 + fold.weight_set_for(i);
    DenseMatrix dz = dh;  // residual branch gradient
    g.w_eff[1 + i] = matmul_at_b(cache.slot_input[1 + i], dz);
    DenseMatrix dt3 = matmul_a_bt(dz, cache.weights[1 + i]);
    DenseMatrix dt2 = spmm(graph.adjacency, dt3);
    DenseMatrix dt1 = nn::relu_backward(cache.pre_act[i], dt2);
    g.bn[ws].accumulate_from(*model.layers[ws].bn, cache.bn_cache[i], dt1);
    DenseMatrix dh_f =
        nn::bn_backward(*model.layers[ws].bn, cache.bn_cache[i], dt1);
    for (std::size_t p = 0; p < dh.size(); ++p)
      dh.data[p] += dh_f.data[p];  // skip path + block path
  }

  g.w_eff[0] = matmul_at_b(cache.slot_input[0], dh);
  return g;
}

}  // namespace detail

inline Gradients model_backward(const Graph& graph, const GnnModel& model,
                                const ForwardCache& cache,
                                const DenseMatrix& dlogits) {
  switch (model.spec.architecture) {
    case Architecture::GCN:
      return detail::gcn_backward_impl(graph, model, cache, dlogits);
    case Architecture::GIN:
      return detail::gin_backward_impl(graph, model, cache, dlogits);
    case Architecture::ResGCN:
      return detail::resgcn_backward_impl(graph, model, cache, dlogits);
  }
  throw std::logic_error("model_backward: bad architecture");
}

/// Straight-through score gradients: the coat-count tensor is treated as
/// identity, so dS = dW_eff (.) w_rand, summed over every slot the score
/// set serves. Pruned positions receive gradient too, which is what lets
/// a pruned weight revive.
inline std::vector<DenseMatrix> score_gradients(const GnnModel& model,
                                                const Gradients& grads) {
  auto slots = execution_slots(model.spec);
  std::size_t n_scores = model.score_tensors().size();
  std::vector<DenseMatrix> out(n_scores);
  for (std::size_t s = 0; s < slots.size(); ++s) {
    const auto& slot = slots[s];
    const DenseMatrix& w_rand = model.layers[slot.weight_set].w_rand;
    const DenseMatrix& dw = grads.w_eff[s];
    DenseMatrix& dst = out[slot.score_set];
    if (dst.size() == 0) dst = DenseMatrix(dw.rows, dw.cols);
    for (std::size_t i = 0; i < dw.size(); ++i)
      dst.data[i] += dw.data[i] * w_rand.data[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contract-level entry points
// ---------------------------------------------------------------------------

inline ForwardResult gcn_forward(const Graph& graph, GnnModel& model,
                                 std::span<const double> live_K,
                                 bool training = false) {
  if (model.spec.architecture != Architecture::GCN)
    throw std::invalid_argument("gcn_forward: not a GCN model");
  return model_forward(graph, model, live_K, training, training);
}

inline ForwardResult gin_forward(const Graph& graph, GnnModel& model,
                                 std::span<const double> live_K,
                                 bool training = false) {
  if (model.spec.architecture != Architecture::GIN)
    throw std::invalid_argument("gin_forward: not a GIN model");
  return model_forward(graph, model, live_K, training, training);
}

/// One residual block: h + conv(relu(bn(h))) with the block's own scores.
inline DenseMatrix resgcn_block_forward(const DenseMatrix& h,
                                        const Graph& graph, LayerParams& params,
                                        std::span<const double> live_K,
                                        bool use_batch_stats = false) {
  if (h.cols != params.w_rand.rows || params.w_rand.rows != params.w_rand.cols)
    throw std::invalid_argument("resgcn_block_forward: width mismatch");
  if (!params.bn)
    throw std::invalid_argument("resgcn_block_forward: block has no BN");
  DenseMatrix w_eff =
      effective_weight(params.w_rand, multicoat_masks(params.scores, live_K));
  DenseMatrix t1 =
      nn::bn_forward(*params.bn, h, use_batch_stats, false, nullptr);
  DenseMatrix t2 = nn::relu(t1);
  DenseMatrix t3 = spmm(graph.adjacency, t2);
  DenseMatrix z = dense_matmul(t3, w_eff);
  for (std::size_t i = 0; i < z.size(); ++i) z.data[i] += h.data[i];
  return z;
}

/// Folded execution per the staged reuse rule: iteration i runs weight set
/// i/r with score set i (unshared) or i/r (shared). weight_sets/score_sets
/// are the block-level tensors, excluding encoder and decoder.
inline DenseMatrix folded_forward_blocks(
    const Graph& graph, const FoldSpec& fold,
    std::vector<LayerParams*>& weight_sets,
    const std::vector<const DenseMatrix*>& score_sets, DenseMatrix h,
    std::span<const double> live_K, bool use_batch_stats = false) {
  if (score_sets.size() != fold.score_set_count())
    throw std::invalid_argument("folded_forward: score-set count mismatch");
  if (weight_sets.size() != fold.weight_set_count())
    throw std::invalid_argument("folded_forward: weight-set count mismatch");
  for (std::size_t i = 0; i < fold.depth_l; ++i) {
    LayerParams& params = *weight_sets[fold.weight_set_for(i)];
    const DenseMatrix& scores = *score_sets[fold.score_set_for(i)];
    DenseMatrix w_eff =
        effective_weight(params.w_rand, multicoat_masks(scores, live_K));
    DenseMatrix t1 =
        nn::bn_forward(*params.bn, h, use_batch_stats, false, nullptr);
    DenseMatrix t2 = nn::relu(t1);
    DenseMatrix t3 = spmm(graph.adjacency, t2);
    DenseMatrix z = dense_matmul(t3, w_eff);
    for (std::size_t p = 0; p < z.size(); ++p) z.data[p] += h.data[p];
    h = std::move(z);
  }
  return h;
}

}  // namespace sltgnn
