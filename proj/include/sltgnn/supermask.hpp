#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "sltgnn/matrix.hpp"

namespace sltgnn {

/// One binary supermask coat.
struct BinaryMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;  // 0/1 per weight, row-major

  std::size_t popcount() const {
    return std::accumulate(bits.begin(), bits.end(), std::size_t{0});
  }
};

/// Sum of N nested coats: counts[i] is how many coats keep weight i.
/// Nesting makes {i : counts[i] >= c+1} a subset of {i : counts[i] >= c}.
struct CoatMaskSum {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> counts;

  std::size_t survivors(std::uint8_t coat) const {  // coat is 1-based
    std::size_t n = 0;
    for (auto c : counts) n += (c >= coat);
    return n;
  }
};

namespace detail {

/// Flat indices ordered by ascending |score|; ties resolve to the lower
/// flat index, which is therefore pruned first.
inline std::vector<std::size_t> prune_order(std::span<const float> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return std::fabs(scores[a]) < std::fabs(scores[b]);
                   });
  return order;
}

inline std::size_t prune_count(double k, std::size_t n) {
  if (k < 0.0 || k >= 1.0)
    throw std::invalid_argument("sparsity must be in [0,1)");
  return static_cast<std::size_t>(std::floor(k * static_cast<double>(n)));
}

}  // namespace detail

/// Boundary |score| below which exactly floor(k*|S|) entries fall, absent
/// ties at the boundary (mask generation breaks ties by flat index and
/// keeps the exact-count contract regardless). k=0 returns 0.
inline float threshold_for_sparsity(const DenseMatrix& scores, double k) {
  if (scores.size() == 0)
    throw std::invalid_argument("threshold_for_sparsity: empty score tensor");
  std::size_t pruned = detail::prune_count(k, scores.size());
  if (pruned == 0) return 0.0f;
  auto order = detail::prune_order(scores.data);
  return std::fabs(scores.data[order[pruned]]);
}

/// Single-coat mask: keep all but the floor(k*|S|) smallest |scores|.
inline BinaryMask single_mask(const DenseMatrix& scores, double k) {
  if (scores.size() == 0)
    throw std::invalid_argument("single_mask: empty score tensor");
  std::size_t pruned = detail::prune_count(k, scores.size());
  auto order = detail::prune_order(scores.data);
  BinaryMask m{scores.rows, scores.cols,
               std::vector<std::uint8_t>(scores.size(), 1)};
  for (std::size_t i = 0; i < pruned; ++i) m.bits[order[i]] = 0;
  return m;
}

/// Multicoat mask sum for a sorted sparsity list. All coats share one
/// prune order, so coat n+1 is structurally nested inside coat n and each
/// coat's popcount is exactly |S| - floor(k_n*|S|).
inline CoatMaskSum multicoat_masks(const DenseMatrix& scores,
                                   std::span<const double> sparsities) {
  if (scores.size() == 0)
    throw std::invalid_argument("multicoat_masks: empty score tensor");
  if (!std::is_sorted(sparsities.begin(), sparsities.end()))
    throw std::invalid_argument("multicoat_masks: K must be non-decreasing");
  const std::size_t n = scores.size();
  std::vector<std::size_t> pruned(sparsities.size());
  for (std::size_t c = 0; c < sparsities.size(); ++c)
    pruned[c] = detail::prune_count(sparsities[c], n);

  auto order = detail::prune_order(scores.data);
  std::vector<std::size_t> rank(n);
  for (std::size_t pos = 0; pos < n; ++pos) rank[order[pos]] = pos;

  CoatMaskSum sum{scores.rows, scores.cols, std::vector<std::uint8_t>(n, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    std::uint8_t c = 0;
    for (std::size_t coat = 0; coat < pruned.size(); ++coat)
      c += (rank[i] >= pruned[coat]);
    sum.counts[i] = c;
  }
  return sum;
}

/// Joint selection across several score tensors (global threshold scope).
/// Ties break by global flat index, tensors concatenated in order.
inline std::vector<CoatMaskSum> multicoat_masks_global(
    std::span<const DenseMatrix* const> tensors,
    std::span<const double> sparsities) {
  if (!std::is_sorted(sparsities.begin(), sparsities.end()))
    throw std::invalid_argument("multicoat_masks: K must be non-decreasing");
  std::size_t total = 0;
  for (const auto* t : tensors) total += t->size();
  if (total == 0)
    throw std::invalid_argument("multicoat_masks: empty score tensors");

  std::vector<float> flat;
  flat.reserve(total);
  for (const auto* t : tensors)
    flat.insert(flat.end(), t->data.begin(), t->data.end());

  std::vector<std::size_t> pruned(sparsities.size());
  for (std::size_t c = 0; c < sparsities.size(); ++c)
    pruned[c] = detail::prune_count(sparsities[c], total);
  auto order = detail::prune_order(flat);
  std::vector<std::size_t> rank(total);
  for (std::size_t pos = 0; pos < total; ++pos) rank[order[pos]] = pos;

  std::vector<CoatMaskSum> out;
  out.reserve(tensors.size());
  std::size_t offset = 0;
  for (const auto* t : tensors) {
    CoatMaskSum sum{t->rows, t->cols, std::vector<std::uint8_t>(t->size(), 0)};
    for (std::size_t i = 0; i < t->size(); ++i) {
      std::uint8_t c = 0;
      for (std::size_t coat = 0; coat < pruned.size(); ++coat)
        c += (rank[offset + i] >= pruned[coat]);
      sum.counts[i] = c;
    }
    offset += t->size();
    out.push_back(std::move(sum));
  }
  return out;
}

/// W_eff = w_rand (.) coat counts: a weight under c coats carries
/// magnitude c*|w_rand|.
inline DenseMatrix effective_weight(const DenseMatrix& w_rand,
                                    const CoatMaskSum& counts) {
  if (w_rand.rows != counts.rows || w_rand.cols != counts.cols)
    throw std::invalid_argument("effective_weight: shape mismatch");
  DenseMatrix w = w_rand;
  for (std::size_t i = 0; i < w.size(); ++i)
    w.data[i] *= static_cast<float>(counts.counts[i]);
  return w;
}

/// k_n = k1 + (1 - k1)(n-1)/N, n = 1..N.
inline std::vector<double> uniform_sparsities(double k1, std::size_t N) {
  if (k1 < 0.0 || k1 >= 1.0)
    throw std::invalid_argument("uniform_sparsities: k1 must be in [0,1)");
  if (N < 1) throw std::invalid_argument("uniform_sparsities: N must be >= 1");
  std::vector<double> out(N);
  for (std::size_t n = 0; n < N; ++n)
    out[n] = k1 + (1.0 - k1) * double(n) / double(N);
  return out;
}

/// Linear sparsity ramp: K * 2t/T for t < T/2, then K itself (returned
/// unchanged, not rescaled, to keep it bit-exact).
inline std::vector<double> decay_schedule(std::span<const double> K,
                                          std::size_t t, std::size_t T) {
  if (T == 0) throw std::invalid_argument("decay_schedule: T must be > 0");
  if (t > T) throw std::invalid_argument("decay_schedule: t > T");
  std::vector<double> out(K.begin(), K.end());
  if (2 * t >= T) return out;
  double scale = 2.0 * double(t) / double(T);
  for (auto& k : out) k *= scale;
  return out;
}

/// Average stored bits per weight for a nested coat stack:
/// 1 + sum_{n=1}^{N-1} k_n over the valid coat list.
inline double bits_per_weight(std::span<const double> K) {
  double bits = 1.0;
  for (std::size_t n = 0; n + 1 < K.size(); ++n) bits += K[n];
  return K.empty() ? 0.0 : bits;
}

/// Rank-normalized view of a score tensor with n entries: the sorted
/// |score| positions map to {j/(n-1)}, so the normalized distribution,
/// its spread and its quantiles depend only on n. This is what makes the
/// Linear threshold rule usable without a separately trained model.
struct RankNormalized {
  std::size_t n;

  double value(std::size_t j) const {
    return n <= 1 ? 0.5 : double(j) / double(n - 1);
  }

  /// Population standard deviation of the n normalized values.
  double sigma() const {
    if (n <= 1) return 0.0;
    return std::sqrt(double(n + 1) / (12.0 * double(n - 1)));
  }

  /// Threshold realizing base sparsity k: the first survivor's value.
  double quantile_threshold(double k) const {
    std::size_t pruned = detail::prune_count(k, n);
    return pruned == 0 ? 0.0 : value(pruned);
  }

  /// Fraction of normalized values strictly below t.
  double cdf(double t) const {
    std::size_t lo = 0, hi = n;  // first j with value(j) >= t
    while (lo < hi) {
      std::size_t mid = (lo + hi) / 2;
      if (value(mid) < t)
        lo = mid + 1;
      else
        hi = mid;
    }
    return double(lo) / double(n);
  }
};

/// One coat of the Linear threshold rule. An invalid coat is excluded
/// from the mask sum, from packing and from the bit accounting.
struct LinearCoat {
  double threshold = 0.0;  // raw rule value, may exceed 1
  bool valid = true;
  double sparsity = 0.0;  // equivalent k_n via the score cdf
};

/// s_t_n = s_t1 + 3*sigma_s*(n-1)/N. With alpha < 1 a coat whose raw
/// threshold reaches alpha is marked invalid; with alpha = 1 every coat
/// stays and its threshold saturates at the top of the normalized range,
/// leaving a nearly-all-pruning coat in the stack.
inline std::vector<LinearCoat> linear_thresholds(
    double s_t1, double sigma_s, std::size_t N, double alpha,
    const std::function<double(double)>& score_cdf) {
  if (N == 0) throw std::invalid_argument("linear_thresholds: N must be >= 1");
  std::vector<LinearCoat> coats(N);
  for (std::size_t n = 0; n < N; ++n) {
    double t = s_t1 + 3.0 * sigma_s * double(n) / double(N);
    coats[n].threshold = t;
    if (alpha < 1.0 && t >= alpha) {
      coats[n].valid = false;
      continue;
    }
    coats[n].sparsity = score_cdf(std::min(t, 1.0));
  }
  return coats;
}

enum class ThresholdMode : std::uint8_t {
  Uniform = 0,
  Linear = 1,          // alpha treated as 1.0 (no coat invalidation)
  AdaptiveLinear = 2,  // coats at or above alpha dropped
};

/// Coat specification: how many coats, their target sparsities and how
/// the per-coat thresholds are derived.
struct SparsityPlan {
  std::size_t coats_N = 1;
  double base_sparsity = 0.0;  // k1
  ThresholdMode mode = ThresholdMode::Uniform;
  double alpha = 0.9996;
  std::size_t total_epochs_T = 400;
  bool global_threshold = false;  // selection scope across score sets
  std::optional<double> pretrained_s_t1;  // overrides the rank quantile
  std::optional<std::vector<double>> explicit_K;

  static SparsityPlan uniform(double k1, std::size_t N, std::size_t T) {
    SparsityPlan p;
    p.coats_N = N;
    p.base_sparsity = k1;
    p.mode = ThresholdMode::Uniform;
    p.total_epochs_T = T;
    return p;
  }

  static SparsityPlan linear(double k1, std::size_t N, std::size_t T,
                             bool adaptive, double alpha = 0.9996) {
    SparsityPlan p;
    p.coats_N = N;
    p.base_sparsity = k1;
    p.mode = adaptive ? ThresholdMode::AdaptiveLinear : ThresholdMode::Linear;
    p.alpha = adaptive ? alpha : 1.0;
    p.total_epochs_T = T;
    return p;
  }

  static SparsityPlan from_list(std::vector<double> K, std::size_t T) {
    SparsityPlan p;
    p.coats_N = K.size();
    p.base_sparsity = K.empty() ? 0.0 : K.front();
    p.total_epochs_T = T;
    p.explicit_K = std::move(K);
    return p;
  }

  /// All N coats for a tensor (or global pool) of n score entries,
  /// including invalid ones.
  std::vector<LinearCoat> resolve(std::size_t n) const {
    if (explicit_K) {
      std::vector<LinearCoat> coats(explicit_K->size());
      for (std::size_t i = 0; i < coats.size(); ++i)
        coats[i] = {(*explicit_K)[i], true, (*explicit_K)[i]};
      return coats;
    }
    if (mode == ThresholdMode::Uniform) {
      auto ks = uniform_sparsities(base_sparsity, coats_N);
      std::vector<LinearCoat> coats(ks.size());
      for (std::size_t i = 0; i < ks.size(); ++i)
        coats[i] = {ks[i], true, ks[i]};
      return coats;
    }
    RankNormalized rn{n};
    double st1 = pretrained_s_t1 ? *pretrained_s_t1
                                 : rn.quantile_threshold(base_sparsity);
    double a = mode == ThresholdMode::AdaptiveLinear ? alpha : 1.0;
    return linear_thresholds(st1, rn.sigma(), coats_N, a,
                             [&rn](double t) { return rn.cdf(t); });
  }

  /// Valid coat sparsities, ascending; this is the K the schedule decays
  /// and the packer records.
  std::vector<double> valid_sparsities(std::size_t n) const {
    std::vector<double> out;
    for (const auto& c : resolve(n))
      if (c.valid) out.push_back(c.sparsity);
    return out;
  }
};

}  // namespace sltgnn
