#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

#include "sltgnn/matrix.hpp"

namespace sltgnn {

/// SplitMix64 (Steele, Lea & Flood; Vigna's fixed-increment variant).
/// The output stream is a pure function of the seed, identical on every
/// platform, which is what lets the packed format store seeds instead of
/// weights.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1), 53-bit mantissa.
  double next_unit() { return double(next() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1], safe as a log argument.
  double next_unit_open() { return double((next() >> 11) + 1) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; pairs are drawn eagerly and the
  /// second value cached, so consumption order is fixed.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_unit_open();
    double u2 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// FNV-1a, 64-bit. Fixed published function; the empty-input digest is
/// the offset basis 0xcbf29ce484222325.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Stable 64-bit seed from arbitrary model metadata.
inline std::uint64_t seed_from_hash(std::string_view model_metadata) {
  return fnv1a64(model_metadata);
}

/// Independent per-layer stream: hash of global seed, layer index and role
/// ("weight" / "score"), so each tensor is individually regenerable.
inline std::uint64_t derive_seed(std::uint64_t global_seed,
                                 std::size_t layer_index,
                                 std::string_view role) {
  std::string key = "seed:" + std::to_string(global_seed) +
                    "|layer:" + std::to_string(layer_index) +
                    "|role:" + std::string(role);
  return fnv1a64(key);
}

enum class InitMethod : std::uint8_t {
  SignedKaimingConstant = 0,
  KaimingNormal = 1,
};

/// Weight-generation recipe. k1 is the base sparsity the scale factor
/// sqrt(1/(1-k1)) is pinned to; it stays fixed for the whole run so the
/// weights never change under the decay schedule.
struct InitSpec {
  InitMethod method = InitMethod::SignedKaimingConstant;
  std::size_t fan_in = 1;
  double base_sparsity_k1 = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (fan_in < 1) throw std::invalid_argument("InitSpec: fan_in < 1");
    if (base_sparsity_k1 < 0.0 || base_sparsity_k1 >= 1.0)
      throw std::invalid_argument("InitSpec: k1 must be in [0,1)");
  }

  /// delta * scale: Kaiming-normal std (gain sqrt(2)) times the sparsity
  /// compensation factor.
  double magnitude() const {
    double delta = std::sqrt(2.0 / double(fan_in));
    double scale = std::sqrt(1.0 / (1.0 - base_sparsity_k1));
    return delta * scale;
  }
};

/// Entries are +-delta*scale with i.i.d. fair-coin signs.
inline DenseMatrix signed_kaiming_constant(const InitSpec& spec,
                                           std::size_t rows,
                                           std::size_t cols) {
  spec.validate();
  if (spec.method != InitMethod::SignedKaimingConstant)
    throw std::invalid_argument("signed_kaiming_constant: wrong method");
  float mag = static_cast<float>(spec.magnitude());
  SplitMix64 gen(spec.seed);
  DenseMatrix w(rows, cols);
  for (auto& v : w.data) v = (gen.next() >> 63) ? -mag : mag;
  return w;
}

/// i.i.d. normal(0, (delta*scale)^2) entries.
inline DenseMatrix kaiming_normal(const InitSpec& spec, std::size_t rows,
                                  std::size_t cols) {
  spec.validate();
  if (spec.method != InitMethod::KaimingNormal)
    throw std::invalid_argument("kaiming_normal: wrong method");
  double mag = spec.magnitude();
  SplitMix64 gen(spec.seed);
  DenseMatrix w(rows, cols);
  for (auto& v : w.data) v = static_cast<float>(mag * gen.next_normal());
  return w;
}

inline DenseMatrix generate_weights(const InitSpec& spec, std::size_t rows,
                                    std::size_t cols) {
  return spec.method == InitMethod::SignedKaimingConstant
             ? signed_kaiming_constant(spec, rows, cols)
             : kaiming_normal(spec, rows, cols);
}

/// Score initialization: uniform on [-sqrt(6/fan_in), +sqrt(6/fan_in)].
inline DenseMatrix kaiming_uniform_scores(std::uint64_t seed,
                                          std::size_t rows, std::size_t cols,
                                          std::size_t fan_in) {
  if (fan_in < 1)
    throw std::invalid_argument("kaiming_uniform_scores: fan_in < 1");
  double bound = std::sqrt(6.0 / double(fan_in));
  SplitMix64 gen(seed);
  DenseMatrix s(rows, cols);
  for (auto& v : s.data)
    v = static_cast<float>(bound * (2.0 * gen.next_unit() - 1.0));
  return s;
}

}  // namespace sltgnn
