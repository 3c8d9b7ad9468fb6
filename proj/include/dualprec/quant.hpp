#pragma once

// Linear weight quantization with 1-bit level branching.
//
// A b-bit tensor maps every weight x to an index I = clip(round(x/s), n, p)
// with n = -2^(b-1), p = 2^(b-1)-1 and s = max|x| / p. The (b+1)-bit tensor
// shares those indices as its high-order bits: I' = 2*I + lambda, lambda in
// {0, 1}. Stripping the appended bit is an arithmetic right shift.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dualprec/error.hpp"
#include "dualprec/tensor.hpp"

namespace dualprec {

enum class ScaleRule : std::uint8_t {
  /// s^{b+1} = (2^b - 1) s^b / (2^{b+1} - 1), the level-count form.
  PaperEq2 = 0,
  /// s^{b+1} = (2^{b-1} - 1) s^b / (2^b - 1); keeps p*s constant under the
  /// signed clip bounds.
  RangeExact = 1,
};

inline const char* to_string(ScaleRule rule) {
  return rule == ScaleRule::PaperEq2 ? "paper_eq2" : "range_exact";
}

inline ScaleRule parse_scale_rule(const std::string& text) {
  if (text == "paper_eq2") return ScaleRule::PaperEq2;
  if (text == "range_exact") return ScaleRule::RangeExact;
  throw Error(ErrorCode::InvalidArgument, "unknown scale rule '" + text + "'");
}

class QuantSpec {
 public:
  static constexpr int kMinBits = 2;
  static constexpr int kMaxBits = 8;

  explicit QuantSpec(int bits, ScaleRule rule = ScaleRule::PaperEq2)
      : bits_(bits), rule_(rule) {
    if (bits < kMinBits || bits > kMaxBits) {
      throw Error(ErrorCode::InvalidArgument,
                  "bit-width must lie in [2, 8], got " + std::to_string(bits));
    }
  }

  int bits() const noexcept { return bits_; }
  ScaleRule scale_rule() const noexcept { return rule_; }
  std::int32_t lower_clip() const noexcept { return -(std::int32_t{1} << (bits_ - 1)); }
  std::int32_t upper_clip() const noexcept { return (std::int32_t{1} << (bits_ - 1)) - 1; }
  std::int32_t level_count() const noexcept { return std::int32_t{1} << bits_; }

  QuantSpec widened() const { return QuantSpec(bits_ + 1, rule_); }
  QuantSpec narrowed() const { return QuantSpec(bits_ - 1, rule_); }

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;

 private:
  int bits_;
  ScaleRule rule_;
};

template <std::floating_point T>
struct LevelTensor {
  Shape shape;
  std::vector<std::int32_t> indices;
  QuantSpec spec{2};
  T scale{1};

  std::size_t size() const noexcept { return indices.size(); }

  /// Throws unless every index is inside the clip range and the scale is a
  /// finite positive number.
  void validate() const {
    if (shape_size(shape) != indices.size()) {
      throw Error(ErrorCode::ShapeMismatch, "level tensor shape does not match index count");
    }
    if (!std::isfinite(scale) || !(scale > T{0})) {
      throw Error(ErrorCode::InvalidArgument, "invalid scale");
    }
    const auto lo = spec.lower_clip();
    const auto hi = spec.upper_clip();
    for (std::int32_t v : indices) {
      if (v < lo || v > hi) {
        throw Error(ErrorCode::IndexOutOfRange,
                    "index " + std::to_string(v) + " outside [" + std::to_string(lo) +
                        ", " + std::to_string(hi) + "]");
      }
    }
  }

  friend bool operator==(const LevelTensor&, const LevelTensor&) = default;
};

struct UpscaleBits {
  Shape shape;
  std::vector<std::uint8_t> bits;

  std::size_t size() const noexcept { return bits.size(); }
  friend bool operator==(const UpscaleBits&, const UpscaleBits&) = default;
};

/// max|w| / p, or 1 when every weight is zero.
template <std::floating_point T>
T compute_scale(std::span<const T> weights, const QuantSpec& spec) {
  if (weights.empty()) {
    throw Error(ErrorCode::InvalidArgument, "empty weight tensor");
  }
  T max_abs{0};
  for (T w : weights) max_abs = std::max(max_abs, std::abs(w));
  if (max_abs == T{0}) return T{1};
  return max_abs / static_cast<T>(spec.upper_clip());
}

template <std::floating_point T>
T compute_scale(const Tensor<T>& weights, const QuantSpec& spec) {
  return compute_scale<T>(weights.values(), spec);
}

/// Round half away from zero, then clip to [n, p].
template <std::floating_point T>
std::int32_t quantize_value(T x, T scale, const QuantSpec& spec) {
  const T r = std::round(x / scale);
  const T lo = static_cast<T>(spec.lower_clip());
  const T hi = static_cast<T>(spec.upper_clip());
  return static_cast<std::int32_t>(std::clamp(r, lo, hi));
}

template <std::floating_point T>
LevelTensor<T> quantize_indices(const Tensor<T>& weights, T scale, const QuantSpec& spec) {
  if (!std::isfinite(scale) || !(scale > T{0})) {
    throw Error(ErrorCode::InvalidArgument, "invalid scale");
  }
  LevelTensor<T> out{weights.shape(), {}, spec, scale};
  out.indices.resize(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.indices[i] = quantize_value(weights[i], scale, spec);
  }
  return out;
}

template <std::floating_point T>
LevelTensor<T> quantize(const Tensor<T>& weights, const QuantSpec& spec) {
  return quantize_indices(weights, compute_scale(weights, spec), spec);
}

template <std::floating_point T>
Tensor<T> dequantize(const LevelTensor<T>& levels) {
  std::vector<T> out(levels.indices.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(levels.indices[i]) * levels.scale;
  }
  return Tensor<T>(levels.shape, std::move(out));
}

/// Scale of the (b+1)-bit mode given the b-bit scale.
namespace quant_detail {
// num * s / den, rounded once. num * s is split exactly with fma so the only
// rounding is in the final step.
template <std::floating_point T>
T ratio_scale(T num, T s, T den) {
  const T hi = num * s;
  const T lo = std::fma(num, s, -hi);
  const T q = hi / den;
  const T rem = std::fma(-den, q, hi) + lo;
  return q + rem / den;
}
}  // namespace quant_detail

template <std::floating_point T>
T upscale_scale(T scale_b, int bits, ScaleRule rule) {
  if (!std::isfinite(scale_b) || !(scale_b > T{0})) {
    throw Error(ErrorCode::InvalidArgument, "invalid scale");
  }
  if (bits < QuantSpec::kMinBits || bits >= QuantSpec::kMaxBits) {
    throw Error(ErrorCode::InvalidArgument, "cannot up-scale a " + std::to_string(bits) + "-bit scale");
  }
  const auto pow2 = [](int e) { return static_cast<T>(std::int64_t{1} << e); };
  if (rule == ScaleRule::PaperEq2) {
    return quant_detail::ratio_scale(pow2(bits) - T{1}, scale_b, pow2(bits + 1) - T{1});
  }
  return quant_detail::ratio_scale(pow2(bits - 1) - T{1}, scale_b, pow2(bits) - T{1});
}

/// Inverse of upscale_scale: the b-bit scale given the (b+1)-bit one.
template <std::floating_point T>
T downscale_scale(T scale_hi, int bits, ScaleRule rule) {
  if (!std::isfinite(scale_hi) || !(scale_hi > T{0})) {
    throw Error(ErrorCode::InvalidArgument, "invalid scale");
  }
  if (bits < QuantSpec::kMinBits || bits >= QuantSpec::kMaxBits) {
    throw Error(ErrorCode::InvalidArgument, "cannot down-scale to " + std::to_string(bits) + " bits");
  }
  const auto pow2 = [](int e) { return static_cast<T>(std::int64_t{1} << e); };
  if (rule == ScaleRule::PaperEq2) {
    return quant_detail::ratio_scale(pow2(bits + 1) - T{1}, scale_hi, pow2(bits) - T{1});
  }
  return quant_detail::ratio_scale(pow2(bits) - T{1}, scale_hi, pow2(bits - 1) - T{1});
}

/// I^{b+1} = 2 I^b + lambda. The result always lies inside the (b+1)-bit
/// clip range because 2n + 0 = -2^b and 2p + 1 = 2^b - 1.
template <std::floating_point T>
LevelTensor<T> upscale_indices(const LevelTensor<T>& levels, const UpscaleBits& lambda) {
  if (levels.shape != lambda.shape || levels.size() != lambda.size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "up-scale bits " + shape_string(lambda.shape) + " do not match levels " +
                    shape_string(levels.shape));
  }
  const int bits = levels.spec.bits();
  if (bits >= QuantSpec::kMaxBits) {
    throw Error(ErrorCode::InvalidArgument, "cannot up-scale beyond 8 bits");
  }
  LevelTensor<T> out{levels.shape, {}, levels.spec.widened(),
                     upscale_scale(levels.scale, bits, levels.spec.scale_rule())};
  out.indices.resize(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) {
    out.indices[i] = 2 * levels.indices[i] + static_cast<std::int32_t>(lambda.bits[i] & 1u);
  }
  return out;
}

/// Splits a (b+1)-bit tensor into its shared b bits and the appended bit.
template <std::floating_point T>
std::pair<LevelTensor<T>, UpscaleBits> truncate_indices(const LevelTensor<T>& levels_hi) {
  const int bits_hi = levels_hi.spec.bits();
  if (bits_hi < 3) {
    throw Error(ErrorCode::InvalidArgument,
                "truncation needs at least 3 bits, got " + std::to_string(bits_hi));
  }
  LevelTensor<T> low{levels_hi.shape, {}, levels_hi.spec.narrowed(),
                     downscale_scale(levels_hi.scale, bits_hi - 1, levels_hi.spec.scale_rule())};
  UpscaleBits lambda{levels_hi.shape, {}};
  low.indices.resize(levels_hi.size());
  lambda.bits.resize(levels_hi.size());
  for (std::size_t i = 0; i < levels_hi.size(); ++i) {
    const std::int32_t hi = levels_hi.indices[i];
    const std::int32_t lo = hi >> 1;  // floor division
    low.indices[i] = lo;
    lambda.bits[i] = static_cast<std::uint8_t>(hi - 2 * lo);
  }
  return {std::move(low), std::move(lambda)};
}

/// Straight-through gradient of the quantizer: identity where w/s is inside
/// [n, p], zero where the forward pass clipped.
template <std::floating_point T>
Tensor<T> ste_weight_gradient(const Tensor<T>& upstream_grad, const Tensor<T>& weights, T scale,
                              const QuantSpec& spec) {
  if (upstream_grad.shape() != weights.shape()) {
    throw Error(ErrorCode::ShapeMismatch, "gradient and weight shapes differ");
  }
  Tensor<T> out = upstream_grad;
  const T lo = static_cast<T>(spec.lower_clip());
  const T hi = static_cast<T>(spec.upper_clip());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T r = weights[i] / scale;
    if (r < lo || r > hi) out[i] = T{0};
  }
  return out;
}

}  // namespace dualprec
