#pragma once

// Dual-precision weights: one latent master tensor generates the shared b-bit
// indices, one latent tensor generates the appended bit, and the (b+1)-bit
// indices are always 2*I^b + lambda.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dualprec/adam.hpp"
#include "dualprec/error.hpp"
#include "dualprec/nn.hpp"
#include "dualprec/quant.hpp"
#include "dualprec/tensor.hpp"

namespace dualprec {

enum class Precision { Low, High };

inline const char* to_string(Precision p) { return p == Precision::Low ? "low" : "high"; }

inline Precision parse_precision(const std::string& text) {
  if (text == "low") return Precision::Low;
  if (text == "high") return Precision::High;
  throw Error(ErrorCode::InvalidArgument, "precision must be 'low' or 'high', got '" + text + "'");
}

/// (h_low + eta * h_high) / 2 over logits.
template <class T>
Tensor<T> combine_hypotheses(const Tensor<T>& h_low, const Tensor<T>& h_high, T eta) {
  if (h_low.shape() != h_high.shape()) {
    throw Error(ErrorCode::ShapeMismatch, "hypothesis shapes " + shape_string(h_low.shape()) +
                                              " and " + shape_string(h_high.shape()) + " differ");
  }
  if (!(eta > T{0})) throw Error(ErrorCode::InvalidArgument, "eta must be positive");
  Tensor<T> out(h_low.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (h_low[i] + eta * h_high[i]) / T{2};
  return out;
}

/// lambda = 1 where the latent value is strictly positive. The backward pass
/// treats this threshold as identity.
template <class T>
UpscaleBits binarize_upscale(const Tensor<T>& lambda_latent) {
  UpscaleBits out{lambda_latent.shape(), std::vector<std::uint8_t>(lambda_latent.size())};
  for (std::size_t i = 0; i < lambda_latent.size(); ++i) {
    out.bits[i] = lambda_latent[i] > T{0} ? 1 : 0;
  }
  return out;
}

enum class IndexNorm { MaxAbs, Std, None };

inline const char* to_string(IndexNorm n) {
  switch (n) {
    case IndexNorm::MaxAbs: return "max_abs";
    case IndexNorm::Std: return "std";
    case IndexNorm::None: return "none";
  }
  return "?";
}

inline IndexNorm parse_index_norm(const std::string& text) {
  if (text == "max_abs") return IndexNorm::MaxAbs;
  if (text == "std") return IndexNorm::Std;
  if (text == "none") return IndexNorm::None;
  throw Error(ErrorCode::InvalidArgument, "unknown index normalization '" + text + "'");
}

/// Rescales the latent up-scaling parameters by one positive factor. MaxAbs
/// restores the max-abs value recorded at initialization; Std restores the
/// standard deviation `sigma`. Signs (and so binarize_upscale) never change.
/// An all-zero tensor is left as is.
template <class T>
void normalize_index_params(Tensor<T>& lambda_latent, T init_max_abs, T sigma,
                            IndexNorm mode = IndexNorm::MaxAbs) {
  if (mode == IndexNorm::None || lambda_latent.empty()) return;
  if (!(sigma > T{0})) throw Error(ErrorCode::InvalidArgument, "sigma must be positive");
  double current = 0, target = 0;
  if (mode == IndexNorm::MaxAbs) {
    for (T v : lambda_latent.values()) current = std::max(current, static_cast<double>(std::abs(v)));
    target = static_cast<double>(init_max_abs);
  } else {
    double sum = 0, sq = 0;
    for (T v : lambda_latent.values()) sum += v;
    const double mean = sum / static_cast<double>(lambda_latent.size());
    for (T v : lambda_latent.values()) sq += (v - mean) * (v - mean);
    current = std::sqrt(sq / static_cast<double>(lambda_latent.size()));
    target = static_cast<double>(sigma);
  }
  if (current == 0.0 || !(target > 0.0)) return;
  const T factor = static_cast<T>(target / current);
  for (T& v : lambda_latent.storage()) v *= factor;
}

template <class T>
struct DualWeight {
  Tensor<T> master;         // latent full-precision weights behind the shared bits
  Tensor<T> lambda_latent;  // latent parameters behind the up-scaling bits
  int bits = 2;             // shared bit-width b
  T init_max_abs{0};        // max|lambda_latent| at initialization

  friend bool operator==(const DualWeight&, const DualWeight&) = default;
};

/// Everything one forward pass needs from a DualWeight.
template <class T>
struct DualLevels {
  LevelTensor<T> low;
  UpscaleBits lambda;
  LevelTensor<T> high;
  Tensor<T> w_low;
  Tensor<T> w_high;
};

template <class T>
DualLevels<T> derive_levels(const DualWeight<T>& dw, ScaleRule rule) {
  const QuantSpec spec(dw.bits, rule);
  DualLevels<T> out;
  out.low = quantize(dw.master, spec);
  out.lambda = binarize_upscale(dw.lambda_latent);
  out.high = upscale_indices(out.low, out.lambda);
  out.w_low = dequantize(out.low);
  out.w_high = dequantize(out.high);
  return out;
}

/// Master weights from the fan-in uniform initializer, latent up-scaling
/// parameters i.i.d. Normal(0, sigma).
template <class T>
DualWeight<T> init_dual_weight(const Shape& shape, int bits, T sigma, Rng& rng) {
  (void)QuantSpec(bits).widened();  // b in [2, 7]
  DualWeight<T> dw;
  dw.bits = bits;
  dw.master = Tensor<T>(shape);
  init_uniform_fan_in(dw.master, rng);
  dw.lambda_latent = Tensor<T>(shape);
  std::normal_distribution<double> normal(0.0, static_cast<double>(sigma));
  T max_abs{0};
  for (T& v : dw.lambda_latent.storage()) {
    v = static_cast<T>(normal(rng));
    max_abs = std::max(max_abs, std::abs(v));
  }
  dw.init_max_abs = max_abs;
  return dw;
}

template <class T>
struct LayerSlots {
  AdamSlot<T> master;
  AdamSlot<T> lambda;
  AdamSlot<T> weight;
  AdamSlot<T> bias;

  friend bool operator==(const LayerSlots&, const LayerSlots&) = default;
};

/// Training-time dual-precision model. Quantized layers keep their weights in
/// `dual[i]` and leave `net.layers[i].weight` empty.
template <class T>
struct DualModel {
  Model<T> net;
  QuantSpec spec{2};
  std::vector<std::optional<DualWeight<T>>> dual;
  std::vector<BnStats<T>> high_stats;
  std::vector<LayerSlots<T>> slots;
  IndexNorm index_norm = IndexNorm::MaxAbs;
  T index_sigma{static_cast<T>(0.3)};

  friend bool operator==(const DualModel&, const DualModel&) = default;
};

/// Parses "all", "none" or a comma-separated list of weight-layer ordinals
/// (0 = first Dense/Conv2d layer).
inline std::vector<bool> parse_quantize_mask(const std::string& text, std::size_t weight_layers) {
  if (text == "all") return std::vector<bool>(weight_layers, true);
  std::vector<bool> mask(weight_layers, false);
  if (text == "none" || text.empty()) return mask;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string item = text.substr(pos, comma - pos);
    std::size_t idx = 0;
    try {
      std::size_t used = 0;
      idx = std::stoul(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorCode::InvalidArgument, "bad quantize_layers entry '" + item + "'");
    }
    if (idx >= weight_layers) {
      throw Error(ErrorCode::InvalidArgument, "quantize_layers index " + item + " out of range");
    }
    mask[idx] = true;
    pos = comma + 1;
  }
  return mask;
}

template <class T>
DualModel<T> make_dual_model(Model<T> net, const QuantSpec& spec, const std::vector<bool>& mask,
                             T index_sigma, IndexNorm index_norm, Rng& rng) {
  DualModel<T> dm;
  dm.spec = spec;
  dm.index_norm = index_norm;
  dm.index_sigma = index_sigma;
  dm.dual.resize(net.layers.size());
  dm.high_stats.resize(net.layers.size());
  dm.slots.resize(net.layers.size());
  std::size_t ordinal = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    Layer<T>& layer = net.layers[i];
    if (layer.has_weight()) {
      layer.quantized = ordinal < mask.size() && mask[ordinal];
      ++ordinal;
      if (layer.quantized) {
        dm.dual[i] = init_dual_weight<T>(layer.weight.shape(), spec.bits(), index_sigma, rng);
        layer.weight = Tensor<T>();
      } else {
        init_uniform_fan_in(layer.weight, rng);
      }
      layer.bias.fill(T{0});
    } else if (layer.kind == LayerKind::BatchNorm) {
      dm.high_stats[i] = layer.stats;
    }
  }
  dm.net = std::move(net);
  return dm;
}

// ---------------------------------------------------------------------------
// Frozen (deployable) form

template <class T>
struct QuantizedLayer {
  LevelTensor<T> low;
  UpscaleBits lambda;  // empty when the model carries no up-scale section
  T scale_hi{0};

  friend bool operator==(const QuantizedLayer&, const QuantizedLayer&) = default;
};

/// Integer indices plus scales for every quantized layer; what the packed
/// file stores. Quantized layers leave `net.layers[i].weight` empty.
template <class T>
struct QuantizedModel {
  Model<T> net;
  QuantSpec spec{2};
  bool has_upscale = false;
  std::vector<std::optional<QuantizedLayer<T>>> quant;
  std::vector<BnStats<T>> high_stats;

  friend bool operator==(const QuantizedModel&, const QuantizedModel&) = default;
};

template <class T>
LevelTensor<T> high_levels(const QuantizedLayer<T>& q) {
  LevelTensor<T> hi = upscale_indices(q.low, q.lambda);
  hi.scale = q.scale_hi;
  return hi;
}

template <class T>
QuantizedModel<T> freeze(const DualModel<T>& dm, bool with_upscale = true) {
  QuantizedModel<T> qm;
  qm.net = dm.net;
  qm.spec = dm.spec;
  qm.has_upscale = with_upscale;
  qm.quant.resize(dm.net.layers.size());
  qm.high_stats.resize(dm.net.layers.size());
  if (with_upscale) qm.high_stats = dm.high_stats;
  for (std::size_t i = 0; i < dm.dual.size(); ++i) {
    if (!dm.dual[i]) continue;
    const DualWeight<T>& dw = *dm.dual[i];
    QuantizedLayer<T> q;
    q.low = quantize(dw.master, dm.spec);
    if (with_upscale) {
      q.lambda = binarize_upscale(dw.lambda_latent);
      q.scale_hi = upscale_scale(q.low.scale, dm.spec.bits(), dm.spec.scale_rule());
    }
    qm.quant[i] = std::move(q);
  }
  return qm;
}

/// Dequantized weights for one precision plus bindings pointing at them.
template <class T>
class PrecisionView {
 public:
  PrecisionView(const QuantizedModel<T>& qm, Precision precision) {
    if (precision == Precision::High && !qm.has_upscale) {
      throw Error(ErrorCode::MissingUpscaleSection,
                  "high precision requested but the model carries no up-scaling bits");
    }
    const std::size_t n = qm.net.layers.size();
    weights_.resize(n);
    bind_.weights.assign(n, nullptr);
    bind_.stats.assign(n, nullptr);
    for (std::size_t i = 0; i < n; ++i) {
      if (qm.quant[i]) {
        weights_[i] = precision == Precision::Low ? dequantize(qm.quant[i]->low)
                                                  : dequantize(high_levels(*qm.quant[i]));
        bind_.weights[i] = &weights_[i];
      }
      if (precision == Precision::High && qm.net.layers[i].kind == LayerKind::BatchNorm) {
        bind_.stats[i] = const_cast<BnStats<T>*>(&qm.high_stats[i]);
      }
    }
  }

  PrecisionView(const PrecisionView&) = delete;
  PrecisionView& operator=(const PrecisionView&) = delete;

  const Bindings<T>& bindings() const noexcept { return bind_; }

 private:
  std::vector<Tensor<T>> weights_;
  Bindings<T> bind_;
};

template <class T>
Tensor<T> logits(const QuantizedModel<T>& qm, const Tensor<T>& input, Precision precision) {
  PrecisionView<T> view(qm, precision);
  return infer(qm.net, input, view.bindings());
}

// ---------------------------------------------------------------------------
// Level statistics

using LevelHistogram = std::map<std::int32_t, std::size_t>;

inline LevelHistogram level_histogram(std::span<const std::int32_t> indices) {
  LevelHistogram h;
  for (std::int32_t v : indices) ++h[v];
  return h;
}

inline std::size_t distinct_levels(std::span<const std::int32_t> indices) {
  return std::set<std::int32_t>(indices.begin(), indices.end()).size();
}

struct LayerLevels {
  std::string name;
  std::size_t low = 0;
  std::size_t high = 0;  // 0 when the model has no up-scale section
};

template <class T>
std::vector<LayerLevels> layer_level_counts(const QuantizedModel<T>& qm) {
  std::vector<LayerLevels> out;
  for (std::size_t i = 0; i < qm.quant.size(); ++i) {
    if (!qm.quant[i]) continue;
    LayerLevels ll{qm.net.layers[i].name, distinct_levels(qm.quant[i]->low.indices), 0};
    if (qm.has_upscale) ll.high = distinct_levels(high_levels(*qm.quant[i]).indices);
    out.push_back(std::move(ll));
  }
  return out;
}

}  // namespace dualprec
