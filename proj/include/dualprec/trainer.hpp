#pragma once

// Two-phase dual-precision training.
//
// Phase 1 forwards the b-bit and (b+1)-bit models on every batch and trains
// on the combined hypothesis (h_low + eta*h_high)/2. Odd epochs update the
// shared parameters only; even epochs also update the up-scaling bits.
// Phase 2 trains the up-scaling bits alone on the (b+1)-bit hypothesis while
// every shared parameter stays fixed.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#if defined(__SSE2__)
#include <pmmintrin.h>
#endif

#include "dualprec/adam.hpp"
#include "dualprec/data.hpp"
#include "dualprec/dual.hpp"
#include "dualprec/nn.hpp"
#include "dualprec/quant.hpp"

namespace dualprec {

struct PhasePlan {
  int phase1_epochs = 50;
  int total_epochs = 100;
  double lr_phase1_odd = 3e-4;
  double lr_phase1_even = 3e-5;
  double lr_phase2 = 4e-3;
  double eta = 0.01;

  void validate() const {
    if (phase1_epochs <= 0) {
      throw Error(ErrorCode::Config, "phase1_epochs must be positive");
    }
    if (phase1_epochs > total_epochs) {
      throw Error(ErrorCode::Config, "phase1_epochs must not exceed epochs");
    }
    if (!(lr_phase1_odd > 0) || !(lr_phase1_even > 0) || !(lr_phase2 > 0)) {
      throw Error(ErrorCode::Config, "learning rates must be positive");
    }
    if (!(eta > 0)) throw Error(ErrorCode::Config, "eta must be positive");
  }
};

struct TrainConfig {
  std::string arch = "mlp256";
  std::string dataset = "mnist";
  std::string data_dir;
  int bits = 2;
  ScaleRule scale_rule = ScaleRule::PaperEq2;
  std::size_t batch_size = 125;
  std::uint64_t seed = 1;
  double index_sigma = 0.3;
  IndexNorm index_norm = IndexNorm::MaxAbs;
  std::string quantize_layers = "all";
  AugmentPolicy augment = AugmentPolicy::None;
  std::size_t train_limit = 0;  // 0 = whole split
  std::size_t test_limit = 0;

  void validate() const {
    if (batch_size < 1) throw Error(ErrorCode::Config, "batch_size must be at least 1");
    if (bits < QuantSpec::kMinBits || bits + 1 > QuantSpec::kMaxBits) {
      throw Error(ErrorCode::Config, "bits must lie in [2, 7]");
    }
    if (!(index_sigma > 0)) throw Error(ErrorCode::Config, "index_sigma must be positive");
  }
};

/// Which parameter groups an epoch updates.
struct TrainableSet {
  bool shared = false;  // master weights, biases, BatchNorm affine parameters
  bool lambda = false;  // latent up-scaling parameters

  std::string tag() const {
    if (shared && lambda) return "master+lambda";
    if (shared) return "master";
    if (lambda) return "lambda";
    return "none";
  }
  friend bool operator==(const TrainableSet&, const TrainableSet&) = default;
};

/// Epochs are 1-indexed: odd phase-1 epochs train the shared bits, even
/// phase-1 epochs train both, phase-2 epochs train lambda only.
inline TrainableSet trainable_set(int epoch, const PhasePlan& plan) {
  if (epoch <= plan.phase1_epochs) return {true, epoch % 2 == 0};
  return {false, true};
}

inline double epoch_learning_rate(int epoch, const PhasePlan& plan) {
  if (epoch > plan.phase1_epochs) return plan.lr_phase2;
  return epoch % 2 == 1 ? plan.lr_phase1_odd : plan.lr_phase1_even;
}

/// Which hypotheses a step forwards and trains on.
enum class StepKind {
  Combined,  // phase 1: (h_low + eta*h_high)/2
  HighOnly,  // phase 2
  LowOnly,   // single-precision baseline
};

template <class T>
DualModel<T> build_dual_model(const TrainConfig& cfg, const Shape& input_shape, std::size_t classes,
                              Rng& rng) {
  cfg.validate();
  Model<T> net = make_architecture<T>(cfg.arch, input_shape, classes);
  std::size_t weight_layers = 0;
  for (const auto& l : net.layers) weight_layers += l.has_weight() ? 1 : 0;
  return make_dual_model(std::move(net), QuantSpec(cfg.bits, cfg.scale_rule),
                         parse_quantize_mask(cfg.quantize_layers, weight_layers),
                         static_cast<T>(cfg.index_sigma), cfg.index_norm, rng);
}

/// One optimizer step on one batch. Returns the batch loss.
///
/// Gradients reach the latent tensors through straight-through estimators:
/// W_low = s_b * I^b and W_high = s_{b+1} * (2 I^b + lambda), with
/// dI^b/dmaster = 1/s_b (masked outside the clip range), dlambda/dlatent = 1
/// and both scales held constant.
template <class T>
T train_step(DualModel<T>& dm, const Batch& batch, StepKind kind, TrainableSet trainable, double lr,
             T eta) {
  const std::size_t n = dm.net.layers.size();
  std::vector<std::optional<DualLevels<T>>> levels(n);
  Bindings<T> bind_low, bind_high;
  bind_low.weights.assign(n, nullptr);
  bind_high.weights.assign(n, nullptr);
  bind_high.stats.assign(n, nullptr);
  for (std::size_t i = 0; i < n; ++i) {
    if (dm.dual[i]) {
      levels[i] = derive_levels(*dm.dual[i], dm.spec.scale_rule());
      bind_low.weights[i] = &levels[i]->w_low;
      bind_high.weights[i] = &levels[i]->w_high;
    }
    if (dm.net.layers[i].kind == LayerKind::BatchNorm) bind_high.stats[i] = &dm.high_stats[i];
  }

  const bool use_low = kind != StepKind::HighOnly;
  const bool use_high = kind != StepKind::LowOnly;
  Tape<T> tape_low, tape_high;
  Tensor<T> h_low, h_high;
  if (use_low) h_low = forward(dm.net, batch.images.template cast<T>(), Mode::Train, &tape_low, bind_low);
  if (use_high) h_high = forward(dm.net, batch.images.template cast<T>(), Mode::Train, &tape_high, bind_high);

  LossResult<T> loss;
  Tensor<T> g_low, g_high;
  switch (kind) {
    case StepKind::Combined: {
      loss = softmax_cross_entropy(combine_hypotheses(h_low, h_high, eta), batch.labels);
      g_low = loss.grad;
      g_high = loss.grad;
      for (T& v : g_low.storage()) v *= T{0.5};
      for (T& v : g_high.storage()) v *= eta / T{2};
      break;
    }
    case StepKind::HighOnly:
      loss = softmax_cross_entropy(h_high, batch.labels);
      g_high = std::move(loss.grad);
      break;
    case StepKind::LowOnly:
      loss = softmax_cross_entropy(h_low, batch.labels);
      g_low = std::move(loss.grad);
      break;
  }

  Gradients<T> grads_low, grads_high;
  if (use_low) grads_low = backward(dm.net, tape_low, g_low);
  if (use_high) grads_high = backward(dm.net, tape_high, g_high);

  // Sum of a parameter's gradient over the passes that used it.
  auto summed = [&](std::size_t i, bool weight) {
    Tensor<T> total;
    for (const Gradients<T>* g : {&grads_low, &grads_high}) {
      if (g->empty()) continue;
      const Tensor<T>& part = weight ? (*g)[i].weight : (*g)[i].bias;
      if (total.empty()) {
        total = part;
      } else {
        for (std::size_t j = 0; j < total.size(); ++j) total[j] += part[j];
      }
    }
    return total;
  };

  for (std::size_t i = 0; i < n; ++i) {
    Layer<T>& layer = dm.net.layers[i];
    LayerSlots<T>& slots = dm.slots[i];
    if (!layer.has_params()) continue;
    if (trainable.shared) {
      if (dm.dual[i]) {
        DualWeight<T>& dw = *dm.dual[i];
        const DualLevels<T>& lv = *levels[i];
        Tensor<T> g(dw.master.shape());
        if (use_low) {
          g = ste_weight_gradient(grads_low[i].weight, dw.master, lv.low.scale, lv.low.spec);
        }
        if (use_high) {
          const Tensor<T> gh =
              ste_weight_gradient(grads_high[i].weight, dw.master, lv.low.scale, lv.low.spec);
          const T factor = T{2} * lv.high.scale / lv.low.scale;
          for (std::size_t j = 0; j < g.size(); ++j) g[j] += factor * gh[j];
        }
        adam_step<T>(dw.master.values(), g.values(), slots.master, lr);
      } else {
        const Tensor<T> g = summed(i, true);
        adam_step<T>(layer.weight.values(), g.values(), slots.weight, lr);
      }
      const Tensor<T> gb = summed(i, false);
      adam_step<T>(layer.bias.values(), gb.values(), slots.bias, lr);
    }
    if (trainable.lambda && dm.dual[i] && use_high) {
      DualWeight<T>& dw = *dm.dual[i];
      Tensor<T> g = grads_high[i].weight;
      const T s_hi = levels[i]->high.scale;
      for (T& v : g.storage()) v *= s_hi;
      adam_step<T>(dw.lambda_latent.values(), g.values(), slots.lambda, lr);
      normalize_index_params(dw.lambda_latent, dw.init_max_abs, dm.index_sigma, dm.index_norm);
    }
  }
  return loss.loss;
}

/// Flushes denormals to zero while alive. Late in training the softmax
/// backward produces long runs of denormal floats that slow GEMMs several
/// fold; flushing them does not change any result we record.
class DenormalGuard {
 public:
#if defined(__SSE2__)
  DenormalGuard() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }  // FTZ | DAZ
  ~DenormalGuard() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#else
  DenormalGuard() = default;
#endif
 public:
  DenormalGuard(const DenormalGuard&) = delete;
  DenormalGuard& operator=(const DenormalGuard&) = delete;
};

struct EpochStats {
  double train_loss = 0;
  std::size_t batches = 0;
};

template <class T>
EpochStats run_epoch(DualModel<T>& dm, const Dataset& data, StepKind kind, TrainableSet trainable,
                     double lr, double eta, std::size_t batch_size, AugmentPolicy augment_policy,
                     Rng& rng) {
  const DenormalGuard flush;
  const std::vector<std::size_t> order = shuffled_order(data.size(), rng);
  EpochStats stats;
  double total = 0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t len = std::min(batch_size, order.size() - start);
    Batch batch = gather(data, std::span<const std::size_t>(order.data() + start, len));
    augment(batch.images, augment_policy, rng);
    total += static_cast<double>(train_step(dm, batch, kind, trainable, lr, static_cast<T>(eta)));
    ++stats.batches;
  }
  stats.train_loss = stats.batches ? total / static_cast<double>(stats.batches) : 0.0;
  return stats;
}

/// One phase-1 epoch (1-indexed). Odd epochs update the shared parameters at
/// lr_phase1_odd; even epochs update them and the up-scaling bits at
/// lr_phase1_even.
template <class T>
EpochStats train_epoch_phase1(DualModel<T>& dm, const Dataset& data, int epoch_index,
                              const PhasePlan& plan, const TrainConfig& cfg, Rng& rng) {
  if (epoch_index < 1 || epoch_index > plan.phase1_epochs) {
    throw Error(ErrorCode::InvalidArgument,
                "phase-1 epoch " + std::to_string(epoch_index) + " outside [1, " +
                    std::to_string(plan.phase1_epochs) + "]");
  }
  return run_epoch(dm, data, StepKind::Combined, trainable_set(epoch_index, plan),
                   epoch_learning_rate(epoch_index, plan), plan.eta, cfg.batch_size, cfg.augment,
                   rng);
}

/// One phase-2 epoch: up-scaling bits only, trained on the high hypothesis.
template <class T>
EpochStats train_epoch_phase2(DualModel<T>& dm, const Dataset& data, const PhasePlan& plan,
                              const TrainConfig& cfg, Rng& rng) {
  return run_epoch(dm, data, StepKind::HighOnly, TrainableSet{false, true}, plan.lr_phase2,
                   plan.eta, cfg.batch_size, cfg.augment, rng);
}

/// Single-precision quantization-aware training of the low mode at `lr`,
/// used for dedicated b-bit baselines.
template <class T>
EpochStats train_epoch_baseline(DualModel<T>& dm, const Dataset& data, double lr,
                                const TrainConfig& cfg, Rng& rng) {
  return run_epoch(dm, data, StepKind::LowOnly, TrainableSet{true, false}, lr, 1.0,
                   cfg.batch_size, cfg.augment, rng);
}

/// Top-1 accuracy in percent.
inline double accuracy(const QuantizedModel<float>& qm, const Dataset& data, Precision precision,
                       std::size_t batch_size = 500) {
  PrecisionView<float> view(qm, precision);
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t len = std::min(batch_size, data.size() - start);
    idx.resize(len);
    std::iota(idx.begin(), idx.end(), start);
    const Batch b = gather(data, idx);
    correct += count_correct(infer(qm.net, b.images, view.bindings()), b.labels);
  }
  return data.size() ? 100.0 * static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

struct EpochRecord {
  int epoch = 0;
  int phase = 1;
  std::string trainable;
  double train_loss = 0;
  double low_accuracy = 0;
  double high_accuracy = 0;
  std::vector<LayerLevels> levels;
};

inline nlohmann::ordered_json to_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["phase"] = r.phase;
  j["trainable"] = r.trainable;
  j["train_loss"] = r.train_loss;
  j["low_accuracy"] = r.low_accuracy;
  j["high_accuracy"] = r.high_accuracy;
  nlohmann::ordered_json levels = nlohmann::ordered_json::array();
  for (const LayerLevels& l : r.levels) {
    levels.push_back({{"layer", l.name}, {"low", l.low}, {"high", l.high}});
  }
  j["levels"] = std::move(levels);
  return j;
}

inline EpochRecord epoch_record_from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.phase = j.at("phase").get<int>();
  r.trainable = j.at("trainable").get<std::string>();
  r.train_loss = j.at("train_loss").get<double>();
  r.low_accuracy = j.at("low_accuracy").get<double>();
  r.high_accuracy = j.at("high_accuracy").get<double>();
  for (const auto& l : j.at("levels")) {
    r.levels.push_back({l.at("layer").get<std::string>(), l.at("low").get<std::size_t>(),
                        l.at("high").get<std::size_t>()});
  }
  return r;
}

inline std::size_t max_high_levels(const EpochRecord& r) {
  std::size_t m = 0;
  for (const LayerLevels& l : r.levels) m = std::max(m, l.high);
  return m;
}

struct TrainResult {
  DualModel<float> model;
  std::vector<EpochRecord> history;
};

/// Observers called after each epoch, before the next one starts.
struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(int epoch, const DualModel<float>&)> on_checkpoint;
};

/// Independent deterministic streams for initialization and data order.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return Rng(seq);
}

/// Phase-1 epochs 1..phase1_epochs, then phase-2 epochs up to total_epochs.
/// Each epoch is evaluated in both modes on `test` and reported through
/// hooks.on_epoch as soon as it completes.
inline TrainResult run_training(const TrainConfig& cfg, const PhasePlan& plan, const Dataset& train,
                                const Dataset& test, const TrainHooks& hooks = {}) {
  cfg.validate();
  plan.validate();
  Rng init_rng = make_rng(cfg.seed, 0);
  Rng data_rng = make_rng(cfg.seed, 1);
  TrainResult result{build_dual_model<float>(cfg, train.sample_shape(), train.classes, init_rng), {}};
  DualModel<float>& dm = result.model;
  for (int epoch = 1; epoch <= plan.total_epochs; ++epoch) {
    const bool phase1 = epoch <= plan.phase1_epochs;
    const EpochStats stats = phase1 ? train_epoch_phase1(dm, train, epoch, plan, cfg, data_rng)
                                    : train_epoch_phase2(dm, train, plan, cfg, data_rng);
    const QuantizedModel<float> frozen = freeze(dm);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = phase1 ? 1 : 2;
    rec.trainable = trainable_set(epoch, plan).tag();
    rec.train_loss = stats.train_loss;
    rec.low_accuracy = accuracy(frozen, test, Precision::Low);
    rec.high_accuracy = accuracy(frozen, test, Precision::High);
    rec.levels = layer_level_counts(frozen);
    result.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (hooks.on_checkpoint) hooks.on_checkpoint(epoch, dm);
  }
  return result;
}

}  // namespace dualprec
