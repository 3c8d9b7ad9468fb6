#pragma once

// Minimal reverse-mode network core: Dense, Conv2d (same padding, stride 1),
// BatchNorm, ReLU, 2x2 max pooling and Flatten, with softmax cross-entropy.
//
// Parameters live in Model. A forward pass records what the backward pass
// needs into a Tape. Bindings let the caller substitute the weight tensor a
// layer multiplies with (a dequantized view) and the BatchNorm running
// statistics it reads and updates, which is how one parameter set serves two
// precision modes.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dualprec/error.hpp"
#include "dualprec/tensor.hpp"

namespace dualprec {

using Rng = std::mt19937_64;

enum class LayerKind : std::uint8_t { Dense, Conv2d, BatchNorm, ReLU, MaxPool2, Flatten };
enum class Mode { Train, Eval };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::MaxPool2: return "maxpool2";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

template <class T>
struct BnStats {
  Tensor<T> mean;
  Tensor<T> var;
  friend bool operator==(const BnStats&, const BnStats&) = default;
};

template <class T>
struct Layer {
  LayerKind kind{LayerKind::ReLU};
  std::string name;
  Tensor<T> weight;  // Dense (out,in); Conv2d (out,in,k,k); BatchNorm gamma (C)
  Tensor<T> bias;    // Dense/Conv2d (out); BatchNorm beta (C)
  BnStats<T> stats;  // BatchNorm running statistics
  bool quantized = false;

  bool has_weight() const noexcept {
    return kind == LayerKind::Dense || kind == LayerKind::Conv2d;
  }
  bool has_params() const noexcept { return has_weight() || kind == LayerKind::BatchNorm; }

  friend bool operator==(const Layer&, const Layer&) = default;
};

template <class T>
struct Model {
  std::string arch;
  Shape input_shape;  // per-sample (C,H,W)
  std::size_t classes = 0;
  std::vector<Layer<T>> layers;

  friend bool operator==(const Model&, const Model&) = default;
};

template <class T>
struct Bindings {
  std::vector<const Tensor<T>*> weights;  // per layer; nullptr -> layer.weight
  std::vector<BnStats<T>*> stats;         // per layer; nullptr -> layer.stats

  const Tensor<T>& weight(const Model<T>& m, std::size_t i) const {
    return (i < weights.size() && weights[i]) ? *weights[i] : m.layers[i].weight;
  }
};

template <class T>
struct LayerCache {
  Shape in_shape;
  Tensor<T> saved;  // Dense input, Conv2d im2col columns, BN x-hat, ReLU output
  std::vector<T> inv_std;
  std::vector<std::uint32_t> argmax;
  const Tensor<T>* weight = nullptr;
  Mode mode = Mode::Train;
};

template <class T>
struct Tape {
  std::vector<LayerCache<T>> caches;
};

template <class T>
struct LayerGrad {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <class T>
using Gradients = std::vector<LayerGrad<T>>;

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapM = Eigen::Map<const MatRM<T>>;

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

template <class T>
[[noreturn]] void shape_error(std::size_t i, const Layer<T>& layer, const std::string& what) {
  throw Error(ErrorCode::ShapeMismatch,
              "layer " + std::to_string(i) + " (" + layer.name + "): " + what);
}

// col[(c*k + ki)*k + kj][y*w + x] = in[c][y + ki - pad][x + kj - pad]
template <class T>
void im2col(const T* in, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* col) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((ch * k + ki) * k + kj) * h * w;
        for (std::size_t y = 0; y < h; ++y) {
          const auto sy = static_cast<std::ptrdiff_t>(y + ki) - pad;
          for (std::size_t x = 0; x < w; ++x) {
            const auto sx = static_cast<std::ptrdiff_t>(x + kj) - pad;
            const bool inside = sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx >= 0 &&
                                sx < static_cast<std::ptrdiff_t>(w);
            row[y * w + x] = inside ? in[(ch * h + static_cast<std::size_t>(sy)) * w +
                                         static_cast<std::size_t>(sx)]
                                    : T{0};
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* in) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((ch * k + ki) * k + kj) * h * w;
        for (std::size_t y = 0; y < h; ++y) {
          const auto sy = static_cast<std::ptrdiff_t>(y + ki) - pad;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t x = 0; x < w; ++x) {
            const auto sx = static_cast<std::ptrdiff_t>(x + kj) - pad;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
            in[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] +=
                row[y * w + x];
          }
        }
      }
    }
  }
}

template <class T>
Tensor<T> dense_forward(std::size_t i, const Layer<T>& layer, const Tensor<T>& w,
                        const Tensor<T>& x) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    shape_error(i, layer, "expected input (batch," + std::to_string(w.rank() == 2 ? w.dim(1) : 0) +
                              "), got " + shape_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), in = w.dim(1), out = w.dim(0);
  Tensor<T> y({batch, out});
  MapM<T> ym(y.data(), batch, out);
  ym.noalias() = CMapM<T>(x.data(), batch, in) * CMapM<T>(w.data(), out, in).transpose();
  ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(layer.bias.data(), out);
  return y;
}

template <class T>
Tensor<T> conv_forward(std::size_t i, const Layer<T>& layer, const Tensor<T>& w, const Tensor<T>& x,
                       Tensor<T>* cols_out) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
    shape_error(i, layer, "expected input (batch," + std::to_string(w.rank() == 4 ? w.dim(1) : 0) +
                              ",h,w), got " + shape_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t out = w.dim(0), k = w.dim(2);
  const std::size_t ckk = c * k * k, hw = h * wd;
  Tensor<T> y({batch, out, h, wd});
  Tensor<T> cols({batch, ckk, hw});
  CMapM<T> wm(w.data(), out, ckk);
  for (std::size_t n = 0; n < batch; ++n) {
    T* col = cols.data() + n * ckk * hw;
    im2col(x.data() + n * c * hw, c, h, wd, k, col);
    MapM<T> yn(y.data() + n * out * hw, out, hw);
    yn.noalias() = wm * CMapM<T>(col, ckk, hw);
    yn.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(layer.bias.data(), out);
  }
  if (cols_out) *cols_out = std::move(cols);
  return y;
}

template <class T>
Tensor<T> batchnorm_forward(std::size_t i, const Layer<T>& layer, BnStats<T>& stats,
                            const Tensor<T>& x, Mode mode, LayerCache<T>* cache) {
  const std::size_t channels = layer.weight.size();
  if ((x.rank() != 2 && x.rank() != 4) || x.dim(1) != channels) {
    shape_error(i, layer, "expected " + std::to_string(channels) + " channels, got " +
                              shape_string(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const std::size_t count = batch * spatial;
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    T mean, var;
    if (mode == Mode::Train) {
      double sum = 0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = x.data() + (n * channels + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) sum += p[s];
      }
      const double mu = sum / static_cast<double>(count);
      double sq = 0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = x.data() + (n * channels + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) {
          const double d = p[s] - mu;
          sq += d * d;
        }
      }
      const double biased = sq / static_cast<double>(count);
      mean = static_cast<T>(mu);
      var = static_cast<T>(biased);
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : biased;
      stats.mean[c] = static_cast<T>((1.0 - kBnMomentum) * stats.mean[c] + kBnMomentum * mu);
      stats.var[c] = static_cast<T>((1.0 - kBnMomentum) * stats.var[c] + kBnMomentum * unbiased);
    } else {
      mean = stats.mean[c];
      var = stats.var[c];
    }
    const T istd = T{1} / std::sqrt(var + static_cast<T>(kBnEps));
    inv_std[c] = istd;
    const T gamma = layer.weight[c], beta = layer.bias[c];
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        const T xh = (x[off + s] - mean) * istd;
        xhat[off + s] = xh;
        y[off + s] = gamma * xh + beta;
      }
    }
  }
  if (cache) {
    cache->saved = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <class T>
Tensor<T> maxpool_forward(std::size_t i, const Layer<T>& layer, const Tensor<T>& x,
                          LayerCache<T>* cache) {
  if (x.rank() != 4 || x.dim(2) < 2 || x.dim(3) < 2) {
    shape_error(i, layer, "expected (batch,c,h>=2,w>=2), got " + shape_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> y({batch, c, oh, ow});
  std::vector<std::uint32_t> argmax(y.size());
  for (std::size_t nc = 0; nc < batch * c; ++nc) {
    const T* p = x.data() + nc * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (2 * oy + dy) * w + 2 * ox + dx;
            if (p[idx] > p[best]) best = idx;
          }
        }
        const std::size_t o = (nc * oh + oy) * ow + ox;
        y[o] = p[best];
        argmax[o] = static_cast<std::uint32_t>(nc * h * w + best);
      }
    }
  }
  if (cache) cache->argmax = std::move(argmax);
  return y;
}

template <class T>
Tensor<T> forward_impl(const Model<T>& model, const Tensor<T>& input, Mode mode, Tape<T>* tape,
                       const Bindings<T>& bind) {
  if (input.rank() < 2) {
    throw Error(ErrorCode::ShapeMismatch, "input must carry a batch dimension, got " +
                                              shape_string(input.shape()));
  }
  if (tape) {
    tape->caches.clear();
    tape->caches.resize(model.layers.size());
  }
  Tensor<T> x = input;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer<T>& layer = model.layers[i];
    LayerCache<T>* cache = tape ? &tape->caches[i] : nullptr;
    if (cache) {
      cache->in_shape = x.shape();
      cache->mode = mode;
    }
    switch (layer.kind) {
      case LayerKind::Dense: {
        const Tensor<T>& w = bind.weight(model, i);
        Tensor<T> y = dense_forward(i, layer, w, x);
        if (cache) {
          cache->weight = &w;
          cache->saved = std::move(x);
        }
        x = std::move(y);
        break;
      }
      case LayerKind::Conv2d: {
        const Tensor<T>& w = bind.weight(model, i);
        x = conv_forward(i, layer, w, x, cache ? &cache->saved : nullptr);
        if (cache) cache->weight = &w;
        break;
      }
      case LayerKind::BatchNorm: {
        BnStats<T>* stats = (i < bind.stats.size() && bind.stats[i])
                                ? bind.stats[i]
                                : const_cast<BnStats<T>*>(&layer.stats);
        x = batchnorm_forward(i, layer, *stats, x, mode, cache);
        break;
      }
      case LayerKind::ReLU: {
        for (T& v : x.storage()) v = v > T{0} ? v : T{0};
        if (cache) cache->saved = x;
        break;
      }
      case LayerKind::MaxPool2:
        x = maxpool_forward(i, layer, x, cache);
        break;
      case LayerKind::Flatten: {
        const std::size_t batch = x.dim(0);
        x = x.reshaped({batch, x.size() / batch});
        break;
      }
    }
    if (!x.all_finite()) {
      throw Error(ErrorCode::NumericOverflow, "numeric overflow at layer " + std::to_string(i));
    }
  }
  return x;
}

}  // namespace detail

/// Runs the network. Train mode normalizes with batch statistics and updates
/// the bound running statistics; Eval mode reads them only.
template <class T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& input, Mode mode, Tape<T>* tape = nullptr,
                  const Bindings<T>& bind = {}) {
  return detail::forward_impl(model, input, mode, tape, bind);
}

/// Eval-mode forward on an immutable model.
template <class T>
Tensor<T> infer(const Model<T>& model, const Tensor<T>& input, const Bindings<T>& bind = {}) {
  return detail::forward_impl(model, input, Mode::Eval, static_cast<Tape<T>*>(nullptr), bind);
}

/// Reverse pass over a tape recorded by forward(). Returns gradients of the
/// loss with respect to each layer's bound weight and its bias (gamma/beta
/// for BatchNorm). Gradient with respect to the network input is written to
/// grad_input when requested.
template <class T>
Gradients<T> backward(const Model<T>& model, const Tape<T>& tape, const Tensor<T>& grad_logits,
                      Tensor<T>* grad_input = nullptr) {
  using namespace detail;
  Gradients<T> grads(model.layers.size());
  Tensor<T> g = grad_logits;
  for (std::size_t ii = model.layers.size(); ii-- > 0;) {
    const Layer<T>& layer = model.layers[ii];
    const LayerCache<T>& cache = tape.caches.at(ii);
    const bool need_input = ii > 0 || grad_input != nullptr;
    switch (layer.kind) {
      case LayerKind::Dense: {
        const Tensor<T>& w = *cache.weight;
        const std::size_t batch = g.dim(0), out = w.dim(0), in = w.dim(1);
        CMapM<T> gm(g.data(), batch, out);
        LayerGrad<T>& lg = grads[ii];
        lg.weight = Tensor<T>(w.shape());
        lg.bias = Tensor<T>(layer.bias.shape());
        MapM<T>(lg.weight.data(), out, in).noalias() =
            gm.transpose() * CMapM<T>(cache.saved.data(), batch, in);
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(lg.bias.data(), out) = gm.colwise().sum();
        if (need_input) {
          Tensor<T> gx({batch, in});
          MapM<T>(gx.data(), batch, in).noalias() = gm * CMapM<T>(w.data(), out, in);
          g = std::move(gx);
        }
        break;
      }
      case LayerKind::Conv2d: {
        const Tensor<T>& w = *cache.weight;
        const std::size_t batch = cache.in_shape[0], c = cache.in_shape[1];
        const std::size_t h = cache.in_shape[2], wd = cache.in_shape[3];
        const std::size_t out = w.dim(0), k = w.dim(2), ckk = c * k * k, hw = h * wd;
        LayerGrad<T>& lg = grads[ii];
        lg.weight = Tensor<T>(w.shape());
        lg.bias = Tensor<T>(layer.bias.shape());
        MapM<T> gw(lg.weight.data(), out, ckk);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(lg.bias.data(), out);
        CMapM<T> wm(w.data(), out, ckk);
        Tensor<T> gx;
        if (need_input) gx = Tensor<T>(cache.in_shape);
        std::vector<T> dcol(need_input ? ckk * hw : 0);
        for (std::size_t n = 0; n < batch; ++n) {
          CMapM<T> gy(g.data() + n * out * hw, out, hw);
          gw.noalias() += gy * CMapM<T>(cache.saved.data() + n * ckk * hw, ckk, hw).transpose();
          gb += gy.rowwise().sum();
          if (need_input) {
            MapM<T>(dcol.data(), ckk, hw).noalias() = wm.transpose() * gy;
            col2im_add(dcol.data(), c, h, wd, k, gx.data() + n * c * hw);
          }
        }
        if (need_input) g = std::move(gx);
        break;
      }
      case LayerKind::BatchNorm: {
        const std::size_t channels = layer.weight.size();
        const std::size_t batch = g.dim(0);
        const std::size_t spatial = g.rank() == 4 ? g.dim(2) * g.dim(3) : 1;
        const auto count = static_cast<T>(batch * spatial);
        LayerGrad<T>& lg = grads[ii];
        lg.weight = Tensor<T>(layer.weight.shape());
        lg.bias = Tensor<T>(layer.bias.shape());
        Tensor<T> gx(g.shape());
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * channels + c) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
              sum_dy += g[off + s];
              sum_dy_xhat += static_cast<double>(g[off + s]) * cache.saved[off + s];
            }
          }
          lg.weight[c] = static_cast<T>(sum_dy_xhat);
          lg.bias[c] = static_cast<T>(sum_dy);
          const T gamma = layer.weight[c];
          const T istd = cache.inv_std[c];
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * channels + c) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
              if (cache.mode == Mode::Train) {
                gx[off + s] = gamma * istd / count *
                              (count * g[off + s] - static_cast<T>(sum_dy) -
                               cache.saved[off + s] * static_cast<T>(sum_dy_xhat));
              } else {
                gx[off + s] = gamma * istd * g[off + s];
              }
            }
          }
        }
        g = std::move(gx);
        break;
      }
      case LayerKind::ReLU: {
        for (std::size_t j = 0; j < g.size(); ++j) {
          if (!(cache.saved[j] > T{0})) g[j] = T{0};
        }
        break;
      }
      case LayerKind::MaxPool2: {
        Tensor<T> gx(cache.in_shape);
        for (std::size_t j = 0; j < g.size(); ++j) gx[cache.argmax[j]] += g[j];
        g = std::move(gx);
        break;
      }
      case LayerKind::Flatten:
        g = g.reshaped(cache.in_shape);
        break;
    }
  }
  if (grad_input) *grad_input = std::move(g);
  return grads;
}

template <class T>
struct LossResult {
  T loss{};
  Tensor<T> grad;  // d(mean loss)/d(logits)
};

/// Mean softmax cross-entropy, stabilized with log-sum-exp.
template <class T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw Error(ErrorCode::ShapeMismatch, "logits " + shape_string(logits.shape()) + " vs " +
                                              std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  LossResult<T> out{T{0}, Tensor<T>(logits.shape())};
  double total = 0;
  for (std::size_t n = 0; n < batch; ++n) {
    const std::int32_t label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw Error(ErrorCode::InvalidArgument, "label " + std::to_string(label) +
                                                  " out of range [0, " + std::to_string(classes) + ")");
    }
    const T* row = logits.data() + n * classes;
    const T mx = *std::max_element(row, row + classes);
    double z = 0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c] - mx));
    const double lse = static_cast<double>(mx) + std::log(z);
    total += lse - static_cast<double>(row[label]);
    T* grow = out.grad.data() + n * classes;
    for (std::size_t c = 0; c < classes; ++c) {
      double p = std::exp(static_cast<double>(row[c] - mx)) / z;
      if (static_cast<std::int32_t>(c) == label) p -= 1.0;
      grow[c] = static_cast<T>(p / static_cast<double>(batch));
    }
  }
  out.loss = static_cast<T>(total / static_cast<double>(batch));
  return out;
}

template <class T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  const std::size_t classes = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const T* row = logits.data() + n * classes;
    const auto pred = std::max_element(row, row + classes) - row;
    if (pred == labels[n]) ++correct;
  }
  return correct;
}

// ---------------------------------------------------------------------------
// Construction

template <class T>
Layer<T> make_dense(std::string name, std::size_t in, std::size_t out, bool quantized = true) {
  Layer<T> l;
  l.kind = LayerKind::Dense;
  l.name = std::move(name);
  l.weight = Tensor<T>({out, in});
  l.bias = Tensor<T>({out});
  l.quantized = quantized;
  return l;
}

template <class T>
Layer<T> make_conv(std::string name, std::size_t in, std::size_t out, std::size_t k,
                   bool quantized = true) {
  Layer<T> l;
  l.kind = LayerKind::Conv2d;
  l.name = std::move(name);
  l.weight = Tensor<T>({out, in, k, k});
  l.bias = Tensor<T>({out});
  l.quantized = quantized;
  return l;
}

template <class T>
Layer<T> make_batchnorm(std::string name, std::size_t channels) {
  Layer<T> l;
  l.kind = LayerKind::BatchNorm;
  l.name = std::move(name);
  l.weight = Tensor<T>({channels}, T{1});
  l.bias = Tensor<T>({channels});
  l.stats = {Tensor<T>({channels}), Tensor<T>({channels}, T{1})};
  return l;
}

template <class T>
Layer<T> make_simple(LayerKind kind, std::string name) {
  Layer<T> l;
  l.kind = kind;
  l.name = std::move(name);
  return l;
}

/// Flatten followed by Dense/ReLU stacks; the final Dense has no activation.
template <class T>
Model<T> make_mlp(std::string arch, Shape input_shape, std::vector<std::size_t> hidden,
                  std::size_t classes) {
  Model<T> m{std::move(arch), input_shape, classes, {}};
  m.layers.push_back(make_simple<T>(LayerKind::Flatten, "flatten"));
  std::size_t in = shape_size(input_shape);
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    m.layers.push_back(make_dense<T>("fc" + std::to_string(i + 1), in, hidden[i]));
    m.layers.push_back(make_simple<T>(LayerKind::ReLU, "relu" + std::to_string(i + 1)));
    in = hidden[i];
  }
  m.layers.push_back(make_dense<T>("fc" + std::to_string(hidden.size() + 1), in, classes));
  return m;
}

/// (conv3x3 - BatchNorm - ReLU - maxpool2) blocks, then a dense head.
template <class T>
Model<T> make_conv_bn(std::string arch, Shape input_shape, std::vector<std::size_t> channels,
                      std::size_t classes) {
  if (input_shape.size() != 3) {
    throw Error(ErrorCode::InvalidArgument, "convolutional models need (C,H,W) inputs");
  }
  Model<T> m{std::move(arch), input_shape, classes, {}};
  std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const std::string id = std::to_string(i + 1);
    m.layers.push_back(make_conv<T>("conv" + id, c, channels[i], 3));
    m.layers.push_back(make_batchnorm<T>("bn" + id, channels[i]));
    m.layers.push_back(make_simple<T>(LayerKind::ReLU, "relu" + id));
    m.layers.push_back(make_simple<T>(LayerKind::MaxPool2, "pool" + id));
    c = channels[i];
    h /= 2;
    w /= 2;
    if (h == 0 || w == 0) throw Error(ErrorCode::InvalidArgument, "input too small for pooling");
  }
  m.layers.push_back(make_simple<T>(LayerKind::Flatten, "flatten"));
  m.layers.push_back(make_dense<T>("fc", c * h * w, classes));
  return m;
}

/// Known architecture ids: "mlp256" (784-256-128-10 for MNIST-shaped input)
/// and "miniconvbn" (16/32/64-channel conv-BN blocks).
template <class T>
Model<T> make_architecture(const std::string& arch, const Shape& input_shape, std::size_t classes) {
  if (arch == "mlp256") return make_mlp<T>(arch, input_shape, {256, 128}, classes);
  if (arch == "miniconvbn") return make_conv_bn<T>(arch, input_shape, {16, 32, 64}, classes);
  throw Error(ErrorCode::InvalidArgument, "unknown architecture '" + arch + "'");
}

inline std::size_t fan_in(const Shape& weight_shape) {
  std::size_t f = 1;
  for (std::size_t i = 1; i < weight_shape.size(); ++i) f *= weight_shape[i];
  return f;
}

/// He-style uniform bound sqrt(6 / fan_in).
template <class T>
void init_uniform_fan_in(Tensor<T>& w, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in(w.shape())));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : w.storage()) v = static_cast<T>(dist(rng));
}

template <class T>
void init_parameters(Model<T>& model, Rng& rng) {
  for (Layer<T>& layer : model.layers) {
    if (layer.has_weight()) {
      init_uniform_fan_in(layer.weight, rng);
      layer.bias.fill(T{0});
    }
  }
}

}  // namespace dualprec
