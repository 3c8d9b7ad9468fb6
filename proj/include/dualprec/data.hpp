#pragma once

// MNIST (IDX) and CIFAR-10 (binary batch) loaders, per-channel
// standardization and flip/crop augmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dualprec/error.hpp"
#include "dualprec/nn.hpp"
#include "dualprec/tensor.hpp"

namespace dualprec {

namespace fs = std::filesystem;

struct Dataset {
  Tensor<float> images;  // (N, C, H, W)
  std::vector<std::int32_t> labels;
  std::size_t classes = 10;
  std::string split;

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const {
    return Shape(images.shape().begin() + 1, images.shape().end());
  }
  std::size_t sample_size() const { return shape_size(sample_shape()); }
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct Batch {
  Tensor<float> images;
  std::vector<std::int32_t> labels;
};

enum class AugmentPolicy { None, FlipCrop };

inline AugmentPolicy parse_augment_policy(const std::string& text) {
  if (text == "none") return AugmentPolicy::None;
  if (text == "flipcrop") return AugmentPolicy::FlipCrop;
  throw Error(ErrorCode::InvalidArgument, "unknown augmentation policy '" + text + "'");
}

inline const char* to_string(AugmentPolicy p) {
  return p == AugmentPolicy::None ? "none" : "flipcrop";
}

namespace detail {

inline std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<unsigned char> bytes(size);
  if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw Error(ErrorCode::Io, "cannot read " + path.string());
  }
  return bytes;
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

}  // namespace detail

/// Pairs an IDX image file (magic 0x00000803) with an IDX label file (magic
/// 0x00000801). Pixels are scaled to [0, 1]; no standardization is applied.
inline Dataset load_idx(const fs::path& images_path, const fs::path& labels_path,
                        std::string split = "train", std::size_t classes = 10) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (img.size() < 16 || detail::read_be32(img, 0) != 0x00000803u) {
    throw Error(ErrorCode::BadMagic, "wrong IDX image magic in " + images_path.string());
  }
  if (lab.size() < 8 || detail::read_be32(lab, 0) != 0x00000801u) {
    throw Error(ErrorCode::BadMagic, "wrong IDX label magic in " + labels_path.string());
  }
  const std::size_t n = detail::read_be32(img, 4);
  const std::size_t rows = detail::read_be32(img, 8);
  const std::size_t cols = detail::read_be32(img, 12);
  const std::size_t n_labels = detail::read_be32(lab, 4);
  if (n != n_labels) {
    throw Error(ErrorCode::ShapeMismatch, "image count " + std::to_string(n) +
                                              " does not match label count " +
                                              std::to_string(n_labels));
  }
  if (n == 0 || rows == 0 || cols == 0) {
    throw Error(ErrorCode::InvalidArgument, "empty IDX file " + images_path.string());
  }
  if (img.size() != 16 + n * rows * cols) {
    throw Error(ErrorCode::TruncatedStream, "IDX image payload length mismatch in " +
                                                images_path.string());
  }
  if (lab.size() != 8 + n) {
    throw Error(ErrorCode::TruncatedStream, "IDX label payload length mismatch in " +
                                                labels_path.string());
  }
  Dataset ds;
  ds.split = std::move(split);
  ds.classes = classes;
  ds.images = Tensor<float>({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) ds.images[i] = img[16 + i] / 255.0f;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    if (static_cast<std::size_t>(ds.labels[i]) >= classes) {
      throw Error(ErrorCode::InvalidArgument, "label out of range at record " + std::to_string(i));
    }
  }
  return ds;
}

/// One CIFAR-10 binary batch: 3073-byte records, a label byte followed by
/// 3072 channel-major pixels.
inline Dataset load_cifar10_file(const fs::path& path, std::string split = "train") {
  constexpr std::size_t kRecord = 3073, kPixels = 3072;
  const auto bytes = detail::read_file(path);
  if (bytes.empty() || bytes.size() % kRecord != 0) {
    throw Error(ErrorCode::TruncatedStream, "CIFAR-10 file length " + std::to_string(bytes.size()) +
                                                " is not a multiple of 3073: " + path.string());
  }
  const std::size_t n = bytes.size() / kRecord;
  Dataset ds;
  ds.split = std::move(split);
  ds.classes = 10;
  ds.images = Tensor<float>({n, 3, 32, 32});
  ds.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kRecord;
    if (rec[0] >= 10) {
      throw Error(ErrorCode::InvalidArgument, "label out of range at record " + std::to_string(r));
    }
    ds.labels[r] = rec[0];
    for (std::size_t p = 0; p < kPixels; ++p) ds.images[r * kPixels + p] = rec[1 + p] / 255.0f;
  }
  return ds;
}

inline Dataset concatenate(const std::vector<Dataset>& parts, std::string split) {
  if (parts.empty()) throw Error(ErrorCode::InvalidArgument, "nothing to concatenate");
  Shape shape = parts.front().images.shape();
  std::size_t n = 0;
  for (const Dataset& d : parts) n += d.size();
  shape[0] = n;
  std::vector<float> data;
  data.reserve(shape_size(shape));
  Dataset out;
  out.classes = parts.front().classes;
  out.split = std::move(split);
  for (const Dataset& d : parts) {
    data.insert(data.end(), d.images.storage().begin(), d.images.storage().end());
    out.labels.insert(out.labels.end(), d.labels.begin(), d.labels.end());
  }
  out.images = Tensor<float>(shape, std::move(data));
  return out;
}

/// Per-channel mean and population standard deviation.
inline ChannelStats channel_stats(const Dataset& ds) {
  const std::size_t n = ds.images.dim(0), c = ds.images.dim(1);
  const std::size_t spatial = ds.images.size() / (n * c);
  ChannelStats st{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = ds.images.data() + (i * c + ch) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) sum += p[s];
    }
    const double count = static_cast<double>(n * spatial);
    const double mean = sum / count;
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = ds.images.data() + (i * c + ch) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) sq += (p[s] - mean) * (p[s] - mean);
    }
    st.mean[ch] = mean;
    st.stddev[ch] = std::sqrt(sq / count);
    if (st.stddev[ch] == 0.0) st.stddev[ch] = 1.0;
  }
  return st;
}

inline void standardize(Dataset& ds, const ChannelStats& st) {
  const std::size_t n = ds.images.dim(0), c = ds.images.dim(1);
  const std::size_t spatial = ds.images.size() / (n * c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      float* p = ds.images.data() + (i * c + ch) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        p[s] = static_cast<float>((p[s] - st.mean[ch]) / st.stddev[ch]);
      }
    }
  }
}

struct DataSplits {
  Dataset train;
  Dataset test;
  ChannelStats stats;
};

/// Standardizes both splits with statistics of the train split.
inline DataSplits standardize_splits(Dataset train, Dataset test) {
  DataSplits out{std::move(train), std::move(test), {}};
  out.stats = channel_stats(out.train);
  standardize(out.train, out.stats);
  standardize(out.test, out.stats);
  return out;
}

namespace detail {

inline fs::path find_first(const fs::path& dir, std::initializer_list<const char*> subdirs,
                           std::initializer_list<const char*> names) {
  for (const char* sub : subdirs) {
    for (const char* name : names) {
      const fs::path p = dir / sub / name;
      if (fs::exists(p)) return p;
    }
  }
  return {};
}

}  // namespace detail

/// Looks for the four MNIST IDX files in `dir` or `dir/mnist`.
inline DataSplits load_mnist(const fs::path& dir) {
  auto find = [&](const char* a, const char* b) {
    fs::path p = detail::find_first(dir, {"", "mnist"}, {a, b});
    if (p.empty()) throw Error(ErrorCode::Io, std::string("MNIST file ") + a + " not found under " + dir.string());
    return p;
  };
  Dataset train = load_idx(find("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
                           find("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"), "train");
  Dataset test = load_idx(find("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
                          find("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"), "test");
  return standardize_splits(std::move(train), std::move(test));
}

/// Looks for data_batch_{1..5}.bin and test_batch.bin in `dir` or
/// `dir/cifar-10-batches-bin`. At least one train batch must exist.
inline DataSplits load_cifar10(const fs::path& dir) {
  std::vector<Dataset> parts;
  for (int i = 1; i <= 5; ++i) {
    const std::string name = "data_batch_" + std::to_string(i) + ".bin";
    fs::path p = detail::find_first(dir, {"", "cifar-10-batches-bin"}, {name.c_str()});
    if (!p.empty()) parts.push_back(load_cifar10_file(p, "train"));
  }
  if (parts.empty()) throw Error(ErrorCode::Io, "no CIFAR-10 train batches under " + dir.string());
  fs::path test = detail::find_first(dir, {"", "cifar-10-batches-bin"}, {"test_batch.bin"});
  if (test.empty()) throw Error(ErrorCode::Io, "CIFAR-10 test_batch.bin not found under " + dir.string());
  return standardize_splits(concatenate(parts, "train"), load_cifar10_file(test, "test"));
}

inline DataSplits load_dataset(const std::string& id, const fs::path& dir) {
  if (id == "mnist") return load_mnist(dir);
  if (id == "cifar10") return load_cifar10(dir);
  throw Error(ErrorCode::InvalidArgument, "unknown dataset '" + id + "'");
}

/// `--data-dir` wins; otherwise DUALPREC_DATA; otherwise "data".
inline fs::path resolve_data_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("DUALPREC_DATA"); env && *env) return env;
  return "data";
}

/// First `n` samples (all when n is zero or exceeds the size).
inline Dataset take(const Dataset& ds, std::size_t n) {
  if (n == 0 || n >= ds.size()) return ds;
  Shape shape = ds.images.shape();
  shape[0] = n;
  const std::size_t per = ds.sample_size();
  Dataset out;
  out.classes = ds.classes;
  out.split = ds.split;
  out.images = Tensor<float>(shape, std::vector<float>(ds.images.storage().begin(),
                                                       ds.images.storage().begin() +
                                                           static_cast<std::ptrdiff_t>(n * per)));
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

inline std::vector<std::size_t> shuffled_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline Batch gather(const Dataset& ds, std::span<const std::size_t> indices) {
  Shape shape = ds.images.shape();
  shape[0] = indices.size();
  const std::size_t per = ds.sample_size();
  Batch b{Tensor<float>(shape), std::vector<std::int32_t>(indices.size())};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(ds.images.data() + indices[i] * per, per, b.images.data() + i * per);
    b.labels[i] = ds.labels[indices[i]];
  }
  return b;
}

/// Mirrors one (C,H,W) image left-right in place.
inline void flip_horizontal(std::span<float> image, std::size_t c, std::size_t h, std::size_t w) {
  for (std::size_t row = 0; row < c * h; ++row) {
    std::reverse(image.begin() + static_cast<std::ptrdiff_t>(row * w),
                 image.begin() + static_cast<std::ptrdiff_t>((row + 1) * w));
  }
}

/// Zero-pads one (C,H,W) image by `pad` on every side and cuts the HxW window
/// whose top-left corner sits at (dy, dx) of the padded image. (pad, pad) is
/// the identity.
inline void crop_padded(std::span<float> image, std::size_t c, std::size_t h, std::size_t w,
                        std::size_t pad, std::size_t dy, std::size_t dx) {
  std::vector<float> src(image.begin(), image.end());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const auto sy = static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(pad);
        const auto sx = static_cast<std::ptrdiff_t>(x + dx) - static_cast<std::ptrdiff_t>(pad);
        const bool inside = sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx >= 0 &&
                            sx < static_cast<std::ptrdiff_t>(w);
        image[(ch * h + y) * w + x] =
            inside ? src[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)]
                   : 0.0f;
      }
    }
  }
}

inline constexpr std::size_t kCropPad = 4;

/// FlipCrop: independent horizontal flip with probability 0.5, then a 4-pixel
/// zero pad and a uniformly placed crop back to the original size.
inline void augment(Tensor<float>& batch, AugmentPolicy policy, Rng& rng) {
  if (policy == AugmentPolicy::None) return;
  if (batch.rank() != 4) {
    throw Error(ErrorCode::InvalidArgument, "flip/crop augmentation needs (N,C,H,W) images");
  }
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const std::size_t per = c * h * w;
  std::bernoulli_distribution flip(0.5);
  std::uniform_int_distribution<std::size_t> offset(0, 2 * kCropPad);
  for (std::size_t i = 0; i < n; ++i) {
    std::span<float> img(batch.data() + i * per, per);
    if (flip(rng)) flip_horizontal(img, c, h, w);
    const std::size_t dy = offset(rng), dx = offset(rng);
    crop_padded(img, c, h, w, kCropPad, dy, dx);
  }
}

}  // namespace dualprec
