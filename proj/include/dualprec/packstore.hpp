#pragma once

// Bit-exact dual-precision model files.
//
// A .dpw stream is a low-precision section optionally followed by an
// up-scaling section. All integers are little-endian, all reals IEEE-754
// binary32.
//
//   low section
//     "DPWM"  u16 version(=1)  u8 bits  u8 scale_rule
//     u16 len + arch id bytes
//     u8 rank + u32 dims (per-sample input shape)   u32 classes
//     u32 record count, then one record per parameter-bearing layer:
//       u8 kind  u8 flags(bit0 = quantized)  u16 len + name  u8 rank + u32 dims
//       quantized Dense/Conv2d:  f32 scale_b, shared plane, f32 bias[out]
//       float Dense/Conv2d:      f32 weight[count], f32 bias[out]
//       BatchNorm:               f32 gamma[C], beta[C], mean[C], var[C]
//   up-scaling section (optional)
//     "UPSB"  u32 quantized layer count
//       per quantized layer: u32 count, f32 scale_{b+1}, bit-plane
//     u32 BatchNorm count
//       per BatchNorm: u32 C, f32 mean[C], var[C]  (high-mode running stats)
//
// The shared plane stores every index offset-binary (I + 2^(b-1)) in b bits,
// row-major, the first element in the most significant bits of the first
// byte; the bit-plane stores one lambda bit per weight the same way. Padding
// bits are zero. A detached .dpb bit-plane file is
//   "DPBP"  u16 version(=1)  u64 FNV-1a of the concatenated shared planes
//   followed by the up-scaling section verbatim.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dualprec/dual.hpp"
#include "dualprec/error.hpp"
#include "dualprec/nn.hpp"
#include "dualprec/quant.hpp"

namespace dualprec {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr char kModelMagic[4] = {'D', 'P', 'W', 'M'};
inline constexpr char kUpscaleMagic[4] = {'U', 'P', 'S', 'B'};
inline constexpr char kBitplaneMagic[4] = {'D', 'P', 'B', 'P'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace pack_detail {

class Writer {
 public:
  explicit Writer(Bytes& out) : out_(out) {}

  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class U>
  void le(U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out_.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(value) >> (8 * i)));
    }
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v); }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  void str(const std::string& s) {
    if (s.size() > 0xFFFF) throw Error(ErrorCode::InvalidArgument, "string too long to pack");
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s.data(), s.size());
  }
  void magic(const char (&m)[4]) { raw(m, 4); }

 private:
  Bytes& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in, std::size_t pos = 0) : in_(in), pos_(pos) {}

  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == in_.size(); }

  std::span<const std::uint8_t> take(std::size_t n) {
    if (remaining() < n) {
      throw Error(ErrorCode::TruncatedStream, "truncated stream at byte " + std::to_string(pos_));
    }
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <class U>
  U le() {
    auto s = take(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t{s[i]} << (8 * i);
    return static_cast<U>(v);
  }
  std::uint8_t u8() { return le<std::uint8_t>(); }
  std::uint16_t u16() { return le<std::uint16_t>(); }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::vector<float> f32s(std::size_t n) {
    std::vector<float> v(n);
    for (float& x : v) x = f32();
    return v;
  }
  std::string str() {
    const std::size_t n = u16();
    auto s = take(n);
    return std::string(s.begin(), s.end());
  }
  bool magic_is(const char (&m)[4]) {
    auto s = take(4);
    return std::memcmp(s.data(), m, 4) == 0;
  }
  bool peek_magic(const char (&m)[4]) const {
    return remaining() >= 4 && std::memcmp(in_.data() + pos_, m, 4) == 0;
  }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_;
};

/// Packs unsigned `bits`-wide values MSB-first.
inline Bytes pack_bits(std::span<const std::uint32_t> values, int bits) {
  Bytes out((values.size() * static_cast<std::size_t>(bits) + 7) / 8, 0);
  std::size_t bitpos = 0;
  for (std::uint32_t v : values) {
    for (int b = bits - 1; b >= 0; --b, ++bitpos) {
      if ((v >> b) & 1u) out[bitpos / 8] |= static_cast<std::uint8_t>(0x80u >> (bitpos % 8));
    }
  }
  return out;
}

inline std::vector<std::uint32_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count,
                                              int bits) {
  std::vector<std::uint32_t> out(count, 0);
  std::size_t bitpos = 0;
  for (std::uint32_t& v : out) {
    for (int b = 0; b < bits; ++b, ++bitpos) {
      v = (v << 1) | ((bytes[bitpos / 8] >> (7 - bitpos % 8)) & 1u);
    }
  }
  return out;
}

inline std::size_t plane_bytes(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

inline void write_shape(Writer& w, const Shape& s) {
  w.u8(static_cast<std::uint8_t>(s.size()));
  for (std::size_t d : s) w.u32(static_cast<std::uint32_t>(d));
}

inline Shape read_shape(Reader& r) {
  const std::size_t rank = r.u8();
  Shape s(rank);
  for (std::size_t& d : s) {
    d = r.u32();
    if (d == 0) throw Error(ErrorCode::InvalidArgument, "zero dimension in packed shape");
  }
  return s;
}

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Byte layout of a stream, found without decoding any index.
struct Layout {
  int bits = 0;
  std::size_t low_end = 0;
  std::vector<std::size_t> quantized_counts;
  std::vector<std::size_t> bn_channels;
  std::uint64_t shared_checksum = 0xcbf29ce484222325ull;
};

inline Layout scan_low_section(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || !r.magic_is(kModelMagic)) {
    throw Error(ErrorCode::BadMagic, "bad magic");
  }
  const std::uint16_t version = r.u16();
  if (version != kFormatVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "unsupported format version " + std::to_string(version));
  }
  Layout lay;
  lay.bits = r.u8();
  if (lay.bits < QuantSpec::kMinBits || lay.bits > QuantSpec::kMaxBits) {
    throw Error(ErrorCode::InvalidArgument, "unsupported bit-width " + std::to_string(lay.bits));
  }
  (void)r.u8();
  (void)r.str();
  (void)read_shape(r);
  (void)r.u32();
  const std::uint32_t records = r.u32();
  for (std::uint32_t k = 0; k < records; ++k) {
    const auto kind = static_cast<LayerKind>(r.u8());
    const bool quantized = r.u8() & 1u;
    (void)r.str();
    const Shape shape = read_shape(r);
    const std::size_t count = shape_size(shape);
    if (kind == LayerKind::Dense || kind == LayerKind::Conv2d) {
      if (quantized) {
        (void)r.f32();
        lay.shared_checksum = fnv1a(r.take(plane_bytes(count, lay.bits)), lay.shared_checksum);
        lay.quantized_counts.push_back(count);
      } else {
        r.take(4 * count);
      }
      r.take(4 * shape.at(0));
    } else if (kind == LayerKind::BatchNorm) {
      r.take(4 * 4 * count);
      lay.bn_channels.push_back(count);
    } else {
      throw Error(ErrorCode::UnsupportedLayer, "unsupported layer kind in stream");
    }
  }
  lay.low_end = r.pos();
  return lay;
}

/// Validates an up-scaling section against a layout; returns its length.
inline std::size_t scan_upscale_section(std::span<const std::uint8_t> bytes, std::size_t start,
                                        const Layout& lay) {
  Reader r(bytes, start);
  if (!r.magic_is(kUpscaleMagic)) throw Error(ErrorCode::BadMagic, "bad up-scale section magic");
  if (lay.bits + 1 > QuantSpec::kMaxBits) {
    throw Error(ErrorCode::InvalidArgument, "up-scaling a " + std::to_string(lay.bits) + "-bit model");
  }
  const std::uint32_t q = r.u32();
  if (q != lay.quantized_counts.size()) {
    throw Error(ErrorCode::IncompatibleBitplane, "bit-plane layer count does not match the model");
  }
  for (std::size_t count : lay.quantized_counts) {
    if (r.u32() != count) {
      throw Error(ErrorCode::IncompatibleBitplane, "bit-plane shape does not match the model");
    }
    (void)r.f32();
    r.take(plane_bytes(count, 1));
  }
  const std::uint32_t bn = r.u32();
  if (bn != lay.bn_channels.size()) {
    throw Error(ErrorCode::IncompatibleBitplane, "bit-plane BatchNorm count does not match the model");
  }
  for (std::size_t c : lay.bn_channels) {
    if (r.u32() != c) {
      throw Error(ErrorCode::IncompatibleBitplane, "bit-plane BatchNorm width does not match the model");
    }
    r.take(4 * 2 * c);
  }
  return r.pos() - start;
}

}  // namespace pack_detail

/// Serializes a frozen model. include_upscale=false omits the up-scaling
/// section, which makes the result a byte prefix of the full stream.
inline Bytes pack(const QuantizedModel<float>& qm, bool include_upscale) {
  using namespace pack_detail;
  if (include_upscale && !qm.has_upscale) {
    throw Error(ErrorCode::MissingUpscaleSection, "model carries no up-scaling bits to pack");
  }
  const int bits = qm.spec.bits();
  const std::int32_t offset = std::int32_t{1} << (bits - 1);
  Bytes out;
  Writer w(out);
  w.magic(kModelMagic);
  w.u16(kFormatVersion);
  w.u8(static_cast<std::uint8_t>(bits));
  w.u8(static_cast<std::uint8_t>(qm.spec.scale_rule()));
  w.str(qm.net.arch);
  write_shape(w, qm.net.input_shape);
  w.u32(static_cast<std::uint32_t>(qm.net.classes));
  std::uint32_t records = 0;
  for (const auto& l : qm.net.layers) records += l.has_params() ? 1 : 0;
  w.u32(records);
  for (std::size_t i = 0; i < qm.net.layers.size(); ++i) {
    const Layer<float>& layer = qm.net.layers[i];
    if (!layer.has_params()) continue;
    const bool quantized = qm.quant[i].has_value();
    w.u8(static_cast<std::uint8_t>(layer.kind));
    w.u8(quantized ? 1 : 0);
    w.str(layer.name);
    if (layer.kind == LayerKind::BatchNorm) {
      write_shape(w, layer.weight.shape());
      w.f32s(layer.weight.values());
      w.f32s(layer.bias.values());
      w.f32s(layer.stats.mean.values());
      w.f32s(layer.stats.var.values());
    } else if (quantized) {
      const LevelTensor<float>& low = qm.quant[i]->low;
      if (low.spec.bits() != bits) {
        throw Error(ErrorCode::InvalidArgument, "layer bit-width differs from the model's");
      }
      low.validate();
      write_shape(w, low.shape);
      w.f32(low.scale);
      std::vector<std::uint32_t> stored(low.size());
      for (std::size_t j = 0; j < low.size(); ++j) {
        stored[j] = static_cast<std::uint32_t>(low.indices[j] + offset);
      }
      const Bytes plane = pack_bits(stored, bits);
      w.raw(plane.data(), plane.size());
      w.f32s(layer.bias.values());
    } else if (layer.has_weight()) {
      write_shape(w, layer.weight.shape());
      w.f32s(layer.weight.values());
      w.f32s(layer.bias.values());
    } else {
      throw Error(ErrorCode::UnsupportedLayer, std::string("cannot pack layer kind ") + to_string(layer.kind));
    }
  }
  if (!include_upscale) return out;

  w.magic(kUpscaleMagic);
  std::uint32_t q = 0;
  for (const auto& ql : qm.quant) q += ql ? 1 : 0;
  w.u32(q);
  for (const auto& ql : qm.quant) {
    if (!ql) continue;
    if (ql->lambda.size() != ql->low.size()) {
      throw Error(ErrorCode::ShapeMismatch, "up-scaling bits do not match the shared indices");
    }
    for (std::uint8_t b : ql->lambda.bits) {
      if (b > 1) throw Error(ErrorCode::IndexOutOfRange, "up-scaling bit outside {0, 1}");
    }
    w.u32(static_cast<std::uint32_t>(ql->low.size()));
    w.f32(ql->scale_hi);
    std::vector<std::uint32_t> bitsv(ql->lambda.bits.begin(), ql->lambda.bits.end());
    const Bytes plane = pack_bits(bitsv, 1);
    w.raw(plane.data(), plane.size());
  }
  std::uint32_t bn = 0;
  for (const auto& l : qm.net.layers) bn += l.kind == LayerKind::BatchNorm ? 1 : 0;
  w.u32(bn);
  for (std::size_t i = 0; i < qm.net.layers.size(); ++i) {
    if (qm.net.layers[i].kind != LayerKind::BatchNorm) continue;
    w.u32(static_cast<std::uint32_t>(qm.high_stats[i].mean.size()));
    w.f32s(qm.high_stats[i].mean.values());
    w.f32s(qm.high_stats[i].var.values());
  }
  return out;
}

/// Rebuilds a frozen model. The result serves both precisions when the
/// up-scaling section is present, the low precision otherwise.
inline QuantizedModel<float> unpack(std::span<const std::uint8_t> bytes) {
  using namespace pack_detail;
  const Layout lay = scan_low_section(bytes);  // rejects bad magic/version/truncation up front
  Reader r(bytes);
  (void)r.take(4);
  (void)r.u16();
  const int bits = r.u8();
  const std::uint8_t rule = r.u8();
  if (rule > 1) throw Error(ErrorCode::InvalidArgument, "unknown scale rule tag " + std::to_string(rule));
  const std::string arch = r.str();
  const Shape input_shape = read_shape(r);
  const std::size_t classes = r.u32();

  QuantizedModel<float> qm;
  qm.spec = QuantSpec(bits, static_cast<ScaleRule>(rule));
  qm.net = make_architecture<float>(arch, input_shape, classes);
  qm.quant.resize(qm.net.layers.size());
  qm.high_stats.resize(qm.net.layers.size());

  const std::uint32_t records = r.u32();
  std::size_t li = 0;
  const std::int32_t offset = std::int32_t{1} << (bits - 1);
  for (std::uint32_t k = 0; k < records; ++k) {
    while (li < qm.net.layers.size() && !qm.net.layers[li].has_params()) ++li;
    if (li == qm.net.layers.size()) {
      throw Error(ErrorCode::ShapeMismatch, "stream has more layers than architecture " + arch);
    }
    Layer<float>& layer = qm.net.layers[li];
    const auto kind = static_cast<LayerKind>(r.u8());
    const bool quantized = r.u8() & 1u;
    layer.name = r.str();
    const Shape shape = read_shape(r);
    if (kind != layer.kind) {
      throw Error(ErrorCode::ShapeMismatch, "layer " + layer.name + " kind differs from architecture");
    }
    if (kind == LayerKind::BatchNorm) {
      if (shape != layer.weight.shape()) {
        throw Error(ErrorCode::ShapeMismatch, "layer " + layer.name + " shape differs from architecture");
      }
      const std::size_t c = shape[0];
      layer.weight = Tensor<float>(shape, r.f32s(c));
      layer.bias = Tensor<float>(shape, r.f32s(c));
      layer.stats.mean = Tensor<float>(shape, r.f32s(c));
      layer.stats.var = Tensor<float>(shape, r.f32s(c));
    } else {
      if (shape != layer.weight.shape()) {
        throw Error(ErrorCode::ShapeMismatch, "layer " + layer.name + " shape differs from architecture");
      }
      const std::size_t count = shape_size(shape);
      layer.quantized = quantized;
      if (quantized) {
        QuantizedLayer<float> q;
        q.low.shape = shape;
        q.low.spec = qm.spec;
        q.low.scale = r.f32();
        const auto stored = unpack_bits(r.take(plane_bytes(count, bits)), count, bits);
        q.low.indices.resize(count);
        for (std::size_t j = 0; j < count; ++j) {
          q.low.indices[j] = static_cast<std::int32_t>(stored[j]) - offset;
        }
        q.low.validate();
        qm.quant[li] = std::move(q);
        layer.weight = Tensor<float>();
      } else {
        layer.weight = Tensor<float>(shape, r.f32s(count));
      }
      layer.bias = Tensor<float>({shape[0]}, r.f32s(shape[0]));
    }
    ++li;
  }
  for (; li < qm.net.layers.size(); ++li) {
    if (qm.net.layers[li].has_params()) {
      throw Error(ErrorCode::ShapeMismatch, "stream has fewer layers than architecture " + arch);
    }
  }

  if (r.at_end()) return qm;

  (void)scan_upscale_section(bytes, lay.low_end, lay);
  (void)r.take(4);
  const std::uint32_t q = r.u32();
  (void)q;
  for (auto& ql : qm.quant) {
    if (!ql) continue;
    const std::size_t count = r.u32();
    ql->scale_hi = r.f32();
    if (!std::isfinite(ql->scale_hi) || !(ql->scale_hi > 0.0f)) {
      throw Error(ErrorCode::InvalidArgument, "invalid up-scaled scale");
    }
    const auto plane = unpack_bits(r.take(plane_bytes(count, 1)), count, 1);
    ql->lambda = UpscaleBits{ql->low.shape, std::vector<std::uint8_t>(plane.begin(), plane.end())};
  }
  (void)r.u32();
  for (std::size_t i = 0; i < qm.net.layers.size(); ++i) {
    if (qm.net.layers[i].kind != LayerKind::BatchNorm) continue;
    const std::size_t c = r.u32();
    qm.high_stats[i].mean = Tensor<float>({c}, r.f32s(c));
    qm.high_stats[i].var = Tensor<float>({c}, r.f32s(c));
  }
  if (!r.at_end()) {
    throw Error(ErrorCode::InvalidArgument, "unexpected bytes after the up-scaling section");
  }
  qm.has_upscale = true;
  return qm;
}

inline bool has_upscale_section(std::span<const std::uint8_t> bytes) {
  return pack_detail::scan_low_section(bytes).low_end < bytes.size();
}

enum class SwitchDirection { Up, Down };

inline SwitchDirection parse_direction(const std::string& text) {
  if (text == "up") return SwitchDirection::Up;
  if (text == "down") return SwitchDirection::Down;
  throw Error(ErrorCode::InvalidArgument, "direction must be 'up' or 'down', got '" + text + "'");
}

struct SwitchResult {
  Bytes stream;
  std::optional<Bytes> bitplane;  // set by Down
};

/// Down strips the up-scaling section and returns it as a detached bit-plane;
/// Up re-attaches a detached bit-plane after checking it belongs to this
/// model. Only bytes move; no index is decoded or recomputed.
inline SwitchResult switch_precision(std::span<const std::uint8_t> bytes, SwitchDirection direction,
                                     std::optional<std::span<const std::uint8_t>> bitplane = {}) {
  using namespace pack_detail;
  const Layout lay = scan_low_section(bytes);
  SwitchResult out;
  if (direction == SwitchDirection::Down) {
    if (lay.low_end == bytes.size()) {
      throw Error(ErrorCode::MissingUpscaleSection, "stream has no up-scaling section to strip");
    }
    const std::size_t len = scan_upscale_section(bytes, lay.low_end, lay);
    if (lay.low_end + len != bytes.size()) {
      throw Error(ErrorCode::InvalidArgument, "unexpected bytes after the up-scaling section");
    }
    out.stream.assign(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(lay.low_end));
    Bytes plane;
    Writer w(plane);
    w.magic(kBitplaneMagic);
    w.u16(kFormatVersion);
    w.u64(lay.shared_checksum);
    w.raw(bytes.data() + lay.low_end, len);
    out.bitplane = std::move(plane);
    return out;
  }
  if (lay.low_end != bytes.size()) {
    throw Error(ErrorCode::InvalidArgument, "stream already carries an up-scaling section");
  }
  if (!bitplane) throw Error(ErrorCode::IncompatibleBitplane, "up-scaling needs a bit-plane");
  const std::span<const std::uint8_t> bp = *bitplane;
  Reader r(bp);
  if (bp.size() < 4 || !r.magic_is(kBitplaneMagic)) throw Error(ErrorCode::BadMagic, "bad bit-plane magic");
  const std::uint16_t version = r.u16();
  if (version != kFormatVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "unsupported bit-plane version " + std::to_string(version));
  }
  if (r.u64() != lay.shared_checksum) {
    throw Error(ErrorCode::IncompatibleBitplane, "bit-plane checksum does not match the model");
  }
  const std::size_t start = r.pos();
  const std::size_t len = scan_upscale_section(bp, start, lay);
  if (start + len != bp.size()) {
    throw Error(ErrorCode::InvalidArgument, "unexpected bytes after the bit-plane");
  }
  out.stream.assign(bytes.begin(), bytes.end());
  out.stream.insert(out.stream.end(), bp.begin() + static_cast<std::ptrdiff_t>(start), bp.end());
  return out;
}

inline Bytes read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

}  // namespace dualprec
