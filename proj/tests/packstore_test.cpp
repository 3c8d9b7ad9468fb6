#include <cstdint>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "dualprec/packstore.hpp"
#include "dualprec/trainer.hpp"
#include "test_util.hpp"

using namespace dualprec;

namespace {

// One quantized dense layer, 2 -> 3, b = 2.
QuantizedModel<float> tiny() {
  QuantizedModel<float> qm;
  qm.spec = QuantSpec(2);
  qm.has_upscale = true;
  qm.net = Model<float>{"t", {2}, 3, {}};
  Layer<float> fc = make_dense<float>("fc", 2, 3);
  fc.weight = Tensor<float>();
  fc.bias = Tensor<float>({3}, {1.0f, 0.0f, -1.0f});
  qm.net.layers.push_back(fc);
  QuantizedLayer<float> q;
  q.low = LevelTensor<float>{{3, 2}, {-2, -1, 0, 1, 1, 0}, QuantSpec(2), 0.5f};
  q.lambda = UpscaleBits{{3, 2}, {1, 0, 1, 1, 0, 0}};
  q.scale_hi = 0.25f;
  qm.quant.push_back(q);
  qm.high_stats.resize(1);
  return qm;
}

const Bytes kTinyLow = {
    'D', 'P', 'W', 'M', 0x01, 0x00, 0x02, 0x00,          // magic, version, bits, rule
    0x01, 0x00, 't',                                      // arch
    0x01, 0x02, 0x00, 0x00, 0x00,                         // input shape (2)
    0x03, 0x00, 0x00, 0x00,                               // classes
    0x01, 0x00, 0x00, 0x00,                               // records
    0x00, 0x01, 0x02, 0x00, 'f', 'c',                     // dense, quantized, "fc"
    0x02, 0x03, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, // shape (3,2)
    0x00, 0x00, 0x00, 0x3F,                               // scale 0.5
    0x1B, 0xE0,                                           // offsets 0 1 2 3 3 2
    0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x80, 0xBF,
};

const Bytes kTinyUpscale = {
    'U', 'P', 'S', 'B', 0x01, 0x00, 0x00, 0x00,  // one quantized layer
    0x06, 0x00, 0x00, 0x00, 0x00, 0x00, 0x80, 0x3E,  // count, scale 0.25
    0xB0,                                        // lambda 1 0 1 1 0 0
    0x00, 0x00, 0x00, 0x00,                      // no BatchNorm
};

Bytes concat(Bytes a, const Bytes& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

QuantizedModel<float> conv_model(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.arch = "miniconvbn";
  Rng rng(seed);
  auto dm = build_dual_model<float>(cfg, {3, 8, 8}, 10, rng);
  std::normal_distribution<float> n(0.0f, 0.3f);
  for (std::size_t i = 0; i < dm.net.layers.size(); ++i) {
    auto& l = dm.net.layers[i];
    for (float& v : l.bias.storage()) v = n(rng);
    if (l.kind == LayerKind::BatchNorm) {
      for (float& v : l.stats.mean.storage()) v = n(rng);
      dm.high_stats[i] = l.stats;
      for (float& v : dm.high_stats[i].mean.storage()) v += 1.0f;
    }
  }
  return freeze(dm);
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST(BitPackTest, TwoBitExample) {
  const std::vector<std::uint32_t> v{0, 1, 2, 3};
  EXPECT_EQ(pack_detail::pack_bits(v, 2), (Bytes{0b00011011}));
  EXPECT_EQ(pack_detail::unpack_bits(Bytes{0b00011011}, 4, 2), v);
}

TEST(BitPackTest, RoundTripAllWidths) {
  Rng rng(1);
  for (int bits = 1; bits <= 8; ++bits) {
    std::uniform_int_distribution<std::uint32_t> u(0, (1u << bits) - 1);
    std::vector<std::uint32_t> v(1 + 37 * bits);
    for (auto& x : v) x = u(rng);
    const Bytes b = pack_detail::pack_bits(v, bits);
    EXPECT_EQ(b.size(), pack_detail::plane_bytes(v.size(), bits));
    EXPECT_EQ(pack_detail::unpack_bits(b, v.size(), bits), v);
  }
}

TEST(PackTest, GoldenBytes) {
  EXPECT_EQ(pack(tiny(), false), kTinyLow);
  EXPECT_EQ(pack(tiny(), true), concat(kTinyLow, kTinyUpscale));
}

TEST(PackTest, UnknownArchitectureIsRejectedOnUnpack) {
  EXPECT_EQ(code_of([] { unpack(concat(kTinyLow, kTinyUpscale)); }), ErrorCode::InvalidArgument);
}

TEST(PackTest, RoundTripMlp) {
  TrainConfig cfg;
  Rng rng(2);
  const auto qm = freeze(build_dual_model<float>(cfg, {1, 6, 6}, 10, rng));
  EXPECT_EQ(unpack(pack(qm, true)), qm);
  auto low = qm;
  low.has_upscale = false;
  for (auto& q : low.quant) {
    if (!q) continue;
    q->lambda = {};
    q->scale_hi = 0;
  }
  low.high_stats.assign(low.high_stats.size(), {});
  EXPECT_EQ(unpack(pack(qm, false)), low);
}

TEST(PackTest, RoundTripConvModel) {
  const auto qm = conv_model(3);
  EXPECT_EQ(unpack(pack(qm, true)), qm);
  const Bytes full = pack(qm, true);
  EXPECT_EQ(pack(unpack(full), true), full);
}

TEST(PackTest, LowStreamIsPrefixOfFullStream) {
  const auto qm = conv_model(4);
  const Bytes low = pack(qm, false), full = pack(qm, true);
  ASSERT_LT(low.size(), full.size());
  EXPECT_TRUE(std::equal(low.begin(), low.end(), full.begin()));
  EXPECT_FALSE(has_upscale_section(low));
  EXPECT_TRUE(has_upscale_section(full));
}

TEST(PackTest, PlaneSizesFollowBitWidth) {
  for (int bits = 2; bits <= 7; ++bits) {
    auto qm = tiny();
    qm.spec = QuantSpec(bits);
    qm.quant[0]->low.spec = QuantSpec(bits);
    const std::size_t plane = (6 * bits + 7) / 8;
    EXPECT_EQ(pack(qm, false).size(), kTinyLow.size() - 2 + plane);
    EXPECT_EQ(pack(qm, true).size(), kTinyLow.size() - 2 + plane + kTinyUpscale.size());
  }
}

TEST(PackTest, IndexOutsideClipRangeIsRejected) {
  auto qm = tiny();
  qm.quant[0]->low.indices[0] = 2;
  EXPECT_EQ(code_of([&] { pack(qm, true); }), ErrorCode::IndexOutOfRange);
}

TEST(UnpackTest, BadMagic) {
  Bytes b = kTinyLow;
  b[0] = 'X';
  EXPECT_EQ(code_of([&] { unpack(b); }), ErrorCode::BadMagic);
  Bytes u = pack(conv_model(1), true);
  u[pack(conv_model(1), false).size()] = 'X';
  EXPECT_EQ(code_of([&] { unpack(u); }), ErrorCode::BadMagic);
}

TEST(UnpackTest, UnsupportedVersion) {
  Bytes b = kTinyLow;
  b[4] = 2;
  EXPECT_EQ(code_of([&] { unpack(b); }), ErrorCode::UnsupportedVersion);
}

TEST(UnpackTest, EveryTruncationIsDetected) {
  const Bytes full = pack(conv_model(5), true);
  const std::size_t low_end = pack(conv_model(5), false).size();
  for (std::size_t n = 4; n < full.size(); ++n) {
    if (n == low_end) continue;
    const std::span<const std::uint8_t> part(full.data(), n);
    ASSERT_EQ(code_of([&] { unpack(part); }), ErrorCode::TruncatedStream) << "length " << n;
  }
}

TEST(UnpackTest, TrailingGarbageIsRejected) {
  Bytes b = concat(concat(kTinyLow, kTinyUpscale), Bytes{0});
  EXPECT_THROW(unpack(b), Error);
}

TEST(SwitchTest, DownThenUpIsByteIdentity) {
  const Bytes full = pack(conv_model(6), true);
  const auto down = switch_precision(full, SwitchDirection::Down);
  ASSERT_TRUE(down.bitplane);
  EXPECT_EQ(down.stream, pack(conv_model(6), false));
  const auto up = switch_precision(down.stream, SwitchDirection::Up,
                                   std::span<const std::uint8_t>(*down.bitplane));
  EXPECT_EQ(up.stream, full);
}

TEST(SwitchTest, DetachedPlaneHeader) {
  const auto down = switch_precision(concat(kTinyLow, kTinyUpscale), SwitchDirection::Down);
  const Bytes& bp = *down.bitplane;
  ASSERT_EQ(bp.size(), 4 + 2 + 8 + kTinyUpscale.size());
  EXPECT_EQ(Bytes(bp.begin(), bp.begin() + 6), (Bytes{'D', 'P', 'B', 'P', 0x01, 0x00}));
  // FNV-1a 64 over the single shared plane {0x1B, 0xE0}
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t c : {0x1B, 0xE0}) h = (h ^ c) * 0x100000001b3ull;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= std::uint64_t{bp[6 + i]} << (8 * i);
  EXPECT_EQ(stored, h);
  EXPECT_EQ(Bytes(bp.begin() + 14, bp.end()), kTinyUpscale);
}

TEST(SwitchTest, ForeignBitplaneIsRejected) {
  const auto a = switch_precision(pack(conv_model(7), true), SwitchDirection::Down);
  const auto b = switch_precision(pack(conv_model(8), true), SwitchDirection::Down);
  EXPECT_EQ(code_of([&] {
              switch_precision(b.stream, SwitchDirection::Up, std::span<const std::uint8_t>(*a.bitplane));
            }),
            ErrorCode::IncompatibleBitplane);
}

TEST(SwitchTest, DirectionErrors) {
  const Bytes low = pack(tiny(), false), full = pack(tiny(), true);
  EXPECT_EQ(code_of([&] { switch_precision(low, SwitchDirection::Down); }),
            ErrorCode::MissingUpscaleSection);
  EXPECT_EQ(code_of([&] { switch_precision(low, SwitchDirection::Up); }), ErrorCode::IncompatibleBitplane);
  const auto down = switch_precision(full, SwitchDirection::Down);
  EXPECT_THROW(switch_precision(full, SwitchDirection::Up, std::span<const std::uint8_t>(*down.bitplane)),
               Error);
  EXPECT_EQ(code_of([] { parse_direction("sideways"); }), ErrorCode::InvalidArgument);
}

TEST(SwitchTest, StrippedModelKeepsLowMode) {
  const auto qm = conv_model(9);
  const auto stripped = unpack(switch_precision(pack(qm, true), SwitchDirection::Down).stream);
  Rng rng(2);
  Tensor<float> x({2, 3, 8, 8});
  std::normal_distribution<float> n;
  for (float& v : x.storage()) v = n(rng);
  EXPECT_EQ(logits(stripped, x, Precision::Low), logits(qm, x, Precision::Low));
}

TEST(FileTest, WriteReadRoundTrip) {
  const auto dir = dualprec::testing::temp_dir("pack");
  const Bytes full = pack(tiny(), true);
  write_bytes(dir / "m.dpw", full);
  EXPECT_EQ(read_bytes(dir / "m.dpw"), full);
  EXPECT_EQ(code_of([&] { read_bytes(dir / "missing.dpw"); }), ErrorCode::Io);
  std::filesystem::remove_all(dir);
}
