#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "dualprec/quant.hpp"
#include "test_util.hpp"

using namespace dualprec;
using dualprec::testing::brute_force_nearest_level;
using dualprec::testing::ulp_distance;

namespace {

Tensor<double> vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>({n}, std::move(v));
}

LevelTensor<double> levels(std::vector<std::int32_t> idx, int bits, double scale = 1.0,
                           ScaleRule rule = ScaleRule::PaperEq2) {
  const std::size_t n = idx.size();
  return LevelTensor<double>{{n}, std::move(idx), QuantSpec(bits, rule), scale};
}

UpscaleBits bits_of(std::vector<std::uint8_t> b) {
  const std::size_t n = b.size();
  return UpscaleBits{{n}, std::move(b)};
}

}  // namespace

TEST(QuantSpecTest, ClipBoundsFollowBitWidth) {
  for (int b = 2; b <= 8; ++b) {
    const QuantSpec spec(b);
    EXPECT_EQ(spec.lower_clip(), -(1 << (b - 1)));
    EXPECT_EQ(spec.upper_clip(), (1 << (b - 1)) - 1);
  }
  EXPECT_THROW(QuantSpec(1), Error);
  EXPECT_THROW(QuantSpec(9), Error);
}

TEST(ComputeScaleTest, MaxAbsOverUpperClip) {
  const auto w = vec({0.6, -1.4, 0.7});
  EXPECT_DOUBLE_EQ(compute_scale(w, QuantSpec(2)), 1.4);
  EXPECT_NEAR(compute_scale(w, QuantSpec(3)), 0.466667, 1e-6);
  EXPECT_DOUBLE_EQ(compute_scale(w, QuantSpec(3)), 1.4 / 3.0);
}

TEST(ComputeScaleTest, AllZeroFallsBackToOne) {
  EXPECT_EQ(compute_scale(vec({0, 0, 0}), QuantSpec(4)), 1.0);
  const auto lv = quantize(vec({0, 0, 0}), QuantSpec(4));
  EXPECT_EQ(lv.indices, (std::vector<std::int32_t>{0, 0, 0}));
}

TEST(ComputeScaleTest, EmptyTensorIsAnError) {
  try {
    compute_scale(std::span<const double>(), QuantSpec(2));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty weight tensor");
  }
}

TEST(QuantizeIndicesTest, Examples) {
  EXPECT_EQ(quantize_indices(vec({0}), 0.37, QuantSpec(2)).indices, (std::vector<std::int32_t>{0}));
  EXPECT_EQ(quantize_indices(vec({1.4, -1.4, 0.6}), 1.4 / 3, QuantSpec(3)).indices,
            (std::vector<std::int32_t>{3, -3, 1}));
  EXPECT_EQ(quantize_indices(vec({10.0}), 1.0, QuantSpec(2)).indices, (std::vector<std::int32_t>{1}));
}

TEST(QuantizeIndicesTest, RoundsHalfAwayFromZero) {
  const auto lv = quantize_indices(vec({0.5, -0.5, 1.5, -1.5, 2.5}), 1.0, QuantSpec(4));
  EXPECT_EQ(lv.indices, (std::vector<std::int32_t>{1, -1, 2, -2, 3}));
}

TEST(QuantizeIndicesTest, RejectsNonPositiveScale) {
  for (double s : {0.0, -1.0, std::numeric_limits<double>::quiet_NaN()}) {
    try {
      quantize_indices(vec({1.0}), s, QuantSpec(3));
      FAIL() << "expected an error for scale " << s;
    } catch (const Error& e) {
      EXPECT_STREQ(e.what(), "invalid scale");
    }
  }
}

TEST(DequantizeTest, Examples) {
  EXPECT_EQ(dequantize(levels({0, 0}, 3, 0.5)).to_vector(), (std::vector<double>{0, 0}));
  const auto w = dequantize(levels({3, -4}, 3, 0.2));
  EXPECT_DOUBLE_EQ(w[0], 0.6000000000000001);  // 3 * 0.2 in binary64
  EXPECT_NEAR(w[0], 0.6, 1e-15);
  EXPECT_NEAR(w[1], -0.8, 1e-15);
}

TEST(DequantizeTest, RoundTripWithinHalfStep) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int b = 2 + trial % 7;
    std::vector<double> v(1 + trial % 64);
    for (double& x : v) x = normal(rng);
    const auto w = vec(v);
    const QuantSpec spec(b);
    const double s = compute_scale(w, spec);
    const auto back = dequantize(quantize_indices(w, s, spec));
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_LE(std::abs(back[i] - v[i]), s / 2 * (1 + 1e-12));
    }
  }
}

TEST(UpscaleScaleTest, DefaultRule) {
  // (2^2 - 1) * 0.7 / (2^3 - 1) = 0.3
  EXPECT_LE(ulp_distance(upscale_scale(0.7, 2, ScaleRule::PaperEq2), 0.3), 1u);
  EXPECT_LE(ulp_distance(upscale_scale(1.0, 4, ScaleRule::PaperEq2), 15.0 / 31.0), 1u);
  EXPECT_NEAR(upscale_scale(1.0, 4, ScaleRule::PaperEq2), 0.48387, 1e-5);
}

TEST(UpscaleScaleTest, RangeExactRule) {
  EXPECT_EQ(upscale_scale(0.7, 2, ScaleRule::RangeExact), 0.7 / 3.0);
  EXPECT_NEAR(upscale_scale(0.7, 2, ScaleRule::RangeExact), 0.23333, 1e-5);
}

TEST(UpscaleScaleTest, RejectsNonPositiveScale) {
  EXPECT_THROW(upscale_scale(0.0, 2, ScaleRule::PaperEq2), Error);
  EXPECT_THROW(upscale_scale(-1.0, 3, ScaleRule::RangeExact), Error);
}

// When the exact up-scaled step is representable the largest positive value
// must survive bit for bit.
TEST(UpscaleScaleTest, RangeExactPreservesLargestPositiveValue) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::int64_t> mant(1, std::int64_t{1} << 40);
  std::uniform_int_distribution<int> expo(-30, 10);
  for (int i = 0; i < 5000; ++i) {
    const int b = 2 + i % 6;
    const double p_lo = QuantSpec(b).upper_clip();
    const double p_hi = QuantSpec(b + 1).upper_clip();
    const double q = std::ldexp(static_cast<double>(mant(rng)), expo(rng) - 40);
    const double s = p_hi * q;
    const double s_hi = upscale_scale(s, b, ScaleRule::RangeExact);
    ASSERT_EQ(s_hi, p_lo * q) << "b=" << b << " s=" << s;
    ASSERT_EQ(p_hi * s_hi, p_lo * s) << "b=" << b << " s=" << s;
  }
}

// Arbitrary scales: one rounding only, checked against binary128.
TEST(UpscaleScaleTest, ScalesAreCorrectlyRounded) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(1e-6, 100.0);
  for (int i = 0; i < 20000; ++i) {
    const int b = 2 + i % 6;
    const double s = u(rng);
    const __float128 lo = (1 << (b - 1)) - 1, mid = (1 << b) - 1, hi = (1 << (b + 1)) - 1;
    ASSERT_EQ(upscale_scale(s, b, ScaleRule::RangeExact), static_cast<double>(lo * s / mid)) << s;
    // and the range itself is never more than one ulp off
    ASSERT_LE(ulp_distance(static_cast<double>(lo) * s,
                           static_cast<double>(mid) * upscale_scale(s, b, ScaleRule::RangeExact)),
              1u)
        << s;
    ASSERT_EQ(upscale_scale(s, b, ScaleRule::PaperEq2), static_cast<double>(mid * s / hi)) << s;
    ASSERT_EQ(downscale_scale(s, b, ScaleRule::PaperEq2), static_cast<double>(hi * s / mid)) << s;
    const float sf = static_cast<float>(s);
    ASSERT_EQ(upscale_scale(sf, b, ScaleRule::PaperEq2), static_cast<float>(mid * sf / hi)) << sf;
  }
}

TEST(UpscaleIndicesTest, Examples) {
  const auto hi = upscale_indices(levels({-2, -1, 0, 1}, 2), bits_of({1, 0, 1, 0}));
  EXPECT_EQ(hi.indices, (std::vector<std::int32_t>{-3, -2, 1, 2}));
  EXPECT_EQ(hi.spec.bits(), 3);
  const auto doubled = upscale_indices(levels({-2, -1, 0, 1}, 2), bits_of({0, 0, 0, 0}));
  EXPECT_EQ(doubled.indices, (std::vector<std::int32_t>{-4, -2, 0, 2}));
  const auto top = upscale_indices(levels({1}, 2), bits_of({1}));
  EXPECT_EQ(top.indices, (std::vector<std::int32_t>{3}));
  EXPECT_EQ(top.indices[0], QuantSpec(3).upper_clip());
}

TEST(UpscaleIndicesTest, ScaleFollowsRule) {
  const auto hi = upscale_indices(levels({0}, 2, 0.7), bits_of({0}));
  EXPECT_LE(ulp_distance(hi.scale, 0.3), 1u);
}

TEST(UpscaleIndicesTest, ShapeMismatchIsAnError) {
  EXPECT_THROW(upscale_indices(levels({0, 1}, 2), bits_of({1})), Error);
}

TEST(TruncateIndicesTest, Examples) {
  auto [lo, lambda] = truncate_indices(levels({-3, -2, 1, 2}, 3));
  EXPECT_EQ(lo.indices, (std::vector<std::int32_t>{-2, -1, 0, 1}));
  EXPECT_EQ(lambda.bits, (std::vector<std::uint8_t>{1, 0, 1, 0}));
  EXPECT_EQ(lo.spec.bits(), 2);

  auto [z, zl] = truncate_indices(levels({0}, 3));
  EXPECT_EQ(z.indices[0], 0);
  EXPECT_EQ(zl.bits[0], 0);

  auto [m, ml] = truncate_indices(levels({-1}, 3));
  EXPECT_EQ(m.indices[0], -1);
  EXPECT_EQ(ml.bits[0], 1);
}

TEST(TruncateIndicesTest, RecoversLowScale) {
  const auto hi = upscale_indices(levels({1, -1}, 3, 0.25), bits_of({0, 1}));
  const auto [lo, lambda] = truncate_indices(hi);
  EXPECT_NEAR(lo.scale, 0.25, 1e-15);
}

TEST(TruncateIndicesTest, NeedsAtLeastThreeBits) {
  EXPECT_THROW(truncate_indices(levels({0, 1}, 2)), Error);
}

TEST(SteTest, Examples) {
  EXPECT_EQ(ste_weight_gradient(vec({1, 1}), vec({0.1, 0.2}), 1.0, QuantSpec(3)).to_vector(),
            (std::vector<double>{1, 1}));
  EXPECT_EQ(ste_weight_gradient(vec({1}), vec({100}), 1.0, QuantSpec(2)).to_vector(),
            (std::vector<double>{0}));
  EXPECT_EQ(ste_weight_gradient(vec({2, -3}), vec({-0.5, 50}), 1.0, QuantSpec(2)).to_vector(),
            (std::vector<double>{2, 0}));
}

// Every (I, lambda) pair for b in {2,3,4}, in both directions.
TEST(BitSharingTest, ExhaustiveSmallWidths) {
  for (int b = 2; b <= 4; ++b) {
    const QuantSpec spec(b);
    std::vector<std::int32_t> idx;
    std::vector<std::uint8_t> lam;
    for (std::int32_t i = spec.lower_clip(); i <= spec.upper_clip(); ++i) {
      for (std::uint8_t l : {0, 1}) {
        idx.push_back(i);
        lam.push_back(l);
      }
    }
    const auto lo = levels(idx, b, 0.5);
    const auto hi = upscale_indices(lo, bits_of(lam));
    hi.validate();
    const auto [lo2, lam2] = truncate_indices(hi);
    EXPECT_EQ(lo2.indices, lo.indices);
    EXPECT_EQ(lam2.bits, lam);

    // Every (b+1)-bit index splits and re-joins to itself.
    std::vector<std::int32_t> all;
    for (std::int32_t v = spec.widened().lower_clip(); v <= spec.widened().upper_clip(); ++v) all.push_back(v);
    const auto full = levels(all, b + 1);
    const auto [l3, b3] = truncate_indices(full);
    l3.validate();
    EXPECT_EQ(upscale_indices(l3, b3).indices, all);
  }
}

TEST(BitSharingTest, RandomTensorsUpToSevenBits) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 2000; ++trial) {
    const int b = 2 + trial % 6;
    const QuantSpec spec(b);
    std::uniform_int_distribution<std::int32_t> idx(spec.lower_clip(), spec.upper_clip());
    std::bernoulli_distribution coin(0.5);
    const std::size_t n = 1 + trial % 97;
    std::vector<std::int32_t> i(n);
    std::vector<std::uint8_t> l(n);
    for (std::size_t k = 0; k < n; ++k) {
      i[k] = idx(rng);
      l[k] = coin(rng);
    }
    const auto hi = upscale_indices(levels(i, b), bits_of(l));
    for (std::int32_t v : hi.indices) {
      ASSERT_GE(v, -(1 << b));
      ASSERT_LE(v, (1 << b) - 1);
    }
    const auto [lo, lam] = truncate_indices(hi);
    ASSERT_EQ(lo.indices, i);
    ASSERT_EQ(lam.bits, l);
  }
}

TEST(QuantizerOracleTest, MatchesBruteForceNearestLevel) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const int b = 2 + trial % 7;
    const QuantSpec spec(b);
    std::vector<double> v(1 + trial % 64);
    for (double& x : v) x = normal(rng);
    const auto w = vec(v);
    const double s = compute_scale(w, spec);
    const auto lv = quantize_indices(w, s, spec);
    for (std::size_t k = 0; k < v.size(); ++k) {
      ASSERT_EQ(lv.indices[k], brute_force_nearest_level(v[k], s, spec.lower_clip(), spec.upper_clip()));
    }
  }
}

TEST(QuantizerOracleTest, MonotoneInEachElement) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int b = 2; b <= 8; ++b) {
    const QuantSpec spec(b);
    std::vector<double> v(500);
    for (double& x : v) x = u(rng);
    std::sort(v.begin(), v.end());
    const auto lv = quantize_indices(vec(v), 0.37, spec);
    for (std::size_t k = 1; k < v.size(); ++k) EXPECT_LE(lv.indices[k - 1], lv.indices[k]);
  }
}
