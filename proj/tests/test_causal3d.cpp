#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nimbus/causal3d.hpp"
#include "oracles.hpp"

using namespace nimbus;
using ad::Var;
using V = Var<double>;

namespace {

struct Fixture {
  nn::ParamStore<double> store;
  causal::CausalStack<double> stack;
  Fixture(std::uint64_t seed, bool bias, std::size_t channels = 2) {
    std::mt19937_64 rng(seed);
    stack = causal::make_stack(store, "enc", causal::default_layers(channels, 3, 2), rng, bias);
    if (bias)
      for (auto& b : stack.biases)
        for (auto& v : b.mutable_value().values()) v = std::normal_distribution<double>(0.0, 0.1)(rng);
  }
};

Tensor<double> window(std::size_t k, std::mt19937_64& rng, std::size_t channels = 2) {
  return oracle::random_tensor({1, channels, k + 1, 8, 12}, rng);
}

}  // namespace

TEST(PadAndMask, Layout) {
  std::mt19937_64 rng(0);
  const auto x = window(4, rng);
  const auto masked = causal::pad_and_mask(V::constant(x), true).value();
  ASSERT_EQ(masked.dim(2), 8u);
  const auto plain = causal::pad_and_mask(V::constant(x), false).value();
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 12; ++j) {
        for (std::size_t t : {0u, 1u, 2u, 7u}) EXPECT_EQ(masked.at(0, c, t, i, j), 0.0);
        EXPECT_EQ(masked.at(0, c, 3, i, j), x.at(0, c, 0, i, j));
        EXPECT_EQ(plain.at(0, c, 7, i, j), x.at(0, c, 4, i, j));
      }
  EXPECT_EQ(causal::pad_and_mask(V::constant(window(2, rng)), true).dim(2), 6u);
  EXPECT_THROW(causal::pad_and_mask(V::constant(oracle::random_tensor({1, 2, 4, 8, 12}, rng)), true), DomainError);
}

TEST(CausalStack, RejectsBadLayouts) {
  nn::ParamStore<double> store;
  std::mt19937_64 rng(1);
  auto layers = causal::default_layers(2, 3, 2);
  layers[1].stride_t = 1;
  EXPECT_THROW(causal::make_stack(store, "a", layers, rng), DomainError);
  layers = causal::default_layers(2, 3, 2);
  layers[2].stride_t = 2;
  layers[2].kt = 2;
  EXPECT_THROW(causal::make_stack(store, "b", layers, rng), DomainError);
}

TEST(EncodeFull, TemporalLengthLaw) {
  Fixture f(2, true);
  std::mt19937_64 rng(3);
  for (std::size_t k : {2u, 4u, 6u}) {
    const auto z = causal::encode_full(f.stack, V::constant(window(k, rng)), true);
    EXPECT_EQ(z.dim(2), 1 + k / 2);
    EXPECT_EQ(z.dim(3), 2u);
    EXPECT_EQ(z.dim(4), 3u);
  }
}

TEST(EncodeFull, ZeroInNoBiasGivesZeroOut) {
  Fixture f(4, false);
  const auto z = causal::encode_full(f.stack, V::constant(Tensor<double>({1, 2, 5, 8, 12})), false);
  for (double v : z.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(EncodeFull, MatchesMonolithicOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Fixture f(seed, true);
    std::mt19937_64 rng(seed + 100);
    for (std::size_t k : {2u, 4u, 6u}) {
      const auto x = window(k, rng);
      for (bool mask : {false, true}) {
        const auto streamed = causal::encode_full(f.stack, V::constant(x), mask).value();
        const auto ref = oracle::causal_encode(f.stack, x, mask);
        const auto direct = causal::encode_direct(f.stack, V::constant(x), mask).value();
        ASSERT_EQ(streamed.shape(), ref.shape());
        for (std::size_t i = 0; i < ref.size(); ++i) {
          EXPECT_NEAR(streamed[i], ref[i], 1e-12);
          EXPECT_NEAR(direct[i], ref[i], 1e-12);
        }
      }
    }
  }
}

TEST(EncodeStreaming, StagesReproduceFull) {
  Fixture f(7, true);
  std::mt19937_64 rng(8);
  const auto x = V::constant(window(4, rng));
  const auto full = causal::encode_full(f.stack, x, true).value();
  const auto padded = causal::pad_and_mask(x, true);
  auto cache = causal::init_cache(f.stack, 1, 8, 12);
  const std::size_t plane = full.dim(3) * full.dim(4);
  for (std::size_t s = 1; s <= 3; ++s) {
    const auto pair = ad::slice(padded, 2, 2 * s, 2 * s + 2);
    auto replay = cache;
    const auto z = causal::encode_streaming(f.stack, pair, cache).value();
    EXPECT_EQ(causal::encode_streaming(f.stack, pair, replay).value(), z);
    for (std::size_t c = 0; c < full.dim(1); ++c)
      for (std::size_t i = 0; i < plane; ++i) EXPECT_EQ(z[c * plane + i], full[(c * 3 + (s - 1)) * plane + i]);
  }
  EXPECT_EQ(cache.stage, 3u);
}

TEST(EncodeStreaming, ShapeDriftIsStateError) {
  Fixture f(9, true);
  auto cache = causal::init_cache(f.stack, 1, 8, 12);
  EXPECT_THROW(causal::encode_streaming(f.stack, V::constant(Tensor<double>({1, 2, 2, 8, 10})), cache), StateError);
  EXPECT_THROW(causal::encode_streaming(f.stack, V::constant(Tensor<double>({1, 2, 3, 8, 12})), cache), StateError);
}

TEST(EncodeFull, StrictCausality) {
  Fixture f(11, true);
  std::mt19937_64 rng(12);
  for (std::size_t k : {2u, 4u, 6u}) {
    const auto x = window(k, rng);
    const auto base = causal::encode_full(f.stack, V::constant(x), false).value();
    const std::size_t stages = 1 + k / 2, plane = base.dim(3) * base.dim(4);
    for (std::size_t frame = 0; frame <= k; ++frame) {
      auto y = x;
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 8; ++i)
          for (std::size_t j = 0; j < 12; ++j) y.at(0, c, frame, i, j) += 1.0;
      const auto z = causal::encode_full(f.stack, V::constant(y), false).value();
      const std::size_t padded_index = frame + 3;
      for (std::size_t s = 1; s <= stages; ++s) {
        bool same = true;
        for (std::size_t c = 0; c < base.dim(1); ++c)
          for (std::size_t i = 0; i < plane; ++i)
            same = same && z[(c * stages + s - 1) * plane + i] == base[(c * stages + s - 1) * plane + i];
        // stage s may only see padded indices up to 2s + 1
        if (padded_index > 2 * s + 1) EXPECT_TRUE(same) << "k=" << k << " frame=" << frame << " stage=" << s;
        if (padded_index == 2 * s + 1 || padded_index == 2 * s) EXPECT_FALSE(same);
      }
    }
  }
}

TEST(EncodeFull, MaskedFrameNeverRead) {
  Fixture f(13, true);
  std::mt19937_64 rng(14);
  auto x = window(4, rng);
  const auto a = causal::encode_full(f.stack, V::constant(x), true).value();
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 12; ++j) x.at(0, c, 4, i, j) = std::normal_distribution<double>(0.0, 5.0)(rng);
  EXPECT_EQ(causal::encode_full(f.stack, V::constant(x), true).value(), a);
}

TEST(EncodeFull, GradientsThroughCache) {
  Fixture f(15, true);
  std::mt19937_64 rng(16);
  auto x = V::parameter(window(2, rng));
  std::vector<V> leaves{x, f.stack.kernels[0], f.stack.kernels[1]};
  const double err = oracle::gradient_error(leaves, [&](const std::vector<V>&) {
    const auto z = causal::encode_full(f.stack, x, false);
    return ad::sum(ad::mul(z, z));
  });
  EXPECT_LT(err, 1e-4);
}
