#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nimbus/edm.hpp"
#include "oracles.hpp"

using namespace nimbus;
using ad::Var;

namespace {

edm::EdmConfig defaults() {
  edm::EdmConfig c;
  c.sigma_data = 1.0;
  return c;
}

struct Toy {
  std::vector<double> mu, cov;
};

Toy toy(std::size_t D, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> m(-1.0, 1.0), c(0.25, 2.0);
  Toy t;
  for (std::size_t d = 0; d < D; ++d) t.mu.push_back(m(rng)), t.cov.push_back(c(rng));
  return t;
}

/// Per-dimension sample mean and variance of an (n, D) tensor.
std::pair<std::vector<double>, std::vector<double>> moments(const Tensor<double>& x) {
  const std::size_t n = x.dim(0), D = x.dim(1);
  std::vector<double> mean(D, 0.0), var(D, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < D; ++d) mean[d] += x[i * D + d] / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < D; ++d) var[d] += (x[i * D + d] - mean[d]) * (x[i * D + d] - mean[d]) / static_cast<double>(n - 1);
  return {mean, var};
}

double gaussian_kl(const std::vector<double>& m1, const std::vector<double>& v1, const Toy& t) {
  double kl = 0.0;
  for (std::size_t d = 0; d < m1.size(); ++d)
    kl += 0.5 * (v1[d] / t.cov[d] + (m1[d] - t.mu[d]) * (m1[d] - t.mu[d]) / t.cov[d] - 1.0 + std::log(t.cov[d] / v1[d]));
  return kl;
}

}  // namespace

TEST(Precondition, SymmetricPoint) {
  EXPECT_DOUBLE_EQ(edm::precondition(0.5, 0.5).c_skip, 0.5);
  EXPECT_NEAR(edm::precondition(1e-8, 0.5).c_skip, 1.0, 1e-12);
  EXPECT_NEAR(edm::precondition(1e-8, 0.5).c_out, 0.0, 1e-7);
  EXPECT_THROW(edm::precondition(0.0, 0.5), DomainError);
}

TEST(Precondition, HandValuesAtTwiceSigmaData) {
  const long double d = 0.5L, s = 1.0L, q = s * s + d * d;
  const auto p = edm::precondition(1.0, 0.5);
  EXPECT_NEAR(p.c_skip, static_cast<double>(d * d / q), 1e-15);
  EXPECT_NEAR(p.c_out, static_cast<double>(s * d / sqrtl(q)), 1e-15);
  EXPECT_NEAR(p.c_in, static_cast<double>(1.0L / sqrtl(q)), 1e-15);
  EXPECT_NEAR(p.c_noise, 0.0, 1e-15);
}

TEST(Precondition, IdentitiesOverLogGrid) {
  for (double e = -4.0; e <= 4.0; e += 0.25) {
    const double s = std::pow(10.0, e), d = 0.7;
    const auto p = edm::precondition(s, d);
    EXPECT_NEAR((p.c_out / d) * (p.c_out / d) * (s * s + d * d) / (s * s), 1.0, 1e-12) << s;
    EXPECT_NEAR(p.c_skip + p.c_out * p.c_out / (d * d), 1.0, 1e-12) << s;
    EXPECT_NEAR(p.c_in * p.c_in * (s * s + d * d), 1.0, 1e-12) << s;
  }
}

TEST(Precondition, LossWeight) {
  for (double d : {0.3, 0.5, 1.7}) EXPECT_NEAR(edm::loss_weight(d, d), 2.0 / (d * d), 1e-12);
}

TEST(SampleSigma, LogNormalMoments) {
  const auto cfg = defaults();
  std::mt19937_64 rng(11);
  const std::size_t n = 100000;
  double m = 0.0, q = 0.0;
  std::vector<double> logs(n);
  for (auto& l : logs) {
    const double s = edm::sample_sigma(rng, cfg);
    ASSERT_GT(s, 0.0);
    l = std::log(s);
    m += l / n;
  }
  for (double l : logs) q += (l - m) * (l - m) / (n - 1);
  EXPECT_NEAR(m, -1.2, 3.0 * 1.2 / std::sqrt(double(n)));
  EXPECT_NEAR(std::sqrt(q), 1.2, 3.0 * 1.2 / std::sqrt(2.0 * n));

  std::mt19937_64 a(5), b(5);
  EXPECT_EQ(edm::sample_sigma(a, cfg), edm::sample_sigma(b, cfg));
}

TEST(Schedule, EndpointsAndMonotone) {
  const auto cfg = defaults();
  const auto s = edm::sigma_schedule(cfg);
  ASSERT_EQ(s.size(), 26u);
  EXPECT_NEAR(s[0], 80.0, 1e-10);
  EXPECT_NEAR(s[24], 0.002, 1e-14);
  EXPECT_EQ(s[25], 0.0);
  for (std::size_t i = 1; i < s.size(); ++i) EXPECT_LT(s[i], s[i - 1]);
  for (std::size_t i = 1; i < 25; ++i) EXPECT_LT(s[i - 1] / s[i], 3.0);

  auto one = cfg;
  one.steps = 1;
  const auto s1 = edm::sigma_schedule(one);
  ASSERT_EQ(s1.size(), 2u);
  EXPECT_DOUBLE_EQ(s1[0], 80.0);
  EXPECT_EQ(s1[1], 0.0);
}

TEST(Config, ChurnDefaultsAndValidation) {
  const edm::EdmConfig c;
  EXPECT_EQ(c.churn.s_churn, 2.5);
  EXPECT_EQ(c.churn.s_min, 0.75);
  EXPECT_EQ(c.churn.s_max, 68.0);
  EXPECT_EQ(c.churn.s_noise, 1.1);
  EXPECT_EQ(c.steps, 25u);
  auto bad = c;
  bad.sigma_min = 100.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.steps = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Churn, GammaWindow) {
  const edm::EdmConfig c;
  EXPECT_EQ(edm::churn_gamma(0.5, c), 0.0);
  EXPECT_EQ(edm::churn_gamma(70.0, c), 0.0);
  EXPECT_DOUBLE_EQ(edm::churn_gamma(1.0, c), 0.1);
  auto big = c;
  big.churn.s_churn = 100.0;
  EXPECT_DOUBLE_EQ(edm::churn_gamma(1.0, big), std::sqrt(2.0) - 1.0);
}

TEST(AnalyticDenoiser, Limits) {
  const auto d = edm::analytic_gaussian_denoiser({1.0, -2.0}, {1.0, 1.0});
  Tensor<double> x({2}, std::vector<double>{3.0, 4.0});
  const auto small = d(x, 1e-9), large = d(x, 1e9), unit = d(x, 1.0);
  EXPECT_NEAR(small[0], 3.0, 1e-12);
  EXPECT_NEAR(large[1], -2.0, 1e-12);
  EXPECT_DOUBLE_EQ(unit[0], 1.0 + (3.0 - 1.0) / 2.0);
  EXPECT_DOUBLE_EQ(unit[1], -2.0 + (4.0 + 2.0) / 2.0);
  EXPECT_THROW(edm::analytic_gaussian_denoiser({0.0}, {0.0}), DomainError);
}

TEST(Sampler, DeterministicMomentMatching) {
  const auto t = toy(16, 3);
  const auto den = edm::analytic_gaussian_denoiser(t.mu, t.cov);
  std::mt19937_64 rng(42);
  const auto x = edm::sample_deterministic(den, {4096, 16}, rng, defaults());
  const auto [mean, var] = moments(x);
  for (std::size_t d = 0; d < 16; ++d) {
    EXPECT_NEAR(mean[d], t.mu[d], 0.05) << d;
    EXPECT_NEAR(var[d] / t.cov[d], 1.0, 0.10) << d;
  }
}

TEST(Sampler, Reproducible) {
  const auto t = toy(4, 1);
  const auto den = edm::analytic_gaussian_denoiser(t.mu, t.cov);
  std::mt19937_64 a(9), b(9);
  const auto x = edm::sample_stochastic(den, {8, 4}, a, edm::EdmConfig{});
  const auto y = edm::sample_stochastic(den, {8, 4}, b, edm::EdmConfig{});
  EXPECT_EQ(x.values().size(), y.values().size());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(Sampler, ZeroChurnIsBitwiseDeterministic) {
  const auto t = toy(16, 4);
  const auto den = edm::analytic_gaussian_denoiser(t.mu, t.cov);
  auto cfg = defaults();
  cfg.churn.s_churn = 0.0;
  std::mt19937_64 a(7), b(7);
  const auto x = edm::sample_deterministic(den, {64, 16}, a, cfg);
  const auto y = edm::sample_stochastic(den, {64, 16}, b, cfg);
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(x[i], y[i]) << i;
}

TEST(Sampler, SingleStepIsFinite) {
  const auto t = toy(4, 2);
  auto cfg = defaults();
  cfg.steps = 1;
  std::mt19937_64 rng(1);
  const auto x = edm::sample_deterministic(edm::analytic_gaussian_denoiser(t.mu, t.cov), {16, 4}, rng, cfg);
  for (double v : x.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Sampler, ChurnWidensEnsemble) {
  const auto t = toy(8, 5);
  const auto den = edm::analytic_gaussian_denoiser(t.mu, t.cov);
  const auto cfg = defaults();
  std::mt19937_64 a(21), b(21);
  const auto det = moments(edm::sample_deterministic(den, {256, 8}, a, cfg)).second;
  const auto sto = moments(edm::sample_stochastic(den, {256, 8}, b, cfg)).second;
  double vd = 0.0, vs = 0.0;
  for (std::size_t d = 0; d < 8; ++d) vd += det[d], vs += sto[d];
  EXPECT_GT(std::sqrt(vs), std::sqrt(vd));
}

TEST(Sampler, KlDecreasesWithSteps) {
  const auto t = toy(16, 8);
  const auto den = edm::analytic_gaussian_denoiser(t.mu, t.cov);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t n : {5u, 10u, 25u}) {
    auto cfg = defaults();
    cfg.steps = n;
    std::mt19937_64 rng(77);
    const auto [m, v] = moments(edm::sample_deterministic(den, {8192, 16}, rng, cfg));
    const double kl = gaussian_kl(m, v, t);
    EXPECT_LT(kl, prev) << n;
    prev = kl;
  }
}

TEST(Sampler, NonFiniteDenoiserNamesStep) {
  const edm::DenoiseFn bad = [](const Tensor<double>& x, double) {
    Tensor<double> y(x.shape(), std::numeric_limits<double>::quiet_NaN());
    return y;
  };
  std::mt19937_64 rng(0);
  try {
    edm::sample_deterministic(bad, {2}, rng, defaults());
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Condition, LayoutAndOrder) {
  std::mt19937_64 rng(1);
  const std::size_t k = 4, F = 1 + k / 2;
  const auto noisy = Var<double>::constant(oracle::random_tensor({1, 2, 3, 3}, rng));
  const auto bar = Var<double>::constant(oracle::random_tensor({1, 2, F, 3, 3}, rng));
  const auto prev = Var<double>::constant(oracle::random_tensor({1, 2, 3, 3}, rng));
  const auto c = edm::build_condition(noisy, bar, prev);
  ASSERT_EQ(c.shape(), (Shape{1, 2, 3 + k / 2, 3, 3}));
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t i = 0; i < 9; ++i) {
      EXPECT_EQ(c.value()[(ch * 5 + 0) * 9 + i], noisy.value()[ch * 9 + i]);
      EXPECT_EQ(c.value()[(ch * 5 + 4) * 9 + i], prev.value()[ch * 9 + i]);
      for (std::size_t f = 0; f < F; ++f) EXPECT_EQ(c.value()[(ch * 5 + 1 + f) * 9 + i], bar.value()[(ch * F + f) * 9 + i]);
    }

  // swapping two z̄ frames changes the condition
  Tensor<double> swapped = bar.value();
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t i = 0; i < 9; ++i) std::swap(swapped[(ch * F + 0) * 9 + i], swapped[(ch * F + 1) * 9 + i]);
  const auto c2 = edm::build_condition(noisy, Var<double>::constant(swapped), prev);
  bool differs = false;
  for (std::size_t i = 0; i < c.size(); ++i) differs |= c.value()[i] != c2.value()[i];
  EXPECT_TRUE(differs);

  EXPECT_THROW(edm::build_condition(noisy, bar, Var<double>::constant(Tensor<double>({1, 2, 4, 4}))), DomainError);
}

TEST(Denoiser, ZeroHeadGivesSkipOnly) {
  const edm::DenoiserConfig dc{2, 5, 4, 1, 2};
  edm::Denoiser<double> net(dc, 3);
  std::mt19937_64 rng(2);
  const auto z = oracle::random_tensor({2, 2, 4, 4}, rng);
  const auto bar = oracle::random_tensor({2, 2, 3, 4, 4}, rng);
  const auto prev = oracle::random_tensor({2, 2, 4, 4}, rng);
  const auto noise = oracle::random_tensor({2, 2, 4, 4}, rng);
  const std::vector<double> sig{0.3, 4.0};
  const double sd = 0.8;
  const double got = edm::diffusion_loss_at(net, z, bar, prev, sig, noise, sd).value()[0];

  // head is zero-initialised, so D = c_skip·(z + σε)
  double want = 0.0;
  const std::size_t S = 32;
  for (std::size_t n = 0; n < 2; ++n) {
    const double cs = edm::precondition(sig[n], sd).c_skip, lam = edm::loss_weight(sig[n], sd);
    for (std::size_t i = 0; i < S; ++i) {
      const double d = cs * (z[n * S + i] + sig[n] * noise[n * S + i]) - z[n * S + i];
      want += lam * d * d / (2.0 * S);
    }
  }
  EXPECT_NEAR(got, want, 1e-10 * want);
}

TEST(Denoiser, LossGradientMatchesFiniteDifferences) {
  const edm::DenoiserConfig dc{2, 4, 4, 1, 2};
  edm::Denoiser<double> net(dc, 5);
  std::mt19937_64 rng(6);
  for (auto& p : net.params().vars()) {
    auto v = p;
    v.mutable_value() = oracle::random_tensor(v.shape(), rng, 0.4);
  }
  const auto z = oracle::random_tensor({2, 2, 4, 4}, rng);
  const auto bar = oracle::random_tensor({2, 2, 2, 4, 4}, rng);
  const auto prev = oracle::random_tensor({2, 2, 4, 4}, rng);
  const auto noise = oracle::random_tensor({2, 2, 4, 4}, rng);
  const std::vector<double> sig{0.5, 2.0};
  const double err = oracle::gradient_error(net.params().vars(), [&](const std::vector<Var<double>>&) {
    return edm::diffusion_loss_at(net, z, bar, prev, sig, noise, 0.5);
  }, 1e-5);
  EXPECT_LT(err, 1e-4);
}

TEST(SigmaData, Estimate) {
  Tensor<float> z({4}, std::vector<float>{1, -1, 1, -1});
  EXPECT_NEAR(edm::estimate_sigma_data(z), 1.0, 1e-12);
  EXPECT_THROW(edm::estimate_sigma_data(Tensor<float>({3}, 2.0f)), NumericError);
}
