#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "attnaudit/metrics.hpp"
#include "attnaudit/random.hpp"

namespace attnaudit {
namespace {

constexpr double kLn2 = std::numbers::ln2;

// Straight from the definition: half KL of each side to the mixture.
double jsd_oracle(const std::vector<double>& p, const std::vector<double>& q) {
  double a = 0, b = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) a += p[i] * std::log(p[i] / m);
    if (q[i] > 0) b += q[i] * std::log(q[i] / m);
  }
  return 0.5 * a + 0.5 * b;
}

TEST(Tvd, Examples) {
  EXPECT_DOUBLE_EQ(tvd(std::vector{0.5, 0.5}, std::vector{1.0, 0.0}), 0.5);
  EXPECT_DOUBLE_EQ(tvd(std::vector{0.2, 0.3, 0.5}, std::vector{0.2, 0.3, 0.5}), 0.0);
  EXPECT_DOUBLE_EQ(tvd(std::vector{1.0, 0.0}, std::vector{0.0, 1.0}), 1.0);
}

TEST(Tvd, RejectsLengthMismatch) {
  EXPECT_THROW(tvd(std::vector{1.0}, std::vector{0.5, 0.5}), std::invalid_argument);
  EXPECT_THROW(jsd(std::vector{1.0}, std::vector{0.5, 0.5}), std::invalid_argument);
}

TEST(Jsd, HalfAgainstOneHot) {
  // 0.5 * ln(4/3) + 0.25 * ln 2 ... evaluated directly
  const std::vector p{0.5, 0.5}, q{1.0, 0.0};
  EXPECT_NEAR(jsd(p, q), 0.21576155433883565, 1e-12);
  EXPECT_NEAR(jsd(p, q), jsd_oracle(p, q), 1e-15);
}

TEST(Jsd, DisjointSupportsReachLn2) {
  EXPECT_NEAR(jsd(std::vector{1.0, 0.0, 0.0}, std::vector{0.0, 0.5, 0.5}), kLn2, 1e-15);
}

TEST(Jsd, IdenticalIsZeroAndSymmetric) {
  const std::vector p{0.1, 0.6, 0.3}, q{0.3, 0.3, 0.4};
  EXPECT_EQ(jsd(p, p), 0.0);
  EXPECT_DOUBLE_EQ(jsd(p, q), jsd(q, p));
}

TEST(Jsd, RandomInputsMatchOracleAndBound) {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    std::vector<double> p(n), q(n);
    double sp = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.bernoulli(0.2) ? 0.0 : rng.uniform();
      q[i] = rng.bernoulli(0.2) ? 0.0 : rng.uniform();
      sp += p[i];
      sq += q[i];
    }
    if (sp == 0 || sq == 0) continue;
    for (auto& v : p) v /= sp;
    for (auto& v : q) v /= sq;
    const double d = jsd(p, q);
    ASSERT_NEAR(d, jsd_oracle(p, q), 1e-12);
    ASSERT_LE(d, kLn2 + 1e-12);
    ASSERT_GE(d, 0.0);
  }
}

TEST(Kl, Basic) {
  EXPECT_NEAR(kl_divergence(std::vector{0.5, 0.5}, std::vector{0.25, 0.75}),
              0.5 * std::log(2.0) + 0.5 * std::log(0.5 / 0.75), 1e-15);
  EXPECT_EQ(kl_divergence(std::vector{1.0, 0.0}, std::vector{1.0, 0.0}), 0.0);
}

TEST(Kendall, SingleSwap) {
  const auto tau = kendall_tau(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4});
  ASSERT_TRUE(tau);
  EXPECT_DOUBLE_EQ(*tau, 4.0 / 6.0);
}

TEST(Kendall, PerfectAndReversed) {
  const std::vector<double> a{0.1, 0.4, 0.2, 0.9};
  const std::vector<double> r{0.9, 0.6, 0.8, 0.1};
  EXPECT_DOUBLE_EQ(*kendall_tau(a, a), 1.0);
  EXPECT_DOUBLE_EQ(*kendall_tau(a, r), -1.0);
}

TEST(Kendall, ConstantInputIsUndefined) {
  EXPECT_FALSE(kendall_tau(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}));
  const KendallTest t = kendall_tau_test(std::vector<double>{2, 2}, std::vector<double>{1, 2});
  EXPECT_FALSE(t.tau);
  EXPECT_TRUE(std::isnan(t.p_value));
}

TEST(Kendall, TauBWithTiesAgainstScipy) {
  // Reference values from scipy.stats.kendalltau(method="asymptotic").
  const std::vector<double> a{1, 1, 2, 3, 3, 4}, b{1, 2, 2, 3, 4, 4};
  const KendallTest t = kendall_tau_test(a, b);
  EXPECT_NEAR(*t.tau, 0.8461538461538463, 1e-14);
  EXPECT_NEAR(t.p_value, 0.026567513335842154, 1e-12);

  const KendallTest u = kendall_tau_test(std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8},
                                         std::vector<double>{2, 1, 4, 3, 6, 5, 8, 7});
  EXPECT_NEAR(*u.tau, 0.7142857142857142, 1e-14);
  EXPECT_NEAR(u.p_value, 0.013347575926843162, 1e-12);

  const KendallTest w =
      kendall_tau_test(std::vector<double>{0.1, 0.4, 0.2, 0.3, 0.9}, std::vector<double>{3, 1, 2, 2, 5});
  EXPECT_NEAR(*w.tau, -0.10540925533894598, 1e-14);
  EXPECT_NEAR(w.p_value, 0.8005421074231263, 1e-12);
}

TEST(Kendall, TauAIgnoresTieCorrection) {
  const std::vector<double> a{1, 1, 2, 3}, b{1, 2, 3, 4};
  // 5 concordant, 0 discordant, 1 tie in a, over 6 pairs
  EXPECT_DOUBLE_EQ(*kendall_tau(a, b, TauVariant::kA), 5.0 / 6.0);
  EXPECT_DOUBLE_EQ(*kendall_tau(a, b, TauVariant::kB), 5.0 / std::sqrt(5.0 * 6.0));
}

TEST(Kendall, FastMatchesBruteForceExactly) {
  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> a(n), b(n);
    // small alphabets force plenty of ties
    for (auto& v : a) v = static_cast<double>(rng.below(trial % 2 ? 5 : 1000));
    for (auto& v : b) v = static_cast<double>(rng.below(trial % 3 ? 4 : 1000));
    const auto slow = kendall_tau(a, b);
    const auto fast = kendall_tau_fast(a, b);
    ASSERT_EQ(slow.has_value(), fast.has_value());
    if (slow) ASSERT_EQ(*slow, *fast);
  }
}

TEST(Kendall, PairCountsByDefinition) {
  const PairCounts c = count_pairs(std::vector<double>{1, 2, 2}, std::vector<double>{3, 1, 1});
  EXPECT_EQ(c.total, 3);
  EXPECT_EQ(c.concordant, 0);
  EXPECT_EQ(c.discordant, 2);
  EXPECT_EQ(c.tied_first, 1);
  EXPECT_EQ(c.tied_second, 1);
}

TEST(Kendall, RejectsBadLengths) {
  EXPECT_THROW(kendall_tau(std::vector<double>{1}, std::vector<double>{1}), std::invalid_argument);
  EXPECT_THROW(kendall_tau(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
}

TEST(Distribution, Validation) {
  EXPECT_NO_THROW(require_distribution(std::vector{0.25, 0.75}));
  EXPECT_THROW(require_distribution(std::vector{0.25, 0.70}), std::invalid_argument);
  EXPECT_THROW(require_distribution(std::vector{NAN, 1.0}), std::invalid_argument);
}

}  // namespace
}  // namespace attnaudit
