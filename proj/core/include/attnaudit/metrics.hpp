#pragma once

#include <cstdint>
#include <optional>
#include <span>

namespace attnaudit {

/// Throws std::invalid_argument unless values are finite, nonnegative and
/// sum to one within tolerance.
void require_distribution(std::span<const double> values, double tolerance = 1e-9);

/// Total variation distance: half the L1 distance.
double tvd(std::span<const double> p, std::span<const double> q);

/// Kullback-Leibler divergence in nats, 0 * log(0 / x) taken as 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Jensen-Shannon divergence in nats; bounded above by ln 2.
double jsd(std::span<const double> p, std::span<const double> q);

enum class TauVariant : std::uint8_t {
  kB,  // tie-corrected
  kA,  // (concordant - discordant) / total pairs
};

struct PairCounts {
  std::int64_t concordant = 0;
  std::int64_t discordant = 0;
  std::int64_t tied_first = 0;   // pairs tied in the first sequence (joint ties included)
  std::int64_t tied_second = 0;  // pairs tied in the second sequence (joint ties included)
  std::int64_t total = 0;
};

/// Brute-force O(n^2) pair classification.
PairCounts count_pairs(std::span<const double> a, std::span<const double> b);

/// Kendall rank correlation. Returns nullopt when either input is constant,
/// where the coefficient is undefined. Requires equal lengths >= 2.
std::optional<double> kendall_tau(std::span<const double> a, std::span<const double> b,
                                  TauVariant variant = TauVariant::kB);

/// Tau-b by Knight's O(n log n) merge-sort method; same result as
/// kendall_tau(a, b, TauVariant::kB).
std::optional<double> kendall_tau_fast(std::span<const double> a, std::span<const double> b);

struct KendallTest {
  std::optional<double> tau;
  // Two-sided p-value from the normal approximation with tie-corrected
  // variance of the score; NaN when tau is undefined.
  double p_value = 0.0;
};

KendallTest kendall_tau_test(std::span<const double> a, std::span<const double> b,
                             TauVariant variant = TauVariant::kB);

}  // namespace attnaudit
