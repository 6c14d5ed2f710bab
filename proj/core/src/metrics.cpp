#include "attnaudit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnaudit {

namespace {

void require_same_length(const char* what, std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw std::invalid_argument(std::string(what) + ": length mismatch " + std::to_string(p.size()) + " vs " +
                                std::to_string(q.size()));
  }
}

void require_rankable(std::span<const double> a, std::span<const double> b) {
  require_same_length("kendall_tau", a, b);
  if (a.size() < 2) throw std::invalid_argument("kendall_tau: need at least two observations");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isnan(a[i]) || std::isnan(b[i])) throw std::invalid_argument("kendall_tau: NaN input");
  }
}

int sign(double x) { return (x > 0.0) - (x < 0.0); }

std::optional<double> tau_from_counts(const PairCounts& c, TauVariant variant) {
  if (c.tied_first == c.total || c.tied_second == c.total) return std::nullopt;
  const double score = static_cast<double>(c.concordant - c.discordant);
  if (variant == TauVariant::kA) return score / static_cast<double>(c.total);
  const double denom = std::sqrt(static_cast<double>(c.total - c.tied_first)) *
                       std::sqrt(static_cast<double>(c.total - c.tied_second));
  return std::clamp(score / denom, -1.0, 1.0);
}

// Sum over tie groups of f(group size).
template <typename F>
double tie_sum(std::vector<double> values, F&& f) {
  std::sort(values.begin(), values.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size();) {
    std::size_t j = i;
    while (j < values.size() && values[j] == values[i]) ++j;
    acc += f(static_cast<double>(j - i));
    i = j;
  }
  return acc;
}

}  // namespace

void require_distribution(std::span<const double> values, double tolerance) {
  if (values.empty()) throw std::invalid_argument("distribution is empty");
  double total = 0.0;
  for (double v : values) {
    if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument("distribution has a negative or non-finite entry");
    total += v;
  }
  if (std::fabs(total - 1.0) > tolerance) {
    throw std::invalid_argument("distribution sums to " + std::to_string(total));
  }
}

double tvd(std::span<const double> p, std::span<const double> q) {
  require_same_length("tvd", p, q);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::fabs(p[i] - q[i]);
  return 0.5 * acc;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  require_same_length("kl_divergence", p, q);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) acc += p[i] * std::log(p[i] / q[i]);
  }
  return acc;
}

double jsd(std::span<const double> p, std::span<const double> q) {
  require_same_length("jsd", p, q);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double mid = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) acc += 0.5 * p[i] * std::log(p[i] / mid);
    if (q[i] > 0.0) acc += 0.5 * q[i] * std::log(q[i] / mid);
  }
  return std::clamp(acc, 0.0, std::numbers::ln2);
}

PairCounts count_pairs(std::span<const double> a, std::span<const double> b) {
  require_rankable(a, b);
  PairCounts c;
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const int sa = sign(a[i] - a[j]);
      const int sb = sign(b[i] - b[j]);
      if (sa == 0) ++c.tied_first;
      if (sb == 0) ++c.tied_second;
      if (sa * sb > 0) ++c.concordant;
      if (sa * sb < 0) ++c.discordant;
    }
  }
  c.total = static_cast<std::int64_t>(n * (n - 1) / 2);
  return c;
}

std::optional<double> kendall_tau(std::span<const double> a, std::span<const double> b, TauVariant variant) {
  return tau_from_counts(count_pairs(a, b), variant);
}

std::optional<double> kendall_tau_fast(std::span<const double> a, std::span<const double> b) {
  require_rankable(a, b);
  const std::size_t n = a.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return a[i] < a[j] || (a[i] == a[j] && b[i] < b[j]);
  });

  std::int64_t tied_first = 0, tied_joint = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && a[order[j]] == a[order[i]]) ++j;
    const auto len = static_cast<std::int64_t>(j - i);
    tied_first += len * (len - 1) / 2;
    for (std::size_t s = i; s < j;) {
      std::size_t e = s;
      while (e < j && b[order[e]] == b[order[s]]) ++e;
      const auto run = static_cast<std::int64_t>(e - s);
      tied_joint += run * (run - 1) / 2;
      s = e;
    }
    i = j;
  }

  // Bottom-up merge sort on b, counting strict inversions.
  std::vector<double> keys(n), buffer(n);
  for (std::size_t i = 0; i < n; ++i) keys[i] = b[order[i]];
  std::int64_t swaps = 0;
  for (std::size_t width = 1; width < n; width *= 2) {
    for (std::size_t lo = 0; lo < n; lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, n), hi = std::min(lo + 2 * width, n);
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (keys[j] < keys[i]) {
          swaps += static_cast<std::int64_t>(mid - i);
          buffer[k++] = keys[j++];
        } else {
          buffer[k++] = keys[i++];
        }
      }
      while (i < mid) buffer[k++] = keys[i++];
      while (j < hi) buffer[k++] = keys[j++];
    }
    keys.swap(buffer);
  }

  std::int64_t tied_second = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && keys[j] == keys[i]) ++j;
    const auto len = static_cast<std::int64_t>(j - i);
    tied_second += len * (len - 1) / 2;
    i = j;
  }

  PairCounts c;
  c.total = static_cast<std::int64_t>(n * (n - 1) / 2);
  c.tied_first = tied_first;
  c.tied_second = tied_second;
  c.discordant = swaps;
  c.concordant = c.total - tied_first - tied_second + tied_joint - swaps;
  return tau_from_counts(c, TauVariant::kB);
}

KendallTest kendall_tau_test(std::span<const double> a, std::span<const double> b, TauVariant variant) {
  const PairCounts c = count_pairs(a, b);
  KendallTest result;
  result.tau = tau_from_counts(c, variant);
  if (!result.tau) {
    result.p_value = std::numeric_limits<double>::quiet_NaN();
    return result;
  }
  const double n = static_cast<double>(a.size());
  std::vector<double> va(a.begin(), a.end()), vb(b.begin(), b.end());
  const double ta = tie_sum(va, [](double t) { return t * (t - 1) * (2 * t + 5); });
  const double tb = tie_sum(vb, [](double t) { return t * (t - 1) * (2 * t + 5); });
  const double ta1 = tie_sum(va, [](double t) { return t * (t - 1); });
  const double tb1 = tie_sum(vb, [](double t) { return t * (t - 1); });
  const double ta2 = tie_sum(va, [](double t) { return t * (t - 1) * (t - 2); });
  const double tb2 = tie_sum(vb, [](double t) { return t * (t - 1) * (t - 2); });
  double variance = (n * (n - 1) * (2 * n + 5) - ta - tb) / 18.0 + ta1 * tb1 / (2.0 * n * (n - 1));
  if (n > 2) variance += ta2 * tb2 / (9.0 * n * (n - 1) * (n - 2));
  const double score = static_cast<double>(c.concordant - c.discordant);
  if (variance <= 0.0) {
    result.p_value = 1.0;
    return result;
  }
  const double z = score / std::sqrt(variance);
  result.p_value = std::erfc(std::fabs(z) / std::numbers::sqrt2);
  return result;
}

}  // namespace attnaudit
