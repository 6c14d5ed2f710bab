#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace attnaudit {

struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<std::size_t> counts;

  std::size_t total() const;
  double bin_lo(std::size_t i) const;
  double bin_hi(std::size_t i) const;
};

/// Uniform bins over [lo, hi]. The top edge belongs to the last bin and
/// values outside the range are clamped into the end bins, so the total
/// always equals values.size(). Throws on empty input or bins == 0.
Histogram emit_histogram(std::span<const double> values, std::size_t bins, double lo, double hi);

inline constexpr double kTauRangeLo = -1.0;
inline constexpr double kTauRangeHi = 1.0;
inline constexpr double kJsdRangeLo = 0.0;
inline constexpr double kJsdRangeHi = 0.7;

/// CSV: bin_lo,bin_hi,count
std::string histogram_csv(const Histogram& h);

struct HeatmapOptions {
  // Scale saturation by the maximum weight instead of using weights directly.
  bool rescale = false;
};

/// One inline-styled <span> per token whose background alpha equals the
/// attention weight (clamped to [0, 1]).
std::string render_heatmap(std::span<const std::string> tokens, std::span<const double> alpha,
                           std::string_view caption = {}, const HeatmapOptions& options = {});

/// Self-contained HTML page showing original and adversarial attention side
/// by side, captioned with the output change.
std::string render_heatmap_pair(std::span<const std::string> tokens, std::span<const double> original,
                                std::span<const double> adversarial, double delta_y, std::string_view title = {},
                                const HeatmapOptions& options = {});

std::string html_escape(std::string_view text);

}  // namespace attnaudit
