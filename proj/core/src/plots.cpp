#include "attnaudit/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "attnaudit/io.hpp"

namespace attnaudit {

std::size_t Histogram::total() const {
  std::size_t n = 0;
  for (std::size_t c : counts) n += c;
  return n;
}

double Histogram::bin_lo(std::size_t i) const {
  return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(counts.size());
}

double Histogram::bin_hi(std::size_t i) const { return i + 1 == counts.size() ? hi : bin_lo(i + 1); }

Histogram emit_histogram(std::span<const double> values, std::size_t bins, double lo, double hi) {
  if (bins == 0) throw std::invalid_argument("emit_histogram: need at least one bin");
  if (values.empty()) throw std::invalid_argument("emit_histogram: no values");
  if (!(hi > lo)) throw std::invalid_argument("emit_histogram: empty range");
  Histogram h{lo, hi, std::vector<std::size_t>(bins, 0)};
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    if (std::isnan(v)) throw std::invalid_argument("emit_histogram: NaN value");
    const double pos = std::floor((v - lo) / width);
    const auto idx = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(bins - 1)));
    ++h.counts[idx];
  }
  return h;
}

std::string histogram_csv(const Histogram& h) {
  std::ostringstream out;
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    out << format_double(h.bin_lo(i)) << ',' << format_double(h.bin_hi(i)) << ',' << h.counts[i] << '\n';
  }
  return out.str();
}

std::string html_escape(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string render_heatmap(std::span<const std::string> tokens, std::span<const double> alpha,
                           std::string_view caption, const HeatmapOptions& options) {
  if (tokens.size() != alpha.size()) {
    throw std::invalid_argument("render_heatmap: " + std::to_string(tokens.size()) + " tokens but " +
                                std::to_string(alpha.size()) + " weights");
  }
  double peak = 0.0;
  for (double a : alpha) peak = std::max(peak, a);
  std::ostringstream out;
  out << "<div class=\"heatmap\">";
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    double saturation = options.rescale && peak > 0.0 ? alpha[t] / peak : alpha[t];
    saturation = std::clamp(saturation, 0.0, 1.0);
    out << "<span style=\"background-color: rgba(255, 0, 0, " << fixed(saturation, 4) << ")\">"
        << html_escape(tokens[t]) << "</span>";
    if (t + 1 < tokens.size()) out << ' ';
  }
  if (!caption.empty()) out << "<div class=\"caption\">" << html_escape(caption) << "</div>";
  out << "</div>";
  return out.str();
}

std::string render_heatmap_pair(std::span<const std::string> tokens, std::span<const double> original,
                                std::span<const double> adversarial, double delta_y, std::string_view title,
                                const HeatmapOptions& options) {
  std::ostringstream out;
  out << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" << html_escape(title)
      << "</title></head>\n<body style=\"font-family: sans-serif\">\n";
  if (!title.empty()) out << "<h3>" << html_escape(title) << "</h3>\n";
  out << "<table><tr><th>Original</th><th>Adversarial</th></tr>\n<tr><td>"
      << render_heatmap(tokens, original, {}, options) << "</td><td>"
      << render_heatmap(tokens, adversarial, "\xCE\x94\xC5\xB7: " + fixed(delta_y, 3), options)
      << "</td></tr></table>\n</body></html>\n";
  return out.str();
}

}  // namespace attnaudit
