#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace rlfr {

// Half-open token interval [start, end).
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;

  Span() = default;
  Span(std::size_t s, std::size_t e) : start(s), end(e) {}

  std::size_t length() const { return end - start; }
  bool valid() const { return start < end; }
  bool valid_within(std::size_t seq_len) const { return valid() && end <= seq_len; }

  friend bool operator==(const Span&, const Span&) = default;
  friend auto operator<=>(const Span&, const Span&) = default;

  std::string str() const {
    return "[" + std::to_string(start) + "," + std::to_string(end) + ")";
  }
};

inline std::size_t intersection_size(const Span& a, const Span& b) {
  const std::size_t lo = std::max(a.start, b.start);
  const std::size_t hi = std::min(a.end, b.end);
  return hi > lo ? hi - lo : 0;
}

struct OverlapFractions {
  double of_a = 0.0;
  double of_b = 0.0;
  double max() const { return std::max(of_a, of_b); }
};

// |a∩b|/|a| and |a∩b|/|b|.
inline OverlapFractions overlap_fractions(const Span& a, const Span& b) {
  if (!a.valid() || !b.valid()) {
    throw std::invalid_argument("overlap_fractions: invalid span " + a.str() + " / " + b.str());
  }
  const double inter = static_cast<double>(intersection_size(a, b));
  return {inter / static_cast<double>(a.length()), inter / static_cast<double>(b.length())};
}

// Non-strict containment: equal spans contain each other.
inline bool contains(const Span& outer, const Span& inner) {
  return outer.start <= inner.start && inner.end <= outer.end;
}

}  // namespace rlfr
