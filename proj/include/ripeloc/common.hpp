#pragma once
// ===== Common error taxonomy and small helpers =====
//
// Error classes map onto process exit codes at the CLI boundary:
//   UsageError   -> 1  (bad flags, bad config keys)
//   DataError    -> 2  (missing/corrupt files, malformed datasets or weights)
//   NumericError -> 3  (NaN/Inf aborts, degenerate numeric state)
// ShapeError is an internal contract violation surfaced with full shape
// diagnostics; at the CLI it is reported as a data problem (exit 2) because
// it almost always means an incompatible weights/config combination.

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ripeloc {

struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

// Integer ceil-division for possibly-negative numerators (b > 0).
inline int ceil_div(int a, int b) { return a > 0 ? (a + b - 1) / b : a / b; }

inline double clampd(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

}  // namespace ripeloc
