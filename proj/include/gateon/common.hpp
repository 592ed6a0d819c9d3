#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace gateon {

#ifdef GATEON_USE_FLOAT32
using real = float;
#else
using real = double;
#endif

/// Thrown when a caller violates a documented precondition.
class contract_error : public std::logic_error {
 public:
  explicit contract_error(const std::string& msg) : std::logic_error("gateon: " + msg) {}
};

inline void check(bool cond, const char* msg) {
  if (!cond) throw contract_error(msg);
}

inline bool is_finite(real x) { return std::isfinite(static_cast<double>(x)); }

}  // namespace gateon
