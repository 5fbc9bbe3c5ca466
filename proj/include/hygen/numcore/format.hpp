#pragma once

#include <cmath>
#include <cstdio>
#include <string>

#include "hygen/errors.hpp"

namespace hygen {

/// Round-trip text form of a double with 17 significant digits.
inline std::string format_double(double v) {
  if (!std::isfinite(v)) throw ValidityError("cannot serialize non-finite value");
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace hygen
