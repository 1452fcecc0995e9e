#pragma once

#include <cstdint>
#include <stdexcept>

namespace gte {

// 64-bit floats everywhere: the verification tolerances (1e-6 kernel
// equivalence, finite-difference checks at h=1e-4) need the headroom.
using Real = double;
using Index = std::int64_t;

// Error taxonomy mirrored by CLI exit codes: config 2, data 3, divergence 4.
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace gte
