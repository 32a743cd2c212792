#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace npm {

inline constexpr const char* kVersion = "0.3.0";

using Rng = std::mt19937_64;

// Error taxonomy. Each maps to one CLI exit code (see exit_code_for()).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct MissingArtifact : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};
struct IntegrityError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};

struct IntegrationDiverged : NumericalError {
  IntegrationDiverged(const std::string& what, long step_index = -1)
      : NumericalError(what), step(step_index) {}
  long step;
};

struct GenerationFailed : NumericalError {
  using NumericalError::NumericalError;
};

// Substream derived from (seed, index, tag). Streams for distinct triples are
// independent for all practical purposes, which lets generation run in any order.
inline Rng substream(std::uint64_t seed, std::uint64_t index, std::uint32_t tag = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    tag};
  return Rng(seq);
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline double to_float_precision(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace npm
