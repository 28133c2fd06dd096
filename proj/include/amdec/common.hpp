// amdec/common.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace amdec {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kPosInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Errors. The CLI maps each class to a distinct exit code.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct DivergedError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Log-domain arithmetic. All probabilities in this codebase live in natural
// log; sums use max-shifted log-sum-exp.

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

template <typename It>
double log_sum_exp(It begin, It end) {
  double m = kNegInf;
  for (It it = begin; it != end; ++it) m = std::max(m, double(*it));
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (It it = begin; it != end; ++it) s += std::exp(double(*it) - m);
  return m + std::log(s);
}

inline double log_sum_exp_row(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  return log_sum_exp(row.data(), row.data() + row.size());
}

// ---------------------------------------------------------------------------
// Deterministic RNG streams. Every stochastic choice in the project draws
// from an mt19937_64 seeded through mix_seed, keyed by (seed, tag, ids...),
// so independent components never share or reorder a stream.

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, std::string_view tag) {
  uint64_t h = splitmix64(seed);
  for (char c : tag) h = splitmix64(h ^ uint64_t(uint8_t(c)));
  return h;
}

inline uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t a,
                         uint64_t b = 0) {
  return splitmix64(splitmix64(mix_seed(seed, tag) ^ a) ^ b);
}

inline std::mt19937_64 make_rng(uint64_t seed, std::string_view tag,
                                uint64_t a = 0, uint64_t b = 0) {
  return std::mt19937_64(mix_seed(seed, tag, a, b));
}

}  // namespace amdec
