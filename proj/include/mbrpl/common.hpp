#ifndef MBRPL_COMMON_HPP
#define MBRPL_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace mbrpl {

using Rng = std::mt19937_64;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Thrown for invalid configurations or violated preconditions.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a numerical quantity (loss, gradient, state) stops being finite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Derives an independent stream seed from a parent seed and a salt.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline Mat standard_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  std::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace mbrpl

#endif  // MBRPL_COMMON_HPP
