#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mixdsi {

// Token-major storage: one row per token / item.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

using TokenSeq = std::vector<int>;

// Error categories map onto CLI exit codes (1 usage, 2 data, 3 numerical).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw UsageError(msg);
}

inline void require_data(bool cond, const std::string& msg) {
  if (!cond) throw DataError(msg);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

// Most-negative finite double; stands in for -inf in masked logits.
inline constexpr double kMaskedLogit = std::numeric_limits<double>::lowest();

using Rng = std::mt19937_64;

// Derives an independent stream from a base seed and a list of salts.
inline uint64_t derive_seed(uint64_t seed, std::initializer_list<uint64_t> salts) {
  uint64_t h = seed ^ 0x9E3779B97F4A7C15ULL;
  for (uint64_t s : salts) {
    h ^= s + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    h *= 0xBF58476D1CE4E5B9ULL;
    h ^= h >> 31;
  }
  return h;
}

inline Mat random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline RowVec random_unit_row(Eigen::Index dim, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  RowVec v(dim);
  do {
    for (Eigen::Index i = 0; i < dim; ++i) v[i] = dist(rng);
  } while (v.norm() == 0.0);
  return v / v.norm();
}

// Stable log(sum(exp(v))).
template <typename Derived>
double log_sum_exp(const Eigen::DenseBase<Derived>& v) {
  const double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((v.derived().array() - mx).exp().sum());
}

}  // namespace mixdsi
