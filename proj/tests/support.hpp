#pragma once

// Shared test helpers: finite-difference gradient sweeps and small random
// generators for property tests.

#include <functional>
#include <random>
#include <vector>

#include "mixdsi/autograd.hpp"
#include "mixdsi/common.hpp"

namespace testing_support {

using mixdsi::Mat;
using mixdsi::Param;

struct GradCheck {
  int coords = 0;
  double max_rel = 0.0;
  double max_abs = 0.0;
};

// Compares Param::grad (filled by `analytic`) against central differences of
// `loss` at up to `per_param` sampled coordinates of each parameter. The
// relative error uses max(|a|, |n|, floor) as denominator so exact zeros do
// not blow up.
inline GradCheck check_gradients(const std::vector<Param*>& params,
                                 const std::function<double()>& loss,
                                 const std::function<void()>& analytic, int per_param,
                                 uint64_t seed, double h = 1e-5, double floor = 1e-6) {
  for (Param* p : params) p->zero_grad();
  analytic();
  GradCheck out;
  std::mt19937_64 rng(seed);
  for (Param* p : params) {
    const Eigen::Index n = p->value.size();
    std::vector<Eigen::Index> idx(n);
    for (Eigen::Index i = 0; i < n; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    const int take = std::min<int>(per_param, static_cast<int>(n));
    const Mat grad = p->grad;
    for (int s = 0; s < take; ++s) {
      double& x = p->value.data()[idx[s]];
      const double orig = x;
      x = orig + h;
      const double up = loss();
      x = orig - h;
      const double down = loss();
      x = orig;
      const double num = (up - down) / (2.0 * h);
      const double ana = grad.data()[idx[s]];
      const double abs = std::abs(num - ana);
      const double rel = abs / std::max({std::abs(num), std::abs(ana), floor});
      out.max_abs = std::max(out.max_abs, abs);
      out.max_rel = std::max(out.max_rel, rel);
      ++out.coords;
    }
  }
  return out;
}

inline Mat random_mat(int r, int c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace testing_support
