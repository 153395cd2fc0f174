#pragma once

// Retrieval metrics and continual-learning summaries over a score matrix
// P[t][i]: checkpoint after indexing D_t evaluated on D_i's test queries.

#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "mixdsi/common.hpp"

namespace mixdsi {

namespace detail {
inline void check_ranking(const std::vector<std::string>& ranked) {
  std::set<std::string> seen;
  for (const auto& r : ranked)
    if (!seen.insert(r).second) throw DataError("ranking contains duplicate docid " + r);
}
}  // namespace detail

inline double recall_at_k(const std::vector<std::string>& ranked, const std::string& gold, int k) {
  detail::check_ranking(ranked);
  for (int i = 0; i < std::min<int>(k, static_cast<int>(ranked.size())); ++i)
    if (ranked[i] == gold) return 1.0;
  return 0.0;
}

inline double mrr_at_k(const std::vector<std::string>& ranked, const std::string& gold, int k) {
  detail::check_ranking(ranked);
  for (int i = 0; i < std::min<int>(k, static_cast<int>(ranked.size())); ++i)
    if (ranked[i] == gold) return 1.0 / (i + 1);
  return 0.0;
}

// Square matrix indexed [t][i]; NaN marks entries not yet evaluated. Entries
// above the diagonal hold zero-shot scores when they are recorded.
class MetricsMatrix {
 public:
  MetricsMatrix() = default;
  explicit MetricsMatrix(int timesteps)
      : n_(timesteps), v_(timesteps, std::vector<double>(timesteps, std::numeric_limits<double>::quiet_NaN())) {}

  int size() const { return n_; }
  bool has(int t, int i) const { return in_range(t, i) && !std::isnan(v_[t][i]); }
  double at(int t, int i) const {
    require(has(t, i), "metrics matrix: P[" + std::to_string(t) + "][" + std::to_string(i) + "] not populated");
    return v_[t][i];
  }
  void set(int t, int i, double value) {
    require(in_range(t, i), "metrics matrix: index out of range");
    require(value >= 0.0 && value <= 1.0 + 1e-12, "metrics matrix: score outside [0,1]");
    v_[t][i] = value;
  }

 private:
  bool in_range(int t, int i) const { return t >= 0 && i >= 0 && t < n_ && i < n_; }
  int n_ = 0;
  std::vector<std::vector<double>> v_;
};

struct ClMetrics {
  double ap = std::numeric_limits<double>::quiet_NaN();
  double bwt = std::numeric_limits<double>::quiet_NaN();
  double fwt = std::numeric_limits<double>::quiet_NaN();
};

// Mean of row t over the t+1 indexed corpora.
inline double average_performance(const MetricsMatrix& P, int t) {
  require(t >= 0, "AP: t must be >= 0");
  double s = 0.0;
  for (int i = 0; i <= t; ++i) s += P.at(t, i);
  return s / (t + 1);
}

inline double forward_transfer(const MetricsMatrix& P, int t) {
  require(t >= 1, "FWT needs t >= 1");
  double s = 0.0;
  for (int i = 1; i <= t; ++i) s += P.at(i, i);
  return s / t;
}

// Mean drop from the best earlier score on D_1..D_{t-1}. The max runs over
// checkpoints 0..t-1, which includes zero-shot entries unless restricted to
// checkpoints that had already indexed D_i.
inline double backward_transfer(const MetricsMatrix& P, int t, bool restrict_indexed = false) {
  require(t >= 2, "BWT needs t >= 2");
  double s = 0.0;
  for (int i = 1; i <= t - 1; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (int ip = restrict_indexed ? i : 0; ip <= t - 1; ++ip) best = std::max(best, P.at(ip, i));
    s += best - P.at(t, i);
  }
  return s / (t - 1);
}

// Each summary that is defined at t; the others stay NaN.
inline ClMetrics cl_metrics(const MetricsMatrix& P, int t, bool restrict_indexed = false) {
  ClMetrics m;
  m.ap = average_performance(P, t);
  if (t >= 1) m.fwt = forward_transfer(P, t);
  if (t >= 2) m.bwt = backward_transfer(P, t, restrict_indexed);
  return m;
}

}  // namespace mixdsi
