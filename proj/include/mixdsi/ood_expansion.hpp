#pragma once

// Energy scores over router logits, EMA thresholds and the layer-wise
// expansion decision. The model-driven corpus scan lives in pipeline.hpp; this
// header holds the parts that only need energies and thresholds.

#include <set>
#include <string>
#include <vector>

#include "mixdsi/common.hpp"
#include "mixdsi/mixlora.hpp"

namespace mixdsi {

// Which per-batch summary of ID energies feeds the EMA.
enum class EmaStatistic { mean, max };

inline std::string to_string(EmaStatistic s) { return s == EmaStatistic::max ? "max" : "mean"; }
inline EmaStatistic ema_statistic_from(const std::string& s) {
  if (s == "mean") return EmaStatistic::mean;
  if (s == "max") return EmaStatistic::max;
  throw UsageError("unknown ema statistic: " + s);
}

struct ExpansionPolicy {
  double delta = 0.05;
  double ema_decay = 0.99;
  double temperature = 1.0;
  EmaStatistic statistic = EmaStatistic::mean;

  void validate() const {
    require(delta >= 0.0 && delta <= 1.0, "ExpansionPolicy: delta must be in [0,1]");
    require(ema_decay > 0.0 && ema_decay < 1.0, "ExpansionPolicy: ema_decay must be in (0,1)");
    require(temperature > 0.0, "ExpansionPolicy: temperature must be > 0");
  }
};

// -T log sum_i exp(logit_i / T)
template <typename Derived>
double energy_from_logits(const Eigen::DenseBase<Derived>& logits, double T = 1.0) {
  require(T > 0.0, "energy: temperature must be > 0");
  require(logits.size() >= 1, "energy: router has no columns");
  if (!logits.derived().allFinite()) throw NumericalError("energy: non-finite logits");
  return -T * log_sum_exp((logits.derived().array() / T).matrix());
}

inline double energy_score(const RowVec& x, const Router& router, double T = 1.0) {
  require(router.size() >= 1, "energy_score: router has no columns");
  return energy_from_logits(router_logits(x, router), T);
}

inline double update_ema(double tau, double score, double decay) {
  require(decay > 0.0 && decay < 1.0, "update_ema: decay must be in (0,1)");
  return decay * tau + (1.0 - decay) * score;
}

inline void update_ema(EmaThreshold& th, double score, double decay) {
  if (!th.initialized) {
    th.tau = score;
    th.initialized = true;
    return;
  }
  th.tau = update_ema(th.tau, score, decay);
}

struct LayerScan {
  int layer = 0;
  bool applicable = false;
  int n_queries = 0;
  int n_ood = 0;
  double fraction = 0.0;
  std::vector<double> position_mean;  // mean energy per docid position
  std::vector<double> position_max;
  std::vector<double> position_tau;
};

struct OodScanReport {
  int timestep = 0;
  std::vector<LayerScan> layers;
};

// energies[q] is layers x M; thresholds[l] holds the per-position taus, or is
// empty when the layer has none yet.
inline OodScanReport build_scan_report(const std::vector<Mat>& energies,
                                       const std::vector<std::vector<EmaThreshold>>& thresholds,
                                       int timestep) {
  require(!energies.empty(), "scan_corpus: empty pair set");
  const int L = static_cast<int>(thresholds.size());
  const int M = static_cast<int>(energies.front().cols());
  OodScanReport rep;
  rep.timestep = timestep;
  for (int l = 0; l < L; ++l) {
    LayerScan s;
    s.layer = l;
    s.n_queries = static_cast<int>(energies.size());
    s.position_mean.assign(M, 0.0);
    s.position_max.assign(M, -std::numeric_limits<double>::infinity());
    const auto& th = thresholds[l];
    s.applicable = static_cast<int>(th.size()) == M &&
                   std::all_of(th.begin(), th.end(), [](const EmaThreshold& t) { return t.initialized; });
    for (const Mat& e : energies) {
      require(e.rows() == L && e.cols() == M, "scan_corpus: energy matrix shape mismatch");
      bool ood = false;
      for (int i = 0; i < M; ++i) {
        s.position_mean[i] += e(l, i);
        s.position_max[i] = std::max(s.position_max[i], e(l, i));
        if (s.applicable && e(l, i) > th[i].tau) ood = true;
      }
      if (ood) ++s.n_ood;
    }
    for (double& v : s.position_mean) v /= static_cast<double>(energies.size());
    for (int i = 0; i < M && s.applicable; ++i) s.position_tau.push_back(th[i].tau);
    s.fraction = s.applicable ? static_cast<double>(s.n_ood) / s.n_queries : 0.0;
    rep.layers.push_back(std::move(s));
  }
  return rep;
}

inline std::set<int> expansion_decision(const OodScanReport& report, const ExpansionPolicy& policy) {
  std::set<int> out;
  for (const auto& s : report.layers) {
    require(s.fraction >= 0.0 && s.fraction <= 1.0, "expansion_decision: fraction outside [0,1]");
    if (s.applicable && s.fraction > policy.delta) out.insert(s.layer);
  }
  return out;
}

// Summary of one position's batch energies that is folded into the EMA.
inline double batch_statistic(const std::vector<double>& scores, EmaStatistic stat) {
  require(!scores.empty(), "batch_statistic: no scores");
  if (stat == EmaStatistic::max) return *std::max_element(scores.begin(), scores.end());
  double s = 0.0;
  for (double v : scores) s += v;
  return s / static_cast<double>(scores.size());
}

}  // namespace mixdsi
