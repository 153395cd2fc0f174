#pragma once

// Pre-indexing OOD scan and routing statistics. Both run teacher-forced
// decoding over (query, docid) pairs and never modify the model.

#include <vector>

#include "mixdsi/model.hpp"
#include "mixdsi/ood_expansion.hpp"

namespace mixdsi {

// Energies per pair as a layers x M matrix; layers without experts give NaN.
inline std::vector<Mat> router_energies(ModelState& m, const std::vector<TokenSeq>& queries,
                                        const std::vector<std::vector<int>>& codes, double temperature,
                                        int chunk = 64) {
  require(queries.size() == codes.size(), "scan: query/docid count mismatch");
  const int L = m.n_mix(), M = m.cfg.M;
  std::vector<Mat> out;
  for (std::size_t start = 0; start < queries.size(); start += chunk) {
    const std::size_t end = std::min(queries.size(), start + chunk);
    std::vector<TokenSeq> qs(queries.begin() + start, queries.begin() + end);
    std::vector<std::vector<int>> cs(codes.begin() + start, codes.begin() + end);
    ag::Tape t(false);
    TeacherForced tf = teacher_forced(t, m, qs, cs);
    for (std::size_t s = 0; s < qs.size(); ++s) {
      Mat e = Mat::Constant(L, M, std::numeric_limits<double>::quiet_NaN());
      for (int l = 0; l < L; ++l) {
        if (m.mix(l).experts.empty()) continue;
        const Mat& z = t.value(tf.dec.mix[l].logits);
        for (int p = 0; p < M; ++p) e(l, p) = energy_from_logits(z.row(s * M + p), temperature);
      }
      out.push_back(std::move(e));
    }
  }
  return out;
}

inline OodScanReport scan_corpus(ModelState& m, const std::vector<TokenSeq>& queries,
                                 const std::vector<std::vector<int>>& codes, const ExpansionPolicy& policy,
                                 int timestep) {
  policy.validate();
  require(!queries.empty(), "scan_corpus: empty pair set");
  std::vector<std::vector<EmaThreshold>> th;
  for (int l = 0; l < m.n_mix(); ++l)
    th.push_back(m.mix(l).experts.empty() ? std::vector<EmaThreshold>{} : m.mix(l).thresholds);
  return build_scan_report(router_energies(m, queries, codes, policy.temperature), th, timestep);
}

// Share of top-k selections each expert receives per MixLoRA layer; each
// layer's row sums to 1 (or is empty for a layer without experts).
inline std::vector<std::vector<double>> routing_fractions(ModelState& m, const std::vector<TokenSeq>& queries,
                                                          const std::vector<std::vector<int>>& codes,
                                                          int chunk = 64) {
  const int L = m.n_mix();
  std::vector<std::vector<double>> counts(L);
  for (int l = 0; l < L; ++l) counts[l].assign(m.mix(l).experts.size(), 0.0);
  for (std::size_t start = 0; start < queries.size(); start += chunk) {
    const std::size_t end = std::min(queries.size(), start + chunk);
    std::vector<TokenSeq> qs(queries.begin() + start, queries.begin() + end);
    std::vector<std::vector<int>> cs(codes.begin() + start, codes.begin() + end);
    ag::Tape t(false);
    TeacherForced tf = teacher_forced(t, m, qs, cs);
    for (int l = 0; l < L; ++l) {
      const Mat& g = tf.dec.mix[l].gates;
      for (Eigen::Index r = 0; r < g.rows(); ++r)
        for (Eigen::Index i = 0; i < g.cols(); ++i)
          if (g(r, i) != 0.0) counts[l][i] += 1.0;
    }
  }
  for (auto& row : counts) {
    double total = 0.0;
    for (double v : row) total += v;
    if (total > 0.0)
      for (double& v : row) v /= total;
  }
  return counts;
}

}  // namespace mixdsi
