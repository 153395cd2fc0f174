#pragma once

// Prefix trie over registered docids and trie-constrained beam search.

#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include "mixdsi/model.hpp"

namespace mixdsi {

class DocIdTrie {
 public:
  DocIdTrie() = default;
  explicit DocIdTrie(int M) : M_(M) {}

  static DocIdTrie from_table(const DocIdTable& table) {
    DocIdTrie trie(table.M());
    for (const auto& id : table.entries()) trie.insert(id.codes);
    return trie;
  }

  void insert(const std::vector<int>& codes) {
    require(static_cast<int>(codes.size()) == M_, "DocIdTrie: docid length != M");
    if (!leaves_.insert(codes).second) return;
    std::vector<int> prefix;
    for (int c : codes) {
      auto& kids = children_[prefix];
      auto it = std::lower_bound(kids.begin(), kids.end(), c);
      if (it == kids.end() || *it != c) kids.insert(it, c);
      prefix.push_back(c);
    }
  }

  // Sorted codes allowed after `prefix`.
  const std::vector<int>& children(const std::vector<int>& prefix) const {
    static const std::vector<int> none;
    auto it = children_.find(prefix);
    return it == children_.end() ? none : it->second;
  }

  bool contains(const std::vector<int>& codes) const { return leaves_.count(codes) > 0; }
  std::size_t size() const { return leaves_.size(); }
  int M() const { return M_; }

 private:
  int M_ = 0;
  std::map<std::vector<int>, std::vector<int>> children_;
  std::set<std::vector<int>> leaves_;
};

struct Hit {
  std::vector<int> codes;
  double score = 0.0;  // sum of per-position log-probabilities
};

// Higher score first; equal scores fall back to the smaller code sequence.
inline bool hit_before(const Hit& a, const Hit& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.codes < b.codes;
}

// Log-probability of every code at one docid position, normalized over the
// position's segment (mask on) or the whole vocabulary (mask off).
inline Mat position_log_probs(const ModelState& m, const Mat& logits, const Scored& s, int position) {
  Mat out(logits.rows(), m.cfg.K);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto seg = s.segs[r];
    const double lse = log_sum_exp(logits.row(r).segment(seg.begin, seg.end - seg.begin));
    for (int c = 1; c <= m.cfg.K; ++c)
      out(r, c - 1) = logits(r, scored_column(m, s, position, c)) - lse;
  }
  return out;
}

// Decodes exactly M steps for every query; returns up to k hits per query.
inline std::vector<std::vector<Hit>> constrained_beam_search(ModelState& m,
                                                             const std::vector<TokenSeq>& queries,
                                                             const DocIdTrie& trie, int beam, int k) {
  require(beam >= 1, "beam search: beam must be >= 1");
  require(k >= 1, "beam search: k must be >= 1");
  require(trie.size() > 0, "beam search: empty docid trie");
  require(trie.M() == m.cfg.M, "beam search: trie depth differs from M");
  const std::size_t nq = queries.size();
  std::vector<std::vector<Hit>> beams(nq, std::vector<Hit>{Hit{}});
  if (nq == 0) return {};

  ag::Tape t(false);
  Encoded enc = encode(t, m, queries);
  for (int p = 1; p <= m.cfg.M; ++p) {
    std::vector<std::vector<int>> prefixes;
    std::vector<int> kv_of;
    for (std::size_t q = 0; q < nq; ++q)
      for (const Hit& h : beams[q]) {
        prefixes.push_back(h.codes);
        kv_of.push_back(static_cast<int>(q));
      }
    ag::Tape step(false);
    // Reuse the encoder output by copying it into this step's tape.
    Encoded e2 = enc;
    e2.out = step.constant(t.value(enc.out));
    Decoded d = decode(step, m, e2, prefixes, kv_of);
    std::vector<int> last;
    for (std::size_t s = 0; s < prefixes.size(); ++s) last.push_back(static_cast<int>(s) * d.P + d.P - 1);
    ag::Var h = ag::select_rows(step, d.hidden, last);
    Scored sc = score_rows(step, m, h, std::vector<int>(last.size(), p));
    const Mat lp = position_log_probs(m, step.value(sc.logits), sc, p);

    std::size_t row = 0;
    for (std::size_t q = 0; q < nq; ++q) {
      std::vector<Hit> cand;
      for (const Hit& hb : beams[q]) {
        for (int c : trie.children(hb.codes)) {
          Hit n = hb;
          n.codes.push_back(c);
          n.score += lp(row, c - 1);
          cand.push_back(std::move(n));
        }
        ++row;
      }
      const std::size_t keep = std::min<std::size_t>(cand.size(), static_cast<std::size_t>(beam));
      std::partial_sort(cand.begin(), cand.begin() + keep, cand.end(), hit_before);
      cand.resize(keep);
      beams[q] = std::move(cand);
    }
  }
  for (auto& b : beams)
    if (static_cast<int>(b.size()) > k) b.resize(k);
  return beams;
}

// Sum of teacher-forced per-position log-probabilities of each docid.
inline std::vector<double> score_docids(ModelState& m, const TokenSeq& query,
                                        const std::vector<std::vector<int>>& docids) {
  ag::Tape t(false);
  std::vector<TokenSeq> qs(docids.size(), query);
  TeacherForced tf = teacher_forced(t, m, qs, docids);
  const Mat& z = t.value(tf.scored.logits);
  std::vector<double> out(docids.size(), 0.0);
  for (std::size_t s = 0; s < docids.size(); ++s)
    for (int p = 1; p <= m.cfg.M; ++p) {
      const std::size_t r = s * m.cfg.M + p - 1;
      const auto seg = tf.scored.segs[r];
      out[s] += z(r, tf.gold[r]) - log_sum_exp(z.row(r).segment(seg.begin, seg.end - seg.begin));
    }
  return out;
}

}  // namespace mixdsi
