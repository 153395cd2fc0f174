#pragma once

// Residual-quantization codebooks, docid assignment and the per-position
// vocabulary masks used for constrained decoding.

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "mixdsi/common.hpp"
#include "mixdsi/io.hpp"

namespace mixdsi {

struct RQCodebooks {
  int M = 0;
  int K = 0;
  int dim = 0;
  std::vector<Mat> centroids;  // M entries, each K x dim

  void validate() const {
    require(M >= 1, "RQCodebooks: M must be >= 1");
    require(K >= 1, "RQCodebooks: K must be >= 1");
    require(static_cast<int>(centroids.size()) == M, "RQCodebooks: codebook count != M");
    for (const Mat& c : centroids) {
      require(c.rows() == K && c.cols() == dim, "RQCodebooks: centroid shape mismatch");
      if (!c.allFinite()) throw NumericalError("RQCodebooks: non-finite centroid");
    }
  }

  // Sum of the first `levels` selected centroids; codes are 1-based.
  RowVec reconstruct(const std::vector<int>& codes, int levels = -1) const {
    if (levels < 0) levels = M;
    RowVec r = RowVec::Zero(dim);
    for (int m = 0; m < levels; ++m) r += centroids[m].row(codes[m] - 1);
    return r;
  }
};

struct DocId {
  std::vector<int> codes;  // length M, each in [1, K]
  std::string doc_ref;
};

// Layout of W_RQ: the text vocabulary followed by M segments of K code tokens.
struct VocabLayout {
  int base_size = 0;
  int M = 0;
  int K = 0;

  int total() const { return base_size + M * K; }
  // Start of codebook `position` (1-based).
  int segment_offset(int position) const { return base_size + (position - 1) * K; }
  int token_of(int position, int code) const { return segment_offset(position) + code - 1; }
};

// ---------------------------------------------------------------------------
// k-means

namespace detail {

inline int nearest_row(const Mat& centroids, const RowVec& x, double* dist = nullptr) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    const double d = (centroids.row(k) - x).squaredNorm();
    if (d < best_d) {  // strict: lowest index wins ties
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  if (dist) *dist = best_d;
  return best;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding. Empty clusters are reseeded from the
// point farthest from its current centroid.
inline Mat kmeans(const Mat& data, int K, int iters, Rng& rng) {
  const Eigen::Index n = data.rows();
  require(n >= K, "kmeans: fewer points than centroids");
  require(iters >= 1, "kmeans: iters must be >= 1");
  Mat C(K, data.cols());

  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  C.row(0) = data.row(pick(rng));
  Vec d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = (data.row(i) - C.row(0)).squaredNorm();
  for (int k = 1; k < K; ++k) {
    const double total = d2.sum();
    Eigen::Index chosen = 0;
    if (total <= 0.0) {
      chosen = pick(rng);  // all points coincide with chosen centroids
    } else {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng), acc = 0.0;
      chosen = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= r && d2[i] > 0.0) {
          chosen = i;
          break;
        }
      }
    }
    C.row(k) = data.row(chosen);
    for (Eigen::Index i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], (data.row(i) - C.row(k)).squaredNorm());
  }

  std::vector<int> assign(n, -1);
  for (int it = 0; it < iters; ++it) {
    bool changed = false;
    Vec dist(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      double d;
      const int a = detail::nearest_row(C, data.row(i), &d);
      dist[i] = d;
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    Mat sums = Mat::Zero(K, data.cols());
    std::vector<int> counts(K, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[i]) += data.row(i);
      ++counts[assign[i]];
    }
    for (int k = 0; k < K; ++k) {
      if (counts[k] > 0) {
        C.row(k) = sums.row(k) / counts[k];
        continue;
      }
      Eigen::Index far = 0;
      dist.maxCoeff(&far);
      C.row(k) = data.row(far);
      dist[far] = 0.0;
      changed = true;
    }
    if (!changed && it > 0) break;
  }
  return C;
}

inline RQCodebooks train_codebooks(const Mat& embeddings, int M, int K, int iters, uint64_t seed) {
  require(M >= 1, "train_codebooks: M must be >= 1");
  require(K >= 1, "train_codebooks: K must be >= 1");
  require(embeddings.rows() >= K, "train_codebooks: fewer embeddings than K");
  require(iters >= 1, "train_codebooks: iters must be >= 1");
  if (!embeddings.allFinite()) throw NumericalError("train_codebooks: non-finite embedding");

  RQCodebooks cb;
  cb.M = M;
  cb.K = K;
  cb.dim = static_cast<int>(embeddings.cols());
  Mat residual = embeddings;
  for (int m = 0; m < M; ++m) {
    Rng rng(derive_seed(seed, {0x5251ULL, static_cast<uint64_t>(m)}));
    Mat C = kmeans(residual, K, iters, rng);
    for (Eigen::Index i = 0; i < residual.rows(); ++i)
      residual.row(i) -= C.row(detail::nearest_row(C, residual.row(i)));
    cb.centroids.push_back(std::move(C));
  }
  return cb;
}

// Greedy per-level nearest-centroid assignment; returns 1-based codes.
inline std::vector<int> encode(const RowVec& embedding, const RQCodebooks& cb) {
  require(embedding.size() == cb.dim, "encode: embedding dimension mismatch");
  std::vector<int> codes(cb.M);
  RowVec r = embedding;
  for (int m = 0; m < cb.M; ++m) {
    const int k = detail::nearest_row(cb.centroids[m], r);
    codes[m] = k + 1;
    r -= cb.centroids[m].row(k);
  }
  return codes;
}

inline double reconstruction_mse(const Mat& embeddings, const RQCodebooks& cb, int levels) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    const auto codes = encode(embeddings.row(i), cb);
    total += (embeddings.row(i) - cb.reconstruct(codes, levels)).squaredNorm();
  }
  return total / static_cast<double>(embeddings.rows());
}

// ---------------------------------------------------------------------------
// Docid table

class DocIdTable {
 public:
  DocIdTable() = default;
  explicit DocIdTable(int M) : M_(M) {}

  int M() const { return M_; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<DocId>& entries() const { return entries_; }

  void add(DocId id) {
    require(static_cast<int>(id.codes.size()) == M_, "DocIdTable: code length != M");
    require(!by_key_.count(id.doc_ref), "DocIdTable: duplicate document key " + id.doc_ref);
    require(!by_codes_.count(id.codes), "DocIdTable: duplicate code sequence for " + id.doc_ref);
    by_key_[id.doc_ref] = entries_.size();
    by_codes_[id.codes] = entries_.size();
    entries_.push_back(std::move(id));
  }

  bool has_key(const std::string& key) const { return by_key_.count(key) > 0; }
  bool has_codes(const std::vector<int>& codes) const { return by_codes_.count(codes) > 0; }
  const DocId& by_key(const std::string& key) const {
    auto it = by_key_.find(key);
    if (it == by_key_.end()) throw DataError("unregistered document key " + key);
    return entries_[it->second];
  }
  const std::string& key_of(const std::vector<int>& codes) const {
    auto it = by_codes_.find(codes);
    if (it == by_codes_.end()) throw DataError("unregistered docid");
    return entries_[it->second].doc_ref;
  }

  std::string to_tsv() const {
    std::string out;
    for (const DocId& d : entries_) {
      out += d.doc_ref;
      out += '\t';
      for (std::size_t m = 0; m < d.codes.size(); ++m) {
        if (m) out += ',';
        out += std::to_string(d.codes[m]);
      }
      out += '\n';
    }
    return out;
  }

  static DocIdTable from_tsv(const std::string& text, int K) {
    DocIdTable table;
    bool first = true;
    for (const auto& line : io::split(text, '\n')) {
      if (line.empty()) continue;
      const auto cols = io::split(line, '\t');
      require_data(cols.size() == 2, "docid TSV: expected two columns");
      DocId id;
      id.doc_ref = cols[0];
      for (const auto& c : io::split(cols[1], ',')) {
        const int code = std::stoi(c);
        require_data(code >= 1 && code <= K, "docid TSV: code out of range");
        id.codes.push_back(code);
      }
      if (first) {
        table.M_ = static_cast<int>(id.codes.size());
        first = false;
      }
      require_data(static_cast<int>(id.codes.size()) == table.M_, "docid TSV: ragged codes");
      table.add(std::move(id));
    }
    return table;
  }

 private:
  int M_ = 0;
  std::vector<DocId> entries_;
  std::unordered_map<std::string, std::size_t> by_key_;
  std::map<std::vector<int>, std::size_t> by_codes_;
};

namespace detail {

// Level-wise depth-first search in nearest-centroid order for an unused code
// sequence. The first leaf visited is the greedy encoding.
class UniqueAssigner {
 public:
  explicit UniqueAssigner(const RQCodebooks& cb) : cb_(cb) {}

  std::vector<int> assign(const RowVec& e) {
    std::vector<int> prefix;
    if (!search(0, e, prefix))
      throw DataError("assign_unique_docids: code space exhausted for colliding prefix");
    mark(prefix);
    return prefix;
  }

 private:
  bool search(int level, const RowVec& residual, std::vector<int>& prefix) {
    if (full(prefix)) return false;
    const Mat& C = cb_.centroids[level];
    std::vector<std::pair<double, int>> order;
    order.reserve(C.rows());
    for (Eigen::Index k = 0; k < C.rows(); ++k)
      order.emplace_back((C.row(k) - residual).squaredNorm(), static_cast<int>(k));
    std::stable_sort(order.begin(), order.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [d, k] : order) {
      prefix.push_back(k + 1);
      if (level + 1 == cb_.M) {
        if (!used_.count(prefix)) return true;
      } else if (search(level + 1, residual - C.row(k), prefix)) {
        return true;
      }
      prefix.pop_back();
    }
    return false;
  }

  bool full(const std::vector<int>& prefix) const {
    auto it = counts_.find(prefix);
    if (it == counts_.end()) return false;
    double cap = 1.0;
    for (std::size_t m = prefix.size(); m < static_cast<std::size_t>(cb_.M); ++m) cap *= cb_.K;
    return static_cast<double>(it->second) >= cap;
  }

  void mark(const std::vector<int>& codes) {
    used_.insert(codes);
    for (std::size_t m = 0; m <= codes.size(); ++m)
      ++counts_[std::vector<int>(codes.begin(), codes.begin() + m)];
  }

  const RQCodebooks& cb_;
  std::set<std::vector<int>> used_;
  std::map<std::vector<int>, long long> counts_;
};

}  // namespace detail

// Assigns distinct code sequences in ascending key order. A collision moves the
// last code to the nearest unused centroid; a full level cascades upward.
inline DocIdTable assign_unique_docids(const std::map<std::string, RowVec>& embeddings,
                                       const RQCodebooks& cb) {
  cb.validate();
  DocIdTable table(cb.M);
  detail::UniqueAssigner assigner(cb);
  for (const auto& [key, e] : embeddings) {
    require(e.size() == cb.dim, "assign_unique_docids: embedding dimension mismatch");
    table.add(DocId{assigner.assign(e), key});
  }
  return table;
}

// ---------------------------------------------------------------------------
// Masks

inline std::vector<std::uint8_t> position_mask(int position, const VocabLayout& layout) {
  require(position >= 1 && position <= layout.M, "position_mask: position out of range");
  std::vector<std::uint8_t> mask(layout.total(), 0);
  const int off = layout.segment_offset(position);
  std::fill(mask.begin() + off, mask.begin() + off + layout.K, 1);
  return mask;
}

inline Vec apply_mask(const Vec& logits, const std::vector<std::uint8_t>& mask) {
  require(logits.size() == static_cast<Eigen::Index>(mask.size()), "apply_mask: length mismatch");
  Vec out = logits;
  for (std::size_t j = 0; j < mask.size(); ++j)
    if (!mask[j]) out[j] = kMaskedLogit;
  return out;
}

// Scalar std::exp on purpose: vectorized exp clamps very negative inputs and
// would leave ~1e-308 mass on masked entries instead of exact zeros.
inline Vec softmax(const Vec& logits) {
  const double mx = logits.maxCoeff();
  Vec e(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) e[i] = std::exp(logits[i] - mx);
  return e / e.sum();
}

// ---------------------------------------------------------------------------
// Serialization

inline std::string save_codebooks(const RQCodebooks& cb) {
  io::Writer w;
  w.bytes("RQCB");
  w.pod<uint32_t>(1);
  w.pod<uint32_t>(cb.M);
  w.pod<uint32_t>(cb.K);
  w.pod<uint32_t>(cb.dim);
  for (const Mat& c : cb.centroids)
    for (Eigen::Index i = 0; i < c.size(); ++i) w.pod<double>(c.data()[i]);
  return w.data();
}

inline RQCodebooks load_codebooks(std::string_view bytes) {
  io::Reader r(bytes);
  if (r.bytes(4) != "RQCB") throw DataError("codebooks: bad magic");
  if (r.pod<uint32_t>() != 1) throw DataError("codebooks: unsupported version");
  RQCodebooks cb;
  cb.M = static_cast<int>(r.pod<uint32_t>());
  cb.K = static_cast<int>(r.pod<uint32_t>());
  cb.dim = static_cast<int>(r.pod<uint32_t>());
  for (int m = 0; m < cb.M; ++m) {
    Mat c(cb.K, cb.dim);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = r.pod<double>();
    cb.centroids.push_back(std::move(c));
  }
  if (!r.done()) throw DataError("codebooks: trailing bytes");
  cb.validate();
  return cb;
}

// Embedding matrix file: {dim u32, count u64, float width u32} then row data.
inline std::string save_embeddings(const Mat& e, int width = 8) {
  require(width == 4 || width == 8, "embeddings: width must be 4 or 8");
  io::Writer w;
  w.pod<uint32_t>(static_cast<uint32_t>(e.cols()));
  w.pod<uint64_t>(static_cast<uint64_t>(e.rows()));
  w.pod<uint32_t>(static_cast<uint32_t>(width));
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    if (width == 8)
      w.pod<double>(e.data()[i]);
    else
      w.pod<float>(static_cast<float>(e.data()[i]));
  }
  return w.data();
}

inline Mat load_embeddings(std::string_view bytes) {
  io::Reader r(bytes);
  const auto dim = r.pod<uint32_t>();
  const auto count = r.pod<uint64_t>();
  const auto width = r.pod<uint32_t>();
  if (width != 4 && width != 8) throw DataError("embeddings: unsupported float width");
  Mat e(static_cast<Eigen::Index>(count), dim);
  for (Eigen::Index i = 0; i < e.size(); ++i)
    e.data()[i] = width == 8 ? r.pod<double>() : static_cast<double>(r.pod<float>());
  if (!r.done()) throw DataError("embeddings: trailing bytes");
  return e;
}

}  // namespace mixdsi
