#pragma once

// Synthetic dynamic corpora: documents drawn from latent token clusters,
// pseudo-queries as noisy subsequences of their document.
//
// Token ids: 0 is BOS/pad, 1..n_common are shared filler tokens, then each
// cluster owns a contiguous block of tokens_per_cluster ids.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixdsi/common.hpp"
#include "mixdsi/io.hpp"

namespace mixdsi {

struct Document {
  std::string key;
  TokenSeq tokens;
};

struct Query {
  std::string qid;
  TokenSeq tokens;
  std::string gold;
};

struct Snapshot {
  int timestep = 0;
  bool ood = false;
  std::vector<int> clusters;  // latent clusters the snapshot draws from
  std::vector<Document> docs;
  std::vector<Query> train;
  std::vector<Query> test;
};

struct CorpusConfig {
  int n_clusters = 40;
  int docs_per_cluster = 25;
  int tokens_per_cluster = 20;
  int n_common = 16;
  int doc_len = 24;
  int key_tokens = 6;         // per-document subset of its cluster's tokens
  double common_prob = 0.2;   // chance a document slot holds a filler token
  int query_len = 6;
  double query_noise = 0.15;  // chance a query slot is replaced by a filler token
  int min_overlap = 4;        // query tokens that must occur in the gold document
  int train_queries = 8;
  int test_queries = 2;
  double d0_frac = 0.9;
  double snapshot_frac = 0.025;
  std::vector<bool> ood_schedule{true, false, false, false};  // entry t-1 covers D_t

  int snapshots() const { return static_cast<int>(ood_schedule.size()); }
  int total_docs() const { return n_clusters * docs_per_cluster; }
  int snapshot_docs() const { return static_cast<int>(std::lround(snapshot_frac * total_docs())); }
  int base_clusters() const { return n_clusters - snapshots(); }
  int vocab_size() const { return 1 + n_common + n_clusters * tokens_per_cluster; }
  int cluster_token(int cluster, int j) const { return 1 + n_common + cluster * tokens_per_cluster + j; }

  void validate() const {
    require(n_clusters >= 1 && docs_per_cluster >= 1 && tokens_per_cluster >= 1 && n_common >= 1,
            "corpus: sizes must be positive");
    require(base_clusters() >= 1, "corpus: need more clusters than snapshots");
    require(key_tokens >= 1 && key_tokens <= tokens_per_cluster, "corpus: key_tokens out of range");
    require(doc_len >= 1 && query_len >= 1 && query_len <= doc_len, "corpus: bad lengths");
    require(min_overlap >= 0 && min_overlap <= query_len, "corpus: min_overlap exceeds query_len");
    require(common_prob >= 0.0 && common_prob < 1.0, "corpus: common_prob must be in [0,1)");
    require(query_noise >= 0.0 && query_noise < 1.0, "corpus: query_noise must be in [0,1)");
    require(train_queries >= 1 && test_queries >= 1, "corpus: need train and test queries");
    require(d0_frac > 0.0 && d0_frac <= 1.0 && snapshot_frac > 0.0, "corpus: bad split fractions");
    // D0 fills the base clusters exactly, so its share must match.
    const int d0 = static_cast<int>(std::lround(d0_frac * total_docs()));
    require(d0 == base_clusters() * docs_per_cluster,
            "corpus: d0_frac must equal base_clusters*docs_per_cluster/total (base clusters = n_clusters - snapshots)");
    require(snapshot_docs() >= 1, "corpus: snapshot_frac yields empty snapshots");
  }
};

inline int query_overlap(const TokenSeq& query, const TokenSeq& doc) {
  const std::set<int> in_doc(doc.begin(), doc.end());
  int n = 0;
  for (int t : query) n += in_doc.count(t) ? 1 : 0;
  return n;
}

namespace detail {

inline int uniform(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
inline bool coin(Rng& rng, double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

inline TokenSeq make_document(const CorpusConfig& c, int cluster, Rng& rng) {
  std::vector<int> pool(c.tokens_per_cluster);
  for (int j = 0; j < c.tokens_per_cluster; ++j) pool[j] = c.cluster_token(cluster, j);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(c.key_tokens);
  TokenSeq doc(c.doc_len);
  for (int& t : doc)
    t = coin(rng, c.common_prob) ? uniform(rng, 1, c.n_common) : pool[uniform(rng, 0, c.key_tokens - 1)];
  return doc;
}

// Ordered random subsequence with filler noise, redrawn until it overlaps the
// document enough.
inline TokenSeq make_query(const CorpusConfig& c, const TokenSeq& doc, Rng& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<int> pos(doc.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
    std::shuffle(pos.begin(), pos.end(), rng);
    pos.resize(c.query_len);
    std::sort(pos.begin(), pos.end());
    TokenSeq q;
    for (int p : pos) q.push_back(coin(rng, c.query_noise) ? uniform(rng, 1, c.n_common) : doc[p]);
    if (query_overlap(q, doc) >= c.min_overlap) return q;
  }
  throw DataError("corpus: could not draw a query meeting min_overlap");
}

inline std::string pad(int v, int width) {
  std::string s = std::to_string(v);
  return std::string(std::max(0, width - static_cast<int>(s.size())), '0') + s;
}

}  // namespace detail

// Every snapshot draws from its own RNG stream, so D0 does not depend on the
// OOD schedule.
inline std::vector<Snapshot> generate_corpora(const CorpusConfig& c, uint64_t seed) {
  c.validate();
  std::vector<Snapshot> out;
  int next_doc = 0, next_query = 0;
  auto add_docs = [&](Snapshot& s, const std::vector<int>& clusters_of_docs, Rng& rng) {
    for (int cl : clusters_of_docs) {
      Document d{"doc" + detail::pad(next_doc++, 6), detail::make_document(c, cl, rng)};
      for (int i = 0; i < c.train_queries; ++i)
        s.train.push_back(Query{"q" + detail::pad(next_query++, 7), detail::make_query(c, d.tokens, rng), d.key});
      for (int i = 0; i < c.test_queries; ++i)
        s.test.push_back(Query{"q" + detail::pad(next_query++, 7), detail::make_query(c, d.tokens, rng), d.key});
      s.docs.push_back(std::move(d));
    }
  };

  {
    Rng rng(derive_seed(seed, {0x44, 0}));
    Snapshot s;
    std::vector<int> owners;
    for (int cl = 0; cl < c.base_clusters(); ++cl) {
      s.clusters.push_back(cl);
      for (int i = 0; i < c.docs_per_cluster; ++i) owners.push_back(cl);
    }
    add_docs(s, owners, rng);
    out.push_back(std::move(s));
  }
  for (int t = 1; t <= c.snapshots(); ++t) {
    Rng rng(derive_seed(seed, {0x44, static_cast<uint64_t>(t)}));
    Snapshot s;
    s.timestep = t;
    s.ood = c.ood_schedule[t - 1];
    std::vector<int> owners;
    if (s.ood) {
      const int fresh = c.base_clusters() + t - 1;
      s.clusters = {fresh};
      owners.assign(c.snapshot_docs(), fresh);
    } else {
      std::set<int> used;
      for (int i = 0; i < c.snapshot_docs(); ++i) {
        owners.push_back(detail::uniform(rng, 0, c.base_clusters() - 1));
        used.insert(owners.back());
      }
      s.clusters.assign(used.begin(), used.end());
    }
    add_docs(s, owners, rng);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON-lines files

inline std::string docs_to_jsonl(const std::vector<Document>& docs) {
  std::string out;
  for (const auto& d : docs) out += nlohmann::json{{"key", d.key}, {"tokens", d.tokens}}.dump() + "\n";
  return out;
}

inline std::string queries_to_jsonl(const std::vector<Query>& qs) {
  std::string out;
  for (const auto& q : qs)
    out += nlohmann::json{{"qid", q.qid}, {"tokens", q.tokens}, {"gold", q.gold}}.dump() + "\n";
  return out;
}

namespace detail {

template <typename F>
void for_each_json_line(const std::string& text, const std::string& what, F&& f) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      f(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(what + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline TokenSeq read_tokens(const nlohmann::json& j, int vocab) {
  TokenSeq t = j.at("tokens").get<TokenSeq>();
  for (int v : t)
    if (v < 0 || (vocab > 0 && v >= vocab)) throw DataError("token id " + std::to_string(v) + " out of vocabulary");
  return t;
}

}  // namespace detail

inline std::vector<Document> docs_from_jsonl(const std::string& text, int vocab = 0) {
  std::vector<Document> out;
  detail::for_each_json_line(text, "documents", [&](const nlohmann::json& j) {
    out.push_back(Document{j.at("key").get<std::string>(), detail::read_tokens(j, vocab)});
    if (out.back().tokens.empty()) throw DataError("empty document " + out.back().key);
  });
  return out;
}

inline std::vector<Query> queries_from_jsonl(const std::string& text, int vocab = 0) {
  std::vector<Query> out;
  detail::for_each_json_line(text, "queries", [&](const nlohmann::json& j) {
    out.push_back(Query{j.at("qid").get<std::string>(), detail::read_tokens(j, vocab),
                        j.at("gold").get<std::string>()});
    if (out.back().tokens.empty()) throw DataError("empty query " + out.back().qid);
  });
  return out;
}

inline std::filesystem::path snapshot_dir(const std::filesystem::path& data_dir, int t) {
  return data_dir / ("d" + std::to_string(t));
}

inline void write_snapshot(const std::filesystem::path& data_dir, const Snapshot& s) {
  const auto dir = snapshot_dir(data_dir, s.timestep);
  io::write_file(dir / "docs.jsonl", docs_to_jsonl(s.docs));
  io::write_file(dir / "train.jsonl", queries_to_jsonl(s.train));
  io::write_file(dir / "test.jsonl", queries_to_jsonl(s.test));
}

inline Snapshot read_snapshot(const std::filesystem::path& data_dir, int t, int vocab = 0) {
  const auto dir = snapshot_dir(data_dir, t);
  Snapshot s;
  s.timestep = t;
  s.docs = docs_from_jsonl(io::read_file(dir / "docs.jsonl"), vocab);
  s.train = queries_from_jsonl(io::read_file(dir / "train.jsonl"), vocab);
  s.test = queries_from_jsonl(io::read_file(dir / "test.jsonl"), vocab);
  std::set<std::string> keys;
  for (const auto& d : s.docs) keys.insert(d.key);
  for (const auto* qs : {&s.train, &s.test})
    for (const auto& q : *qs)
      require_data(keys.count(q.gold) > 0, "query " + q.qid + " has gold " + q.gold + " outside snapshot " + std::to_string(t));
  return s;
}

// Cluster metadata alongside the files.
inline nlohmann::json corpora_meta(const std::vector<Snapshot>& snaps, const CorpusConfig& c) {
  nlohmann::json j;
  j["vocab_size"] = c.vocab_size();
  j["snapshots"] = nlohmann::json::array();
  for (const auto& s : snaps)
    j["snapshots"].push_back({{"timestep", s.timestep},
                              {"ood", s.ood},
                              {"clusters", s.clusters},
                              {"docs", s.docs.size()},
                              {"train_queries", s.train.size()},
                              {"test_queries", s.test.size()}});
  return j;
}

}  // namespace mixdsi
