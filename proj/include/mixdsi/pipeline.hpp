#pragma once

// End-to-end experiment: data -> RQ docids -> D0 pretraining -> continual
// indexing sessions (scan, expand, train, checkpoint, evaluate) -> reports.
//
// Run directory layout:
//   config.json  manifest.json
//   data/d{t}/{docs,train,test}.jsonl, data/meta.json
//   rq/{codebooks.bin,docids.tsv,embeddings_d0.bin}
//   ckpt/t{t}.ckpt
//   logs/train_t{t}.csv, logs/scan_t{t}.csv
//   eval/t{t}.csv, eval/t{t}_d{i}.csv
//   reports/{pmatrix,cl_summary,ood_report,experts}.csv, reports/routing_t{t}.csv

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixdsi/checkpoint.hpp"
#include "mixdsi/config.hpp"
#include "mixdsi/corpora.hpp"
#include "mixdsi/decoding.hpp"
#include "mixdsi/io.hpp"
#include "mixdsi/metrics.hpp"
#include "mixdsi/rq_codebook.hpp"
#include "mixdsi/scan.hpp"
#include "mixdsi/training.hpp"

namespace mixdsi {

namespace fs = std::filesystem;

using Progress = std::function<void(const std::string&)>;

struct RunDir {
  fs::path root;
  fs::path config() const { return root / "config.json"; }
  fs::path manifest() const { return root / "manifest.json"; }
  fs::path data() const { return root / "data"; }
  fs::path rq() const { return root / "rq"; }
  fs::path codebooks() const { return rq() / "codebooks.bin"; }
  fs::path docids() const { return rq() / "docids.tsv"; }
  fs::path ckpt(int t) const { return root / "ckpt" / ("t" + std::to_string(t) + ".ckpt"); }
  fs::path train_log(int t) const { return root / "logs" / ("train_t" + std::to_string(t) + ".csv"); }
  fs::path scan_log(int t) const { return root / "logs" / ("scan_t" + std::to_string(t) + ".csv"); }
  fs::path eval(int t) const { return root / "eval" / ("t" + std::to_string(t) + ".csv"); }
  fs::path eval_detail(int t, int i) const {
    return root / "eval" / ("t" + std::to_string(t) + "_d" + std::to_string(i) + ".csv");
  }
  fs::path reports() const { return root / "reports"; }
};

// ---------------------------------------------------------------------------
// Manifest: config hash, completed stages and a checksum per artifact.

class Manifest {
 public:
  static Manifest load_or_new(const RunDir& dir, const ExperimentConfig& cfg) {
    Manifest m;
    m.dir_ = dir;
    m.j_ = {{"config_hash", config_hash(cfg)},
            {"seed", cfg.seed},
            {"mode", to_string(cfg.mode)},
            {"stages", nlohmann::json::array()},
            {"files", nlohmann::json::object()}};
    if (fs::exists(dir.manifest())) {
      try {
        auto j = nlohmann::json::parse(io::read_file(dir.manifest()));
        if (j.value("config_hash", "") == m.j_["config_hash"]) m.j_ = std::move(j);
      } catch (const nlohmann::json::exception&) {
        // unreadable manifest: start over
      }
    }
    return m;
  }

  // A stage counts as done when recorded and all its files still match.
  bool done(const std::string& stage) const {
    if (!j_.contains("stage_files") || !j_["stage_files"].contains(stage)) return false;
    for (const auto& f : j_["stage_files"][stage]) {
      const fs::path p = dir_.root / f.get<std::string>();
      if (!fs::exists(p)) return false;
      if (j_["files"].value(f.get<std::string>(), "") != io::hex64(io::fnv1a(io::read_file(p)))) return false;
    }
    return true;
  }

  void complete(const std::string& stage, const std::vector<fs::path>& files) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& p : files) {
      const std::string rel = fs::relative(p, dir_.root).generic_string();
      j_["files"][rel] = io::hex64(io::fnv1a(io::read_file(p)));
      list.push_back(rel);
    }
    j_["stage_files"][stage] = list;
    auto& st = j_["stages"];
    if (std::find(st.begin(), st.end(), stage) == st.end()) st.push_back(stage);
    save();
  }

  void forget_from(int t) {
    if (!j_.contains("stage_files")) return;
    for (auto it = j_["stage_files"].begin(); it != j_["stage_files"].end();) {
      const std::string k = it.key();
      if (k.size() > 1 && k[0] == 't' && std::stoi(k.substr(1)) >= t) it = j_["stage_files"].erase(it);
      else ++it;
    }
    save();
  }

  void save() const { io::write_file(dir_.manifest(), j_.dump(2) + "\n"); }
  const nlohmann::json& json() const { return j_; }

 private:
  RunDir dir_;
  nlohmann::json j_;
};

// ---------------------------------------------------------------------------
// Data

inline std::vector<Snapshot> generate_run_corpora(const ExperimentConfig& cfg) {
  return generate_corpora(cfg.corpus, derive_seed(cfg.seed, {0x64617461ULL}));
}

inline std::vector<fs::path> make_data(const ExperimentConfig& cfg, const RunDir& dir) {
  const auto snaps = generate_run_corpora(cfg);
  std::vector<fs::path> files;
  for (const auto& s : snaps) {
    write_snapshot(dir.data(), s);
    for (const char* f : {"docs.jsonl", "train.jsonl", "test.jsonl"}) files.push_back(snapshot_dir(dir.data(), s.timestep) / f);
  }
  io::write_file(dir.data() / "meta.json", corpora_meta(snaps, cfg.corpus).dump(2) + "\n");
  files.push_back(dir.data() / "meta.json");
  return files;
}

inline std::vector<Snapshot> load_snapshots(const ExperimentConfig& cfg, const RunDir& dir) {
  std::vector<Snapshot> out;
  for (int t = 0; t <= cfg.corpus.snapshots(); ++t) out.push_back(read_snapshot(dir.data(), t, cfg.corpus.vocab_size()));
  // The schedule flag and cluster list live in the metadata file.
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_file(dir.data() / "meta.json"));
    require_data(meta.at("snapshots").size() == out.size(), "meta.json: snapshot count mismatch");
    for (std::size_t t = 0; t < out.size(); ++t) {
      out[t].ood = meta["snapshots"][t].at("ood").get<bool>();
      out[t].clusters = meta["snapshots"][t].at("clusters").get<std::vector<int>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("meta.json: ") + e.what());
  }
  std::set<std::string> keys;
  for (const auto& s : out)
    for (const auto& d : s.docs) require_data(keys.insert(d.key).second, "document key " + d.key + " repeats across snapshots");
  return out;
}

// ---------------------------------------------------------------------------
// RQ docids. The dense encoder is the untrained backbone (no experts); the
// codebooks are fit on D0 once and later documents are encoded with them.

inline ModelState rq_encoder_model(const ExperimentConfig& cfg) {
  TransformerConfig mc = cfg.resolved_model();
  mc.initial_experts = 0;
  mc.router = RouterKind::cosine;
  return init_model(mc);
}

struct RqArtifacts {
  RQCodebooks codebooks;
  DocIdTable table;
};

inline RqArtifacts build_rq(const ExperimentConfig& cfg, const std::vector<Snapshot>& snaps, ModelState& encoder,
                            Mat* d0_embeddings = nullptr) {
  std::vector<TokenSeq> d0;
  for (const auto& d : snaps.at(0).docs) d0.push_back(d.tokens);
  const Mat E0 = embed_documents(encoder, d0);
  RqArtifacts out;
  out.codebooks = train_codebooks(E0, cfg.model.M, cfg.model.K, cfg.rq_iters, derive_seed(cfg.seed, {0x7271ULL}));
  std::map<std::string, RowVec> emb;
  for (std::size_t i = 0; i < snaps[0].docs.size(); ++i) emb[snaps[0].docs[i].key] = E0.row(i);
  for (std::size_t t = 1; t < snaps.size(); ++t) {
    std::vector<TokenSeq> docs;
    for (const auto& d : snaps[t].docs) docs.push_back(d.tokens);
    const Mat E = embed_documents(encoder, docs);
    for (std::size_t i = 0; i < docs.size(); ++i) emb[snaps[t].docs[i].key] = E.row(i);
  }
  // Keys ascend with arrival order, so one pass in key order matches assigning
  // each snapshot's documents as it arrives.
  out.table = assign_unique_docids(emb, out.codebooks);
  if (d0_embeddings) *d0_embeddings = E0;
  return out;
}

inline std::vector<fs::path> write_rq(const RunDir& dir, const RqArtifacts& rq, const Mat& e0) {
  io::write_file(dir.codebooks(), save_codebooks(rq.codebooks));
  io::write_file(dir.docids(), rq.table.to_tsv());
  io::write_file(dir.rq() / "embeddings_d0.bin", save_embeddings(e0));
  return {dir.codebooks(), dir.docids(), dir.rq() / "embeddings_d0.bin"};
}

inline RqArtifacts read_rq(const RunDir& dir, const ExperimentConfig& cfg) {
  RqArtifacts rq;
  rq.codebooks = load_codebooks(io::read_file(dir.codebooks()));
  require_data(rq.codebooks.M == cfg.model.M && rq.codebooks.K == cfg.model.K && rq.codebooks.dim == cfg.model.dim,
               "codebooks do not match the configured M, K and dim");
  rq.table = DocIdTable::from_tsv(io::read_file(dir.docids()), cfg.model.K);
  return rq;
}

// ---------------------------------------------------------------------------
// Training

struct Example {
  TokenSeq input;
  std::vector<int> codes;
};

// Indexing examples (document -> docid) plus pseudo-queries.
inline std::vector<Example> examples_for(const Snapshot& s, const DocIdTable& table) {
  std::vector<Example> out;
  for (const auto& d : s.docs) out.push_back({d.tokens, table.by_key(d.key).codes});
  for (const auto& q : s.train) out.push_back({q.tokens, table.by_key(q.gold).codes});
  return out;
}

inline int steps_for(std::size_t n, const StageConfig& st) {
  return st.epochs * static_cast<int>((n + st.batch - 1) / st.batch);
}

inline std::string train_log_csv(const std::vector<StepRecord>& log) {
  std::string out = "step,ce,aux,kl,total,grad_norm\n";
  for (const auto& r : log)
    out += std::to_string(r.step) + "," + io::fmt_double(r.terms.ce) + "," + io::fmt_double(r.terms.aux) + "," +
           io::fmt_double(r.terms.kl) + "," + io::fmt_double(r.terms.total) + "," + io::fmt_double(r.grad_norm) + "\n";
  return out;
}

inline std::vector<StepRecord> train_stage(ModelState& m, ModelState* prev, const std::vector<Example>& data,
                                           const StageConfig& st, const LossConfig& lc, const ExpansionPolicy* policy,
                                           uint64_t seed, const Progress& progress = {}) {
  std::vector<StepRecord> log;
  if (data.empty() || st.epochs == 0) return log;
  AdamW opt(st.opt, steps_for(data.size(), st));
  Rng rng(seed);
  std::vector<std::size_t> order(data.size());
  for (int ep = 0; ep < st.epochs; ++ep) {
    // Encoder inputs pad to the batch maximum, so batches are grouped by
    // input length (documents vs queries) and the batch order is shuffled.
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return data[a].input.size() < data[b].input.size();
    });
    std::vector<std::size_t> starts;
    for (std::size_t start = 0; start < order.size(); start += st.batch) starts.push_back(start);
    std::shuffle(starts.begin(), starts.end(), rng);
    double ce = 0.0;
    int nb = 0;
    for (std::size_t start : starts) {
      Batch b;
      for (std::size_t j = start; j < std::min(order.size(), start + st.batch); ++j) {
        b.queries.push_back(data[order[j]].input);
        b.codes.push_back(data[order[j]].codes);
      }
      log.push_back(train_step(m, b, prev, lc, opt, policy));
      ce += log.back().terms.ce;
      ++nb;
    }
    if (progress) progress("  epoch " + std::to_string(ep + 1) + "/" + std::to_string(st.epochs) + " ce " + io::fmt_double(ce / nb).substr(0, 8));
  }
  return log;
}

inline LossConfig loss_for_pretrain(const ExperimentConfig& cfg, const ModelState& m) {
  LossConfig lc = cfg.loss;
  lc.use_kl = false;
  lc.router_loss = m.cfg.router == RouterKind::softmax ? RouterLoss::load_balance : RouterLoss::aux;
  return lc;
}

inline LossConfig loss_for_session(const ExperimentConfig& cfg) {
  LossConfig lc = cfg.loss;
  switch (cfg.mode) {
    case Mode::base:
      lc.router_loss = RouterLoss::none;
      lc.use_kl = false;
      break;
    case Mode::naive_expansion:
      lc.router_loss = RouterLoss::load_balance;
      break;
    default:
      lc.router_loss = RouterLoss::aux;
  }
  return lc;
}

// Everything that determines the pretrained checkpoint. Variants without
// experts share it regardless of router kind, which is applied after loading.
inline std::string pretrain_key(const ExperimentConfig& cfg) {
  nlohmann::json j = to_json(cfg);
  TransformerConfig mc = cfg.resolved_model();
  nlohmann::json k;
  k["seed"] = cfg.seed;
  k["corpus"] = j["corpus"];
  k["corpus"].erase("ood_schedule");  // D0 and its docids do not depend on it
  k["model"] = j["model"];
  k["model"]["initial_experts"] = mc.initial_experts;
  k["router"] = mc.initial_experts > 0 ? to_string(mc.router) : "none";
  k["rq"] = j["rq"];
  k["pretrain"] = j["pretrain"];
  k["loss"] = {{"alpha1", cfg.loss.alpha1}, {"lb_coef", cfg.loss.lb_coef}, {"aux_detach", cfg.loss.aux_detach}};
  k["ood"] = {{"ema_decay", cfg.ood.ema_decay}, {"temperature", cfg.ood.temperature},
              {"statistic", to_string(cfg.ood.statistic)}};
  k["mask"] = cfg.mask;
  k["slow_learner_factor"] = cfg.slow_learner_factor;
  return io::hex64(io::fnv1a(k.dump()));
}

inline void apply_router_kind(ModelState& m, RouterKind kind) {
  m.cfg.router = kind;
  for (int l = 0; l < m.n_mix(); ++l) {
    auto& r = m.mix(l).router;
    require(r.columns.empty() || r.kind == kind, "cannot change the router kind of a populated layer");
    r.kind = kind;
  }
}

inline ModelState pretrain_model(const ExperimentConfig& cfg, const std::vector<Snapshot>& snaps,
                                 const RqArtifacts& rq, std::vector<StepRecord>* log, const Progress& progress = {}) {
  ModelState m = init_model(cfg.resolved_model());
  m.mask_enabled = cfg.mask;
  m.slow_learner_factor = cfg.slow_learner_factor;
  load_rq_rows(m, rq.codebooks);
  set_pretrain_trainable(m, true);
  const auto lc = loss_for_pretrain(cfg, m);
  auto out = train_stage(m, nullptr, examples_for(snaps[0], rq.table), cfg.pretrain, lc, &cfg.ood,
                         derive_seed(cfg.seed, {0x7074ULL}), progress);
  if (log) *log = std::move(out);
  m.timestep = 0;
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation

struct QueryResult {
  std::string qid, gold;
  int rank = 0;  // 1-based, 0 when absent from the returned list
  double recall = 0.0, mrr = 0.0;
};

struct EvalScores {
  double recall = 0.0, mrr = 0.0;
  std::vector<QueryResult> rows;
};

// Registered docids for a checkpoint evaluated on D_i: everything indexed up
// to max(t, i), so zero-shot scores are possible for later corpora.
inline DocIdTrie trie_through(const std::vector<Snapshot>& snaps, const DocIdTable& table, int upto) {
  DocIdTrie trie(table.M());
  for (int s = 0; s <= upto; ++s)
    for (const auto& d : snaps[s].docs) trie.insert(table.by_key(d.key).codes);
  return trie;
}

inline EvalScores evaluate_queries(ModelState& m, const std::vector<Query>& queries, const DocIdTable& table,
                                   const DocIdTrie& trie, const ExperimentConfig& cfg) {
  EvalScores out;
  for (std::size_t start = 0; start < queries.size(); start += cfg.eval_chunk) {
    const std::size_t end = std::min(queries.size(), start + cfg.eval_chunk);
    std::vector<TokenSeq> qs;
    for (std::size_t i = start; i < end; ++i) qs.push_back(queries[i].tokens);
    const auto hits = constrained_beam_search(m, qs, trie, cfg.beam, cfg.top_k);
    for (std::size_t i = start; i < end; ++i) {
      std::vector<std::string> ranked;
      for (const Hit& h : hits[i - start]) ranked.push_back(table.key_of(h.codes));
      QueryResult r;
      r.qid = queries[i].qid;
      r.gold = queries[i].gold;
      r.recall = recall_at_k(ranked, r.gold, cfg.top_k);
      r.mrr = mrr_at_k(ranked, r.gold, cfg.top_k);
      const auto it = std::find(ranked.begin(), ranked.end(), r.gold);
      r.rank = it == ranked.end() ? 0 : static_cast<int>(it - ranked.begin()) + 1;
      out.recall += r.recall;
      out.mrr += r.mrr;
      out.rows.push_back(std::move(r));
    }
  }
  if (!queries.empty()) {
    out.recall /= static_cast<double>(queries.size());
    out.mrr /= static_cast<double>(queries.size());
  }
  return out;
}

inline std::string query_results_csv(const EvalScores& s) {
  std::string out = "qid,gold,rank,recall,mrr\n";
  for (const auto& r : s.rows)
    out += r.qid + "," + r.gold + "," + (r.rank ? std::to_string(r.rank) : "NA") + "," + io::fmt_double(r.recall) +
           "," + io::fmt_double(r.mrr) + "\n";
  return out;
}

inline std::string metric_name(const ExperimentConfig& cfg, bool recall) {
  return std::string(recall ? "R@" : "MRR@") + std::to_string(cfg.top_k);
}

// Evaluates checkpoint t on every snapshot's test queries; returns the files written.
inline std::vector<fs::path> evaluate_checkpoint(ModelState& m, int t, const std::vector<Snapshot>& snaps,
                                                 const DocIdTable& table, const ExperimentConfig& cfg,
                                                 const RunDir& dir) {
  std::string summary = "metric,t,i,value\n";
  std::vector<fs::path> files;
  std::vector<std::pair<double, double>> scores;
  for (int i = 0; i < static_cast<int>(snaps.size()); ++i) {
    const DocIdTrie trie = trie_through(snaps, table, std::max(t, i));
    const EvalScores s = evaluate_queries(m, snaps[i].test, table, trie, cfg);
    io::write_file(dir.eval_detail(t, i), query_results_csv(s));
    files.push_back(dir.eval_detail(t, i));
    scores.emplace_back(s.recall, s.mrr);
  }
  for (bool rec : {true, false})
    for (int i = 0; i < static_cast<int>(scores.size()); ++i)
      summary += metric_name(cfg, rec) + "," + std::to_string(t) + "," + std::to_string(i) + "," +
                 io::fmt_double(rec ? scores[i].first : scores[i].second) + "\n";
  io::write_file(dir.eval(t), summary);
  files.push_back(dir.eval(t));
  return files;
}

// Routing shares per corpus indexed so far, on test queries with gold docids.
inline std::string routing_csv(ModelState& m, int t, const std::vector<Snapshot>& snaps, const DocIdTable& table) {
  std::string out = "corpus,layer,expert,created_at,fraction\n";
  for (int i = 0; i <= t && i < static_cast<int>(snaps.size()); ++i) {
    std::vector<TokenSeq> qs;
    std::vector<std::vector<int>> cs;
    for (const auto& q : snaps[i].test) {
      qs.push_back(q.tokens);
      cs.push_back(table.by_key(q.gold).codes);
    }
    if (qs.empty()) continue;
    const auto fr = routing_fractions(m, qs, cs);
    for (int l = 0; l < static_cast<int>(fr.size()); ++l)
      for (int e = 0; e < static_cast<int>(fr[l].size()); ++e)
        out += std::to_string(i) + "," + std::to_string(l) + "," + std::to_string(e) + "," +
               std::to_string(m.mix(l).experts[e].created_at) + "," + io::fmt_double(fr[l][e]) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Continual indexing session

inline std::string scan_csv(const OodScanReport& rep, const std::set<int>& expanded,
                            const std::vector<int>& experts_before) {
  std::string out = "timestep,layer,applicable,n_queries,n_ood,ood_fraction,expanded,experts_before,position_mean,position_tau\n";
  for (const auto& s : rep.layers) {
    std::string means, taus;
    for (double v : s.position_mean) means += (means.empty() ? "" : ";") + io::fmt_double(v);
    for (double v : s.position_tau) taus += (taus.empty() ? "" : ";") + io::fmt_double(v);
    out += std::to_string(rep.timestep) + "," + std::to_string(s.layer) + "," + (s.applicable ? "true" : "false") +
           "," + std::to_string(s.n_queries) + "," + std::to_string(s.n_ood) + "," +
           (s.applicable ? io::fmt_double(s.fraction) : "NA") + "," + (expanded.count(s.layer) ? "true" : "false") +
           "," + std::to_string(experts_before[s.layer]) + "," + (means.empty() ? "NA" : means) + "," +
           (taus.empty() ? "NA" : taus) + "\n";
  }
  return out;
}

// Layers to expand before indexing D_t. A layer without experts cannot
// route at all and is always given one.
inline std::set<int> choose_expansion(const ExperimentConfig& cfg, const ModelState& m, const OodScanReport& rep) {
  std::set<int> out;
  switch (cfg.mode) {
    case Mode::base:
    case Mode::no_expand:
      break;
    case Mode::naive_expansion:
    case Mode::no_ood:
      for (int l = 0; l < m.n_mix(); ++l) out.insert(l);
      break;
    case Mode::full:
    case Mode::no_pretrain:
      out = expansion_decision(rep, cfg.ood);
      break;
  }
  if (cfg.mode != Mode::base && cfg.mode != Mode::no_expand)
    for (int l = 0; l < m.n_mix(); ++l)
      if (m.mix(l).experts.empty()) out.insert(l);
  return out;
}

struct SessionResult {
  OodScanReport scan;
  std::set<int> expanded;
  std::vector<StepRecord> log;
};

inline SessionResult index_session(ModelState& m, int t, const std::vector<Snapshot>& snaps, const DocIdTable& table,
                                   const ExperimentConfig& cfg, const Progress& progress = {}) {
  require(t >= 1 && t < static_cast<int>(snaps.size()), "index: timestep out of range");
  require(m.timestep == t - 1, "index: checkpoint is at timestep " + std::to_string(m.timestep) + ", expected " +
                                   std::to_string(t - 1));
  SessionResult res;
  ModelState prev = clone_model(m);
  const Snapshot& s = snaps[t];

  // Scan the new pseudo-queries.
  std::vector<TokenSeq> qs;
  std::vector<std::vector<int>> cs;
  std::vector<std::size_t> idx(s.train.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (cfg.scan_sample > 0 && static_cast<int>(idx.size()) > cfg.scan_sample) {
    Rng rng(derive_seed(cfg.seed, {0x7363616eULL, static_cast<uint64_t>(t)}));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(cfg.scan_sample);
    std::sort(idx.begin(), idx.end());
  }
  for (std::size_t i : idx) {
    qs.push_back(s.train[i].tokens);
    cs.push_back(table.by_key(s.train[i].gold).codes);
  }
  res.scan = scan_corpus(m, qs, cs, cfg.ood, t);
  res.expanded = choose_expansion(cfg, m, res.scan);
  for (int l : res.expanded) {
    Rng rng(derive_seed(cfg.seed, {0x657870ULL, static_cast<uint64_t>(t), static_cast<uint64_t>(l)}));
    expand_layer_inplace(m.mix(l), t, rng, m.cfg.lora_rank, m.cfg.lora_scale);
  }
  name_params(m);
  if (progress) {
    std::string msg = "  scan t=" + std::to_string(t) + ":";
    for (const auto& ls : res.scan.layers)
      msg += " L" + std::to_string(ls.layer) + "=" + (ls.applicable ? io::fmt_double(ls.fraction).substr(0, 6) : "NA");
    msg += " expanded {";
    for (int l : res.expanded) msg += " " + std::to_string(l);
    progress(msg + " }");
  }

  m.slow_learner_factor = cfg.slow_learner_factor;
  if (cfg.mode == Mode::base) set_all_trainable(m, true);
  else set_continual_trainable(m, t, cfg.slow_learner);
  const LossConfig lc = loss_for_session(cfg);
  res.log = train_stage(m, lc.use_kl ? &prev : nullptr, examples_for(s, table), cfg.index, lc, &cfg.ood,
                        derive_seed(cfg.seed, {0x696478ULL, static_cast<uint64_t>(t)}), progress);
  m.timestep = t;
  return res;
}

// ---------------------------------------------------------------------------
// Reports

inline MetricsMatrix read_pmatrix_row(const std::string& csv, const std::string& metric, MetricsMatrix P) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto f = io::split(line, ',');
    if (f.size() != 4) throw DataError("malformed eval row: " + line);
    if (f[0] != metric) continue;
    P.set(std::stoi(f[1]), std::stoi(f[2]), std::stod(f[3]));
  }
  return P;
}

inline std::vector<fs::path> write_reports(const ExperimentConfig& cfg, const RunDir& dir) {
  const int T = cfg.corpus.snapshots();
  int last = -1;
  while (last + 1 <= T && fs::exists(dir.eval(last + 1))) ++last;
  require_data(last >= 0, "report: no evaluated checkpoints in " + dir.root.string());
  std::vector<fs::path> files;

  std::string pm = "metric,t,i,value\n";
  std::string cl = "metric,AP,BWT,FWT,timestep\n";
  for (bool rec : {true, false}) {
    const std::string name = metric_name(cfg, rec);
    MetricsMatrix P(T + 1);
    for (int t = 0; t <= last; ++t) P = read_pmatrix_row(io::read_file(dir.eval(t)), name, P);
    for (int t = 0; t <= last; ++t)
      for (int i = 0; i <= T; ++i)
        pm += name + "," + std::to_string(t) + "," + std::to_string(i) + "," +
              (P.has(t, i) ? io::fmt_double(P.at(t, i)) : "NA") + "\n";
    for (int t = 0; t <= last; ++t) {
      const ClMetrics c = cl_metrics(P, t, cfg.bwt_restrict_indexed);
      cl += name + "," + io::fmt_double(c.ap) + "," + io::fmt_double(c.bwt) + "," + io::fmt_double(c.fwt) + "," +
            std::to_string(t) + "\n";
    }
  }
  io::write_file(dir.reports() / "pmatrix.csv", pm);
  io::write_file(dir.reports() / "cl_summary.csv", cl);
  files.push_back(dir.reports() / "pmatrix.csv");
  files.push_back(dir.reports() / "cl_summary.csv");

  // OOD report in the layer-wise shape, one row per session and layer.
  std::string ood = "timestep,layer,ood_fraction,n_queries,expanded\n";
  for (int t = 1; t <= last; ++t) {
    if (!fs::exists(dir.scan_log(t))) continue;
    std::istringstream in(io::read_file(dir.scan_log(t)));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto f = io::split(line, ',');
      ood += f[0] + "," + f[1] + "," + f[5] + "," + f[3] + "," + f[6] + "\n";
    }
  }
  io::write_file(dir.reports() / "ood_report.csv", ood);
  files.push_back(dir.reports() / "ood_report.csv");

  std::string ex = "timestep,layer,experts,parameters\n";
  for (int t = 0; t <= last; ++t) {
    ModelState m = read_checkpoint(dir.ckpt(t));
    const auto counts = m.expert_counts();
    const std::size_t params = m.parameter_count();
    for (int l = 0; l < static_cast<int>(counts.size()); ++l)
      ex += std::to_string(t) + "," + std::to_string(l) + "," + std::to_string(counts[l]) + "," +
            std::to_string(params) + "\n";
    const fs::path rp = dir.reports() / ("routing_t" + std::to_string(t) + ".csv");
    if (!fs::exists(rp)) throw DataError("report: missing " + rp.string());
    files.push_back(rp);
  }
  io::write_file(dir.reports() / "experts.csv", ex);
  files.push_back(dir.reports() / "experts.csv");
  return files;
}

// ---------------------------------------------------------------------------
// Orchestration

// Pretraining through an optional cache keyed by pretrain_key; the router kind
// of the mode is applied after loading.
inline ModelState pretrain_cached(const ExperimentConfig& cfg, const std::vector<Snapshot>& snaps,
                                  const RqArtifacts& rq, const fs::path& cache_dir, std::string* log_csv,
                                  const Progress& progress = {}) {
  ModelState m;
  const fs::path cached = cache_dir.empty() ? fs::path{} : cache_dir / ("pretrain-" + pretrain_key(cfg));
  if (!cached.empty() && fs::exists(cached.string() + ".ckpt")) {
    if (progress) progress("pretrain: using cached checkpoint " + cached.filename().string());
    m = read_checkpoint(cached.string() + ".ckpt");
    if (log_csv) *log_csv = io::read_file(cached.string() + ".csv");
  } else {
    if (progress) progress("pretrain: training on D0 (" + std::to_string(cfg.pretrain.epochs) + " epochs)");
    std::vector<StepRecord> log;
    m = pretrain_model(cfg, snaps, rq, &log, progress);
    if (log_csv) *log_csv = train_log_csv(log);
    if (!cached.empty()) {
      write_checkpoint(cached.string() + ".ckpt", m);
      io::write_file(cached.string() + ".csv", train_log_csv(log));
    }
  }
  apply_router_kind(m, cfg.resolved_model().router);
  return m;
}

struct RunOptions {
  bool force = false;
  bool require_existing = false;  // --resume: refuse to start a fresh run
  fs::path cache_dir;  // optional shared cache for pretrained checkpoints
  Progress progress;
};

class Experiment {
 public:
  Experiment(ExperimentConfig cfg, fs::path root, RunOptions opt)
      : cfg_(std::move(cfg)), dir_{std::move(root)}, opt_(std::move(opt)) {
    cfg_.validate();
  }

  // Prepares the run directory. A populated directory is reused only when it
  // holds the same config and `allow_existing` is set; --force wipes it.
  void open(bool allow_existing = true) {
    const std::string cfg_text = to_json(cfg_).dump(2) + "\n";
    const bool populated = fs::exists(dir_.root) && !fs::is_empty(dir_.root);
    if (populated && opt_.force) {
      fs::remove_all(dir_.root);
    } else if (populated && !allow_existing) {
      throw UsageError("output directory " + dir_.root.string() + " already exists; pass --force to overwrite");
    } else if (populated && !(fs::exists(dir_.config()) && io::read_file(dir_.config()) == cfg_text)) {
      throw UsageError("output directory " + dir_.root.string() +
                       " holds a run with a different or missing config; pass --force to overwrite");
    } else if (!populated && opt_.require_existing) {
      throw UsageError("nothing to resume in " + dir_.root.string());
    }
    io::write_file(dir_.config(), cfg_text);
    manifest_ = Manifest::load_or_new(dir_, cfg_);
    manifest_->save();
  }

  void stage_data() {
    if (manifest_->done("data")) return say("data: up to date");
    say("data: generating corpora");
    manifest_->complete("data", make_data(cfg_, dir_));
  }

  void stage_rq() {
    if (manifest_->done("rq")) return say("rq: up to date");
    say("rq: building codebooks and docids");
    const auto snaps = load_snapshots(cfg_, dir_);
    ModelState enc = rq_encoder_model(cfg_);
    Mat e0;
    const auto rq = build_rq(cfg_, snaps, enc, &e0);
    manifest_->complete("rq", write_rq(dir_, rq, e0));
  }

  void stage_pretrain() {
    if (manifest_->done("t0")) return say("pretrain: up to date");
    manifest_->forget_from(0);
    const auto snaps = load_snapshots(cfg_, dir_);
    const auto rq = read_rq(dir_, cfg_);
    std::string log_csv;
    ModelState m = pretrain_cached(cfg_, snaps, rq, opt_.cache_dir, &log_csv, opt_.progress);
    io::write_file(dir_.train_log(0), log_csv);
    finish_checkpoint(m, 0, snaps, rq, {dir_.train_log(0)});
  }

  void stage_index(int t) {
    const std::string stage = "t" + std::to_string(t);
    if (manifest_->done(stage)) return say("index t=" + std::to_string(t) + ": up to date");
    manifest_->forget_from(t);
    require_data(fs::exists(dir_.ckpt(t - 1)), "index: missing checkpoint " + dir_.ckpt(t - 1).string());
    const auto snaps = load_snapshots(cfg_, dir_);
    const auto rq = read_rq(dir_, cfg_);
    ModelState m = read_checkpoint(dir_.ckpt(t - 1));
    say("index t=" + std::to_string(t) + " (" + std::to_string(snaps[t].docs.size()) + " docs, " +
        (snaps[t].ood ? "OOD" : "ID") + " corpus)");
    const SessionResult r = index_session(m, t, snaps, rq.table, cfg_, opt_.progress);
    std::vector<int> before;
    for (const auto& ls : r.scan.layers) before.push_back(m.expert_counts()[ls.layer] - (r.expanded.count(ls.layer) ? 1 : 0));
    io::write_file(dir_.scan_log(t), scan_csv(r.scan, r.expanded, before));
    io::write_file(dir_.train_log(t), train_log_csv(r.log));
    finish_checkpoint(m, t, snaps, rq, {dir_.scan_log(t), dir_.train_log(t)});
  }

  // Re-evaluates every checkpoint present; results are deterministic, so this
  // rewrites identical files.
  void stage_evaluate_all() {
    const auto snaps = load_snapshots(cfg_, dir_);
    const auto rq = read_rq(dir_, cfg_);
    int n = 0;
    for (int t = 0; t <= cfg_.corpus.snapshots() && fs::exists(dir_.ckpt(t)); ++t, ++n) {
      say("eval: checkpoint t=" + std::to_string(t));
      ModelState m = read_checkpoint(dir_.ckpt(t));
      evaluate_checkpoint(m, t, snaps, rq.table, cfg_, dir_);
    }
    require_data(n > 0, "eval: no checkpoints in " + dir_.root.string());
  }

  void stage_report() {
    say("report: writing summaries");
    manifest_->complete("report", write_reports(cfg_, dir_));
  }

  void run_all() {
    stage_data();
    stage_rq();
    stage_pretrain();
    for (int t = 1; t <= cfg_.corpus.snapshots(); ++t) stage_index(t);
    stage_report();
  }

  const RunDir& dir() const { return dir_; }
  const ExperimentConfig& config() const { return cfg_; }

 private:
  void say(const std::string& s) const {
    if (opt_.progress) opt_.progress(s);
  }

  void finish_checkpoint(ModelState& m, int t, const std::vector<Snapshot>& snaps, const RqArtifacts& rq,
                         std::vector<fs::path> files) {
    write_checkpoint(dir_.ckpt(t), m);
    say("  evaluating checkpoint t=" + std::to_string(t));
    for (auto& f : evaluate_checkpoint(m, t, snaps, rq.table, cfg_, dir_)) files.push_back(f);
    const fs::path rp = dir_.reports() / ("routing_t" + std::to_string(t) + ".csv");
    io::write_file(rp, routing_csv(m, t, snaps, rq.table));
    files.push_back(rp);
    files.push_back(dir_.ckpt(t));
    manifest_->complete("t" + std::to_string(t), files);
  }

  ExperimentConfig cfg_;
  RunDir dir_;
  RunOptions opt_;
  std::optional<Manifest> manifest_;
};

}  // namespace mixdsi
