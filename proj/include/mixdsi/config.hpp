#pragma once

// Experiment configuration: one JSON document fully determines a run.
// Missing keys take defaults; unknown keys are rejected so typos surface.

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "mixdsi/corpora.hpp"
#include "mixdsi/model.hpp"
#include "mixdsi/ood_expansion.hpp"
#include "mixdsi/training.hpp"

namespace mixdsi {

enum class Mode { base, naive_expansion, no_expand, no_ood, full, no_pretrain };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::base: return "base";
    case Mode::naive_expansion: return "naive-expansion";
    case Mode::no_expand: return "no-expand";
    case Mode::no_ood: return "no-ood";
    case Mode::full: return "full";
    case Mode::no_pretrain: return "no-pretrain";
  }
  return "?";
}

inline Mode mode_from(const std::string& s) {
  for (Mode m : {Mode::base, Mode::naive_expansion, Mode::no_expand, Mode::no_ood, Mode::full, Mode::no_pretrain})
    if (to_string(m) == s) return m;
  throw UsageError("unknown mode '" + s + "'");
}

struct StageConfig {
  int epochs = 1;
  int batch = 32;
  OptimizerConfig opt;
};

struct ExperimentConfig {
  uint64_t seed = 0;
  Mode mode = Mode::full;
  CorpusConfig corpus;
  TransformerConfig model;  // base_vocab and seed are filled from the corpus and run seed
  int rq_iters = 25;
  StageConfig pretrain{25, 64, {}};
  StageConfig index{30, 16, {}};
  LossConfig loss;
  ExpansionPolicy ood;
  int scan_sample = 0;  // pseudo-queries per scan; 0 scans all
  bool slow_learner = true;
  double slow_learner_factor = 100.0;
  bool mask = true;
  int beam = 10;
  int top_k = 10;
  int eval_chunk = 64;
  bool bwt_restrict_indexed = false;

  TransformerConfig resolved_model() const {
    TransformerConfig m = model;
    m.base_vocab = corpus.vocab_size();
    m.seed = derive_seed(seed, {0x6d6f64656cULL});
    if (mode == Mode::naive_expansion) m.router = RouterKind::softmax;
    // Variants without MixLoRA pretraining start with no experts at all.
    if (mode == Mode::naive_expansion || mode == Mode::no_pretrain) m.initial_experts = 0;
    return m;
  }

  void validate() const {
    corpus.validate();
    resolved_model().validate();
    ood.validate();
    require(rq_iters >= 1, "config: rq.iters must be >= 1");
    for (const StageConfig* s : {&pretrain, &index}) {
      require(s->epochs >= 0 && s->batch >= 1, "config: epochs must be >= 0 and batch >= 1");
      require(s->opt.lr > 0.0 && s->opt.warmup_frac >= 0.0 && s->opt.warmup_frac <= 1.0,
              "config: bad optimizer settings");
    }
    require(slow_learner_factor > 0.0, "config: slow_learner_factor must be positive");
    require(beam >= 1 && top_k >= 1 && beam >= top_k, "config: need beam >= top_k >= 1");
    require(eval_chunk >= 1 && scan_sample >= 0, "config: bad eval/scan sizes");
    require(loss.alpha1 >= 0.0 && loss.alpha2 >= 0.0 && loss.lb_coef >= 0.0, "config: loss weights must be >= 0");
    require(corpus.vocab_size() > 0, "config: empty vocabulary");
    const long capacity = static_cast<long>(std::pow(static_cast<double>(model.K), model.M));
    require(capacity >= corpus.total_docs() + corpus.snapshots() * corpus.snapshot_docs(),
            "config: K^M docid capacity is smaller than the corpus");
  }
};

namespace detail {

// Reads known keys into `out`; throws on keys outside `known`.
template <typename F>
void read_section(const nlohmann::json& j, const std::string& name, const std::set<std::string>& known, F&& f) {
  if (!j.is_object()) throw UsageError("config: section '" + name + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw UsageError("config: unknown key '" + name + "." + it.key() + "'");
  f(j);
}

template <typename T>
void opt_get(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline nlohmann::json stage_json(const StageConfig& s) {
  return {{"epochs", s.epochs},          {"batch", s.batch},
          {"lr", s.opt.lr},              {"weight_decay", s.opt.weight_decay},
          {"warmup_frac", s.opt.warmup_frac}, {"clip", s.opt.clip}};
}

inline void read_stage(const nlohmann::json& j, const std::string& name, StageConfig& s) {
  read_section(j, name, {"epochs", "batch", "lr", "weight_decay", "warmup_frac", "clip"}, [&](const auto& x) {
    opt_get(x, "epochs", s.epochs);
    opt_get(x, "batch", s.batch);
    opt_get(x, "lr", s.opt.lr);
    opt_get(x, "weight_decay", s.opt.weight_decay);
    opt_get(x, "warmup_frac", s.opt.warmup_frac);
    opt_get(x, "clip", s.opt.clip);
  });
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& cc = c.corpus;
  const auto& m = c.model;
  nlohmann::json j;
  j["seed"] = c.seed;
  j["mode"] = to_string(c.mode);
  j["corpus"] = {{"n_clusters", cc.n_clusters},       {"docs_per_cluster", cc.docs_per_cluster},
                 {"tokens_per_cluster", cc.tokens_per_cluster}, {"n_common", cc.n_common},
                 {"doc_len", cc.doc_len},             {"key_tokens", cc.key_tokens},
                 {"common_prob", cc.common_prob},     {"query_len", cc.query_len},
                 {"query_noise", cc.query_noise},     {"min_overlap", cc.min_overlap},
                 {"train_queries", cc.train_queries}, {"test_queries", cc.test_queries},
                 {"d0_frac", cc.d0_frac},             {"snapshot_frac", cc.snapshot_frac}};
  nlohmann::json sched = nlohmann::json::array();
  for (bool b : cc.ood_schedule) sched.push_back(b ? "OOD" : "ID");
  j["corpus"]["ood_schedule"] = sched;
  j["model"] = {{"dim", m.dim},
                {"hidden", m.hidden},
                {"heads", m.heads},
                {"encoder_blocks", m.encoder_blocks},
                {"decoder_blocks", m.decoder_blocks},
                {"n_mix", m.n_mix},
                {"M", m.M},
                {"K", m.K},
                {"max_input_len", m.max_input_len},
                {"dropout", m.dropout},
                {"lora_rank", m.lora_rank},
                {"lora_scale", m.lora_scale},
                {"top_k", m.top_k},
                {"initial_experts", m.initial_experts}};
  j["rq"] = {{"iters", c.rq_iters}};
  j["pretrain"] = detail::stage_json(c.pretrain);
  j["index"] = detail::stage_json(c.index);
  j["loss"] = {{"alpha1", c.loss.alpha1},
               {"alpha2", c.loss.alpha2},
               {"lb_coef", c.loss.lb_coef},
               {"aux_detach", c.loss.aux_detach}};
  j["ood"] = {{"delta", c.ood.delta},
              {"ema_decay", c.ood.ema_decay},
              {"temperature", c.ood.temperature},
              {"statistic", to_string(c.ood.statistic)},
              {"scan_sample", c.scan_sample}};
  j["continual"] = {{"slow_learner", c.slow_learner},
                    {"slow_learner_factor", c.slow_learner_factor},
                    {"mask", c.mask}};
  j["eval"] = {{"beam", c.beam},
               {"top_k", c.top_k},
               {"chunk", c.eval_chunk},
               {"bwt_restrict_indexed", c.bwt_restrict_indexed}};
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::opt_get;
  using detail::read_section;
  ExperimentConfig c;
  try {
    read_section(j, "<root>",
                 {"seed", "mode", "corpus", "model", "rq", "pretrain", "index", "loss", "ood", "continual", "eval"},
                 [&](const auto& x) {
                   opt_get(x, "seed", c.seed);
                   if (x.contains("mode")) c.mode = mode_from(x.at("mode").template get<std::string>());
                 });
    if (j.contains("corpus"))
      read_section(j["corpus"], "corpus",
                   {"n_clusters", "docs_per_cluster", "tokens_per_cluster", "n_common", "doc_len", "key_tokens",
                    "common_prob", "query_len", "query_noise", "min_overlap", "train_queries", "test_queries",
                    "d0_frac", "snapshot_frac", "ood_schedule"},
                   [&](const auto& x) {
                     auto& cc = c.corpus;
                     opt_get(x, "n_clusters", cc.n_clusters);
                     opt_get(x, "docs_per_cluster", cc.docs_per_cluster);
                     opt_get(x, "tokens_per_cluster", cc.tokens_per_cluster);
                     opt_get(x, "n_common", cc.n_common);
                     opt_get(x, "doc_len", cc.doc_len);
                     opt_get(x, "key_tokens", cc.key_tokens);
                     opt_get(x, "common_prob", cc.common_prob);
                     opt_get(x, "query_len", cc.query_len);
                     opt_get(x, "query_noise", cc.query_noise);
                     opt_get(x, "min_overlap", cc.min_overlap);
                     opt_get(x, "train_queries", cc.train_queries);
                     opt_get(x, "test_queries", cc.test_queries);
                     opt_get(x, "d0_frac", cc.d0_frac);
                     opt_get(x, "snapshot_frac", cc.snapshot_frac);
                     if (x.contains("ood_schedule")) {
                       cc.ood_schedule.clear();
                       for (const auto& e : x.at("ood_schedule")) {
                         const auto s = e.template get<std::string>();
                         if (s != "OOD" && s != "ID") throw UsageError("config: ood_schedule entries must be OOD or ID");
                         cc.ood_schedule.push_back(s == "OOD");
                       }
                     }
                   });
    if (j.contains("model"))
      read_section(j["model"], "model",
                   {"dim", "hidden", "heads", "encoder_blocks", "decoder_blocks", "n_mix", "M", "K",
                    "max_input_len", "dropout", "lora_rank", "lora_scale", "top_k", "initial_experts"},
                   [&](const auto& x) {
                     auto& m = c.model;
                     opt_get(x, "dim", m.dim);
                     opt_get(x, "hidden", m.hidden);
                     opt_get(x, "heads", m.heads);
                     opt_get(x, "encoder_blocks", m.encoder_blocks);
                     opt_get(x, "decoder_blocks", m.decoder_blocks);
                     opt_get(x, "n_mix", m.n_mix);
                     opt_get(x, "M", m.M);
                     opt_get(x, "K", m.K);
                     opt_get(x, "max_input_len", m.max_input_len);
                     opt_get(x, "dropout", m.dropout);
                     opt_get(x, "lora_rank", m.lora_rank);
                     opt_get(x, "lora_scale", m.lora_scale);
                     opt_get(x, "top_k", m.top_k);
                     opt_get(x, "initial_experts", m.initial_experts);
                   });
    if (j.contains("rq")) read_section(j["rq"], "rq", {"iters"}, [&](const auto& x) { opt_get(x, "iters", c.rq_iters); });
    if (j.contains("pretrain")) detail::read_stage(j["pretrain"], "pretrain", c.pretrain);
    if (j.contains("index")) detail::read_stage(j["index"], "index", c.index);
    if (j.contains("loss"))
      read_section(j["loss"], "loss", {"alpha1", "alpha2", "lb_coef", "aux_detach"}, [&](const auto& x) {
        opt_get(x, "alpha1", c.loss.alpha1);
        opt_get(x, "alpha2", c.loss.alpha2);
        opt_get(x, "lb_coef", c.loss.lb_coef);
        opt_get(x, "aux_detach", c.loss.aux_detach);
      });
    if (j.contains("ood"))
      read_section(j["ood"], "ood", {"delta", "ema_decay", "temperature", "statistic", "scan_sample"},
                   [&](const auto& x) {
                     opt_get(x, "delta", c.ood.delta);
                     opt_get(x, "ema_decay", c.ood.ema_decay);
                     opt_get(x, "temperature", c.ood.temperature);
                     if (x.contains("statistic"))
                       c.ood.statistic = ema_statistic_from(x.at("statistic").template get<std::string>());
                     opt_get(x, "scan_sample", c.scan_sample);
                   });
    if (j.contains("continual"))
      read_section(j["continual"], "continual", {"slow_learner", "slow_learner_factor", "mask"}, [&](const auto& x) {
        opt_get(x, "slow_learner", c.slow_learner);
        opt_get(x, "slow_learner_factor", c.slow_learner_factor);
        opt_get(x, "mask", c.mask);
      });
    if (j.contains("eval"))
      read_section(j["eval"], "eval", {"beam", "top_k", "chunk", "bwt_restrict_indexed"}, [&](const auto& x) {
        opt_get(x, "beam", c.beam);
        opt_get(x, "top_k", c.top_k);
        opt_get(x, "chunk", c.eval_chunk);
        opt_get(x, "bwt_restrict_indexed", c.bwt_restrict_indexed);
      });
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw UsageError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// Hash of the canonical JSON form.
inline std::string config_hash(const ExperimentConfig& c) { return io::hex64(io::fnv1a(to_json(c).dump())); }

}  // namespace mixdsi
