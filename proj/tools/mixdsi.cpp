// mixdsi: command-line driver for the continual generative-retrieval pipeline.
//
// Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mixdsi/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mixdsi;

namespace {

struct Globals {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
  bool force = false;
  bool resume = false;
  std::string cache;
  bool quiet = false;
};

ExperimentConfig resolve_config(const Globals& g, bool need_file) {
  ExperimentConfig cfg;
  if (!g.config.empty()) {
    cfg = load_config(g.config);
  } else if (!g.out.empty() && fs::exists(RunDir{g.out}.config())) {
    cfg = load_config(RunDir{g.out}.config());
  } else if (need_file) {
    throw UsageError("a config file is required (--config)");
  }
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

Experiment make_experiment(const Globals& g, const ExperimentConfig& cfg) {
  if (g.out.empty()) throw UsageError("--out is required");
  RunOptions opt;
  opt.force = g.force;
  opt.require_existing = g.resume;
  opt.cache_dir = g.cache;
  if (!g.quiet) opt.progress = [](const std::string& s) { std::cout << s << std::endl; };
  return Experiment(cfg, g.out, opt);
}

// Standalone evaluation of one checkpoint on one query file.
void eval_file(const Globals& g, const std::string& ckpt, const std::string& queries, const std::string& docids,
               const std::string& csv) {
  ModelState m = read_checkpoint(ckpt);
  ExperimentConfig cfg = resolve_config(g, false);
  const DocIdTable table = DocIdTable::from_tsv(io::read_file(docids), m.cfg.K);
  const DocIdTrie trie = DocIdTrie::from_table(table);
  const auto qs = queries_from_jsonl(io::read_file(queries), m.cfg.base_vocab);
  const EvalScores s = evaluate_queries(m, qs, table, trie, cfg);
  io::write_file(csv, query_results_csv(s));
  if (!g.quiet)
    std::cout << "evaluated " << qs.size() << " queries: " << metric_name(cfg, true) << " " << s.recall << ", "
              << metric_name(cfg, false) << " " << s.mrr << std::endl;
}

struct Command {
  bool init = false, make_data = false, build_rq = false, pretrain = false, index = false, eval = false,
       report = false, all = false;
  int index_t = 0;
  std::string ckpt, queries, docids, csv;
};

int dispatch(const Globals& g, const Command& c);

int run(int argc, char** argv) {
  CLI::App app{"Expandable mixture-of-LoRA generative retrieval over dynamic corpora"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)");
  app.add_option("--seed", g.seed, "override the config seed");
  app.add_option("--out", g.out, "run directory");
  app.add_flag("--force", g.force, "overwrite an existing run directory");
  app.add_flag("--resume", g.resume, "continue an existing run; fail if there is none");
  app.add_option("--cache", g.cache, "shared cache directory for pretrained checkpoints");
  app.add_flag("-q,--quiet", g.quiet, "suppress progress output");

  auto* init = app.add_subcommand("init-config", "write the default config to --out");
  auto* make_data = app.add_subcommand("make-data", "generate the synthetic corpora");
  auto* build_rq = app.add_subcommand("build-rq", "fit RQ codebooks and assign docids");
  auto* pretrain = app.add_subcommand("pretrain", "train on D0");
  auto* index = app.add_subcommand("index", "run continual indexing sessions");
  Command c;
  index->add_option("--t", c.index_t, "single timestep to index (default: all remaining)");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", c.ckpt, "checkpoint file");
  eval->add_option("--queries", c.queries, "queries JSONL");
  eval->add_option("--docids", c.docids, "docid table TSV");
  eval->add_option("--csv", c.csv, "per-query output CSV");
  auto* report = app.add_subcommand("report", "write CL summary, routing and OOD reports");
  auto* all = app.add_subcommand("run", "make-data through report in one go (resumable)");
  for (auto* sub : {init, make_data, build_rq, pretrain, index, eval, report, all}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  try {
    c.init = bool(*init);
    c.make_data = bool(*make_data);
    c.build_rq = bool(*build_rq);
    c.pretrain = bool(*pretrain);
    c.index = bool(*index);
    c.eval = bool(*eval);
    c.report = bool(*report);
    c.all = bool(*all);
    return dispatch(g, c);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << app.help();
    return 1;
  }
}

int dispatch(const Globals& g, const Command& c) {
  if (c.init) {
    if (g.out.empty()) throw UsageError("--out is required");
    if (fs::exists(g.out) && !g.force) throw UsageError(g.out + " exists; pass --force to overwrite");
    ExperimentConfig cfg;
    if (g.seed) cfg.seed = *g.seed;
    io::write_file(g.out, to_json(cfg).dump(2) + "\n");
    return 0;
  }
  if (c.eval && !c.ckpt.empty()) {
    if (c.queries.empty() || c.docids.empty() || c.csv.empty())
      throw UsageError("eval --ckpt needs --queries, --docids and --csv");
    eval_file(g, c.ckpt, c.queries, c.docids, c.csv);
    return 0;
  }

  const ExperimentConfig cfg = resolve_config(g, true);
  Experiment ex = make_experiment(g, cfg);
  if (c.make_data) {
    ex.open(false);
    ex.stage_data();
  } else if (c.all) {
    ex.open(true);
    ex.run_all();
  } else {
    ex.open(true);
    if (c.build_rq) ex.stage_rq();
    if (c.pretrain) ex.stage_pretrain();
    if (c.index) {
      if (c.index_t > 0) {
        ex.stage_index(c.index_t);
      } else {
        for (int t = 1; t <= cfg.corpus.snapshots(); ++t) ex.stage_index(t);
      }
    }
    if (c.eval) ex.stage_evaluate_all();
    if (c.report) ex.stage_report();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << std::endl;
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 2;
  }
}
