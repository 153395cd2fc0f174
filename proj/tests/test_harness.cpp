#include <gtest/gtest.h>

#include <map>
#include <set>

#include "mixdsi/config.hpp"
#include "mixdsi/corpora.hpp"
#include "mixdsi/metrics.hpp"
#include "support.hpp"

using namespace mixdsi;

namespace {

CorpusConfig small_corpus() {
  CorpusConfig c;
  c.n_clusters = 10;
  c.docs_per_cluster = 4;
  c.d0_frac = 0.6;
  c.snapshot_frac = 0.1;
  c.train_queries = 3;
  c.test_queries = 2;
  return c;
}

MetricsMatrix from_rows(const std::vector<std::vector<double>>& rows) {
  MetricsMatrix P(static_cast<int>(rows.size()));
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t i = 0; i < rows[t].size(); ++i) P.set(static_cast<int>(t), static_cast<int>(i), rows[t][i]);
  return P;
}

}  // namespace

// ---------------------------------------------------------------------------
// Corpora

TEST(Corpora, DefaultSplit) {
  const CorpusConfig c;
  const auto snaps = generate_corpora(c, 7);
  ASSERT_EQ(snaps.size(), 5u);
  EXPECT_EQ(snaps[0].docs.size(), 900u);
  for (int t = 1; t <= 4; ++t) EXPECT_EQ(snaps[t].docs.size(), 25u);
  EXPECT_EQ(snaps[0].train.size(), 900u * 8);
  EXPECT_EQ(snaps[0].test.size(), 900u * 2);
}

TEST(Corpora, SameSeedIdentical) {
  const CorpusConfig c = small_corpus();
  const auto a = generate_corpora(c, 11), b = generate_corpora(c, 11);
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_EQ(docs_to_jsonl(a[t].docs), docs_to_jsonl(b[t].docs));
    EXPECT_EQ(queries_to_jsonl(a[t].train), queries_to_jsonl(b[t].train));
    EXPECT_EQ(queries_to_jsonl(a[t].test), queries_to_jsonl(b[t].test));
  }
  const auto other = generate_corpora(c, 12);
  EXPECT_NE(docs_to_jsonl(a[0].docs), docs_to_jsonl(other[0].docs));
}

TEST(Corpora, KeysUniqueAndGoldsLocal) {
  const auto snaps = generate_corpora(small_corpus(), 3);
  std::set<std::string> keys, qids;
  for (const auto& s : snaps) {
    std::set<std::string> here;
    for (const auto& d : s.docs) {
      EXPECT_TRUE(keys.insert(d.key).second) << d.key;
      here.insert(d.key);
    }
    for (const auto* qs : {&s.train, &s.test})
      for (const auto& q : *qs) {
        EXPECT_TRUE(qids.insert(q.qid).second) << q.qid;
        EXPECT_TRUE(here.count(q.gold)) << q.gold << " not in snapshot " << s.timestep;
      }
  }
}

TEST(Corpora, QueryOverlapMeetsMinimum) {
  for (uint64_t seed : {1, 2, 3}) {
    CorpusConfig c = small_corpus();
    c.min_overlap = 5;
    const auto snaps = generate_corpora(c, seed);
    for (const auto& s : snaps) {
      std::map<std::string, const TokenSeq*> doc;
      for (const auto& d : s.docs) doc[d.key] = &d.tokens;
      for (const auto* qs : {&s.train, &s.test})
        for (const auto& q : *qs) {
          // independent count: multiset-free membership test per query token
          int n = 0;
          for (int tok : q.tokens)
            for (int dt : *doc.at(q.gold))
              if (dt == tok) {
                ++n;
                break;
              }
          EXPECT_GE(n, c.min_overlap);
          EXPECT_EQ(static_cast<int>(q.tokens.size()), c.query_len);
        }
    }
  }
}

TEST(Corpora, AllIdScheduleReusesBaseClusters) {
  CorpusConfig c = small_corpus();
  c.ood_schedule = {false, false, false, false};
  const auto snaps = generate_corpora(c, 5);
  const std::set<int> base(snaps[0].clusters.begin(), snaps[0].clusters.end());
  for (std::size_t t = 1; t < snaps.size(); ++t)
    for (int cl : snaps[t].clusters) EXPECT_TRUE(base.count(cl)) << "t=" << t << " cluster " << cl;
}

TEST(Corpora, OodSnapshotUsesFreshTokens) {
  const CorpusConfig c = small_corpus();
  const auto snaps = generate_corpora(c, 5);
  std::set<int> seen;
  for (const auto& d : snaps[0].docs)
    for (int tok : d.tokens)
      if (tok > c.n_common) seen.insert(tok);
  for (const auto& d : snaps[1].docs)
    for (int tok : d.tokens) {
      if (tok > c.n_common) {
        EXPECT_FALSE(seen.count(tok));
      }
    }
}

TEST(Corpora, D0IndependentOfSchedule) {
  CorpusConfig a = small_corpus(), b = small_corpus();
  b.ood_schedule = {false, true, false, true};
  EXPECT_EQ(docs_to_jsonl(generate_corpora(a, 9)[0].docs), docs_to_jsonl(generate_corpora(b, 9)[0].docs));
}

TEST(Corpora, InfeasibleConfigRejected) {
  CorpusConfig c = small_corpus();
  c.min_overlap = c.query_len + 1;
  EXPECT_THROW(generate_corpora(c, 0), UsageError);
  c = small_corpus();
  c.d0_frac = 0.5;
  EXPECT_THROW(generate_corpora(c, 0), UsageError);
  c = small_corpus();
  c.n_clusters = 4;
  EXPECT_THROW(generate_corpora(c, 0), UsageError);
}

TEST(Corpora, JsonlRoundTripAndValidation) {
  const auto snaps = generate_corpora(small_corpus(), 1);
  const std::string d = docs_to_jsonl(snaps[1].docs);
  EXPECT_EQ(docs_to_jsonl(docs_from_jsonl(d)), d);
  const std::string q = queries_to_jsonl(snaps[1].test);
  EXPECT_EQ(queries_to_jsonl(queries_from_jsonl(q)), q);
  EXPECT_THROW(docs_from_jsonl("{\"key\":\"a\"}\n"), DataError);
  EXPECT_THROW(docs_from_jsonl("not json\n"), DataError);
  EXPECT_THROW(docs_from_jsonl("{\"key\":\"a\",\"tokens\":[1,99999]}\n", 100), DataError);
}

// ---------------------------------------------------------------------------
// Retrieval metrics

TEST(Metrics, RecallAndMrr) {
  const std::vector<std::string> r{"a", "b", "c", "g", "e"};
  EXPECT_EQ(recall_at_k({"g", "b"}, "g", 10), 1.0);
  EXPECT_EQ(mrr_at_k({"g", "b"}, "g", 10), 1.0);
  EXPECT_EQ(mrr_at_k(r, "g", 10), 0.25);
  EXPECT_EQ(recall_at_k(r, "g", 3), 0.0);
  EXPECT_EQ(mrr_at_k(r, "g", 3), 0.0);
  EXPECT_EQ(recall_at_k(r, "zz", 10), 0.0);
  EXPECT_EQ(mrr_at_k(r, "zz", 10), 0.0);
  EXPECT_THROW(recall_at_k({"a", "b", "a"}, "a", 10), DataError);
  EXPECT_THROW(mrr_at_k({"a", "a"}, "b", 10), DataError);
}

TEST(Metrics, PublishedRowsAverage) {
  auto row = [](std::vector<double> v) {
    MetricsMatrix P(5);
    for (int t = 0; t < 5; ++t)
      for (int i = 0; i <= t; ++i) P.set(t, i, v[i] / 100.0);
    return P;
  };
  EXPECT_NEAR(100.0 * average_performance(row({66.1, 54.1, 68.4, 75.8, 76.2}), 4), 68.1, 0.05);
  EXPECT_NEAR(100.0 * average_performance(row({47.2, 33.8, 52.7, 69.1, 73.0}), 4), 55.2, 0.05);
}

TEST(Metrics, BwtHandExample) {
  MetricsMatrix P(3);
  P.set(0, 0, 0.7);
  P.set(0, 1, 0.0);
  P.set(1, 0, 0.6);
  P.set(1, 1, 0.9);
  P.set(2, 0, 0.5);
  P.set(2, 1, 0.85);
  P.set(2, 2, 0.8);
  EXPECT_NEAR(backward_transfer(P, 2), 0.05, 1e-12);
  EXPECT_NEAR(forward_transfer(P, 2), (0.9 + 0.8) / 2, 1e-12);
}

TEST(Metrics, BwtRestrictIgnoresZeroShot) {
  // A high zero-shot score only matters without the restriction.
  MetricsMatrix P = from_rows({{0.5, 0.9, 0.0}, {0.5, 0.6, 0.0}, {0.5, 0.6, 0.7}});
  EXPECT_NEAR(backward_transfer(P, 2, false), 0.3, 1e-12);
  EXPECT_NEAR(backward_transfer(P, 2, true), 0.0, 1e-12);
}

TEST(Metrics, IdenticalRowsHaveZeroBwt) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 3 + trial % 4;
    std::vector<double> row(n);
    for (double& v : row) v = u(rng);
    MetricsMatrix P(n);
    for (int t = 0; t < n; ++t)
      for (int i = 0; i < n; ++i) P.set(t, i, row[i]);
    EXPECT_NEAR(backward_transfer(P, n - 1), 0.0, 1e-15);
  }
}

// Random lower-triangular matrices against a literal recomputation.
TEST(Metrics, RandomMatricesMatchDirectFormulas) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + trial % 5;
    std::vector<std::vector<double>> v(n, std::vector<double>(n));
    for (auto& r : v)
      for (double& x : r) x = u(rng);
    const MetricsMatrix P = from_rows(v);
    const int t = n - 1;
    double ap = 0, fwt = 0, bwt = 0;
    for (int i = 0; i <= t; ++i) ap += v[t][i];
    for (int i = 1; i <= t; ++i) fwt += v[i][i];
    for (int i = 1; i < t; ++i) {
      double best = 0;
      for (int ip = 0; ip < t; ++ip) best = std::max(best, v[ip][i]);
      bwt += best - v[t][i];
    }
    const ClMetrics m = cl_metrics(P, t);
    EXPECT_NEAR(m.ap, ap / (t + 1), 1e-12);
    EXPECT_NEAR(m.fwt, fwt / t, 1e-12);
    EXPECT_NEAR(m.bwt, bwt / (t - 1), 1e-12);
  }
}

TEST(Metrics, DomainErrors) {
  MetricsMatrix P = from_rows({{0.5, 0.1}, {0.4, 0.6}});
  EXPECT_THROW(forward_transfer(P, 0), UsageError);
  EXPECT_THROW(backward_transfer(P, 1), UsageError);
  EXPECT_THROW(P.set(0, 0, 1.5), UsageError);
  EXPECT_THROW(MetricsMatrix(2).at(1, 0), UsageError);
  const ClMetrics m = cl_metrics(P, 1);
  EXPECT_TRUE(std::isnan(m.bwt));
  EXPECT_FALSE(std::isnan(m.fwt));
}

// ---------------------------------------------------------------------------
// Config

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c;
  c.seed = 42;
  c.mode = Mode::no_ood;
  c.corpus.ood_schedule = {false, true, false, false};
  c.model.lora_rank = 3;
  c.ood.delta = 0.01;
  c.ood.statistic = EmaStatistic::max;
  c.pretrain.epochs = 3;
  c.bwt_restrict_indexed = true;
  const nlohmann::json j = to_json(c);
  const ExperimentConfig back = config_from_json(j);
  EXPECT_EQ(to_json(back).dump(), j.dump());
  EXPECT_EQ(config_hash(back), config_hash(c));
  c.seed = 43;
  EXPECT_NE(config_hash(back), config_hash(c));
}

TEST(Config, PartialFileUsesDefaults) {
  const ExperimentConfig c = config_from_json(nlohmann::json::parse(R"({"seed": 5, "mode": "base"})"));
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.mode, Mode::base);
  EXPECT_EQ(c.corpus.n_clusters, 40);
}

TEST(Config, RejectsUnknownKeysAndValues) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"sede": 5})")), UsageError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"model": {"dimm": 5}})")), UsageError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"mode": "turbo"})")), UsageError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"corpus": {"ood_schedule": ["X"]}})")), UsageError);
}

TEST(Config, ModeShapesModel) {
  ExperimentConfig c;
  c.mode = Mode::naive_expansion;
  EXPECT_EQ(c.resolved_model().router, RouterKind::softmax);
  EXPECT_EQ(c.resolved_model().initial_experts, 0);
  c.mode = Mode::no_pretrain;
  EXPECT_EQ(c.resolved_model().router, RouterKind::cosine);
  EXPECT_EQ(c.resolved_model().initial_experts, 0);
  c.mode = Mode::full;
  EXPECT_EQ(c.resolved_model().initial_experts, 2);
  EXPECT_EQ(c.resolved_model().base_vocab, c.corpus.vocab_size());
}
