#include <gtest/gtest.h>

#include "mixdsi/autograd.hpp"
#include "support.hpp"

using namespace mixdsi;
using testing_support::check_gradients;
using testing_support::random_mat;

namespace {

// Runs `build` on a fresh tape, reduces the result with a fixed random weight
// matrix so every output element matters, and checks all parameter grads.
void expect_op_gradients(std::vector<Param*> params, const std::function<ag::Var(ag::Tape&)>& build,
                         uint64_t seed) {
  for (Param* p : params) p->trainable = true;
  std::mt19937_64 rng(seed);
  Mat weight;
  auto forward = [&](ag::Tape& t) {
    ag::Var y = build(t);
    if (weight.size() == 0) weight = random_mat(t.value(y).rows(), t.value(y).cols(), rng);
    return ag::sum(t, ag::mul_const(t, y, weight));
  };
  auto loss = [&] {
    ag::Tape t(false);
    return t.scalar(forward(t));
  };
  auto analytic = [&] {
    ag::Tape t(true);
    t.backward(forward(t));
  };
  const auto res = check_gradients(params, loss, analytic, 40, seed + 1);
  EXPECT_GT(res.coords, 0);
  EXPECT_LE(res.max_rel, 1e-6);
}

}  // namespace

TEST(Autograd, MatmulFamily) {
  std::mt19937_64 rng(1);
  Param a("a", random_mat(3, 4, rng)), b("b", random_mat(4, 5, rng)), c("c", random_mat(5, 4, rng));
  expect_op_gradients({&a, &b}, [&](ag::Tape& t) { return ag::matmul(t, t.param(a), t.param(b)); }, 2);
  expect_op_gradients({&a, &c}, [&](ag::Tape& t) { return ag::matmul_nt(t, t.param(a), t.param(c)); }, 3);
}

TEST(Autograd, ElementwiseOps) {
  std::mt19937_64 rng(4);
  Param a("a", random_mat(3, 4, rng)), b("b", random_mat(3, 4, rng)), r("r", random_mat(1, 4, rng));
  Param s("s", random_mat(3, 1, rng));
  expect_op_gradients({&a, &b}, [&](ag::Tape& t) { return ag::mul(t, t.param(a), t.param(b)); }, 5);
  expect_op_gradients({&a, &b}, [&](ag::Tape& t) { return ag::sub(t, t.param(a), t.param(b)); }, 6);
  expect_op_gradients({&a, &r}, [&](ag::Tape& t) { return ag::add_row(t, t.param(a), t.param(r)); }, 7);
  expect_op_gradients({&a}, [&](ag::Tape& t) { return ag::gelu(t, t.param(a)); }, 8);
  expect_op_gradients({&a, &s}, [&](ag::Tape& t) { return ag::row_scale(t, t.param(a), t.param(s)); }, 9);
  expect_op_gradients({&a}, [&](ag::Tape& t) { return ag::affine(t, t.param(a), -2.5, 0.5); }, 10);
  expect_op_gradients({&a}, [&](ag::Tape& t) { return ag::mean_rows(t, t.param(a)); }, 11);
  expect_op_gradients({&a}, [&](ag::Tape& t) { return ag::column(t, t.param(a), 2); }, 12);
  expect_op_gradients({&a}, [&](ag::Tape& t) { return ag::select_rows(t, t.param(a), {2, 0, 2}); }, 13);
  expect_op_gradients({&a, &b}, [&](ag::Tape& t) { return ag::vcat(t, {t.param(a), t.param(b)}); }, 14);
}

TEST(Autograd, NormalizationOps) {
  std::mt19937_64 rng(20);
  Param x("x", random_mat(4, 6, rng)), g("g", random_mat(1, 6, rng)), b("b", random_mat(1, 6, rng));
  expect_op_gradients({&x, &g, &b},
                      [&](ag::Tape& t) { return ag::layer_norm(t, t.param(x), t.param(g), t.param(b)); }, 21);
  expect_op_gradients({&x}, [&](ag::Tape& t) { return ag::softmax_rows(t, t.param(x)); }, 22);
  expect_op_gradients({&x}, [&](ag::Tape& t) { return ag::normalize_rows(t, t.param(x)); }, 23);
}

TEST(Autograd, EmbeddingScattersRepeatedRows) {
  std::mt19937_64 rng(30);
  Param table("table", random_mat(5, 3, rng));
  expect_op_gradients({&table}, [&](ag::Tape& t) {
    return ag::embedding(t, {{&table, 1}, {&table, 4}, {&table, 1}});
  }, 31);
}

TEST(Autograd, AttentionPaddingCausalAndSharedKeys) {
  std::mt19937_64 rng(40);
  // 3 query items of length 2 reading 2 kv items of length 3.
  Param q("q", random_mat(6, 4, rng)), k("k", random_mat(6, 4, rng)), v("v", random_mat(6, 4, rng));
  ag::AttentionLayout lay;
  lay.heads = 2;
  lay.q_len = 2;
  lay.kv_len = 3;
  lay.key_len = {3, 2};
  lay.kv_of = {0, 1, 1};
  expect_op_gradients({&q, &k, &v}, [&](ag::Tape& t) {
    return ag::attention(t, t.param(q), t.param(k), t.param(v), lay);
  }, 41);

  Param sq("sq", random_mat(6, 4, rng));
  ag::AttentionLayout causal;
  causal.heads = 2;
  causal.q_len = 3;
  causal.kv_len = 3;
  causal.causal = true;
  expect_op_gradients({&sq}, [&](ag::Tape& t) {
    ag::Var x = t.param(sq);
    return ag::attention(t, x, x, x, causal);
  }, 42);
}

TEST(Autograd, CausalAttentionIgnoresFutureRows) {
  std::mt19937_64 rng(50);
  Mat x = random_mat(3, 4, rng);
  ag::AttentionLayout lay;
  lay.heads = 1;
  lay.q_len = 3;
  lay.kv_len = 3;
  lay.causal = true;
  ag::Tape t1(false), t2(false);
  ag::Var a = t1.constant(x);
  Mat y1 = t1.value(ag::attention(t1, a, a, a, lay));
  x.row(2).setConstant(7.0);
  ag::Var b = t2.constant(x);
  Mat y2 = t2.value(ag::attention(t2, b, b, b, lay));
  EXPECT_EQ(y1.topRows(2), y2.topRows(2));
}

TEST(Autograd, SegmentLosses) {
  std::mt19937_64 rng(60);
  Param z("z", random_mat(3, 8, rng));
  const std::vector<ag::Segment> segs{{0, 4}, {4, 8}, {2, 6}};
  expect_op_gradients({&z}, [&](ag::Tape& t) {
    return ag::segment_cross_entropy(t, t.param(z), segs, {1, 7, 2});
  }, 61);
  Mat target = ag::segment_softmax(random_mat(3, 8, rng), segs);
  expect_op_gradients({&z}, [&](ag::Tape& t) { return ag::segment_kl(t, t.param(z), segs, target); }, 62);
}

TEST(Autograd, SegmentCrossEntropyHandComputed) {
  // Two positions over two-wide segments; -(log p1 + log p2) / 2.
  Mat z(2, 4);
  z << 1.0, 0.0, 9.0, 9.0,
       5.0, 5.0, 2.0, 3.0;
  ag::Tape t(false);
  const double got = t.scalar(ag::segment_cross_entropy(t, t.constant(z), {{0, 2}, {2, 4}}, {0, 3}));
  const double p1 = std::exp(1.0) / (std::exp(1.0) + 1.0);
  const double p2 = std::exp(3.0) / (std::exp(2.0) + std::exp(3.0));
  EXPECT_NEAR(got, -(std::log(p1) + std::log(p2)) / 2.0, 1e-12);
}

TEST(Autograd, SegmentCrossEntropyRejectsGoldOutsideSegment) {
  ag::Tape t(false);
  EXPECT_THROW(ag::segment_cross_entropy(t, t.constant(Mat::Zero(1, 4)), {{0, 2}}, {3}),
               std::invalid_argument);
}

TEST(Autograd, FrozenParamsReceiveNoGradient) {
  std::mt19937_64 rng(70);
  Param a("a", random_mat(2, 2, rng)), b("b", random_mat(2, 2, rng));
  a.trainable = true;
  b.trainable = false;
  ag::Tape t(true);
  t.backward(ag::sum(t, ag::matmul(t, t.param(a), t.param(b))));
  EXPECT_GT(a.grad.size(), 0);
  EXPECT_EQ(b.grad.size(), 0);
}
