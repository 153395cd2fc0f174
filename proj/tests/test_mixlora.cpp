#include <gtest/gtest.h>

#include "mixdsi/mixlora.hpp"
#include "support.hpp"

using namespace mixdsi;
using testing_support::check_gradients;
using testing_support::random_mat;

namespace {

MixLoRALayer make_layer(int dim, int hidden, int experts, RouterKind kind, uint64_t seed,
                        bool random_up = false) {
  Rng rng(seed);
  MixLoRALayer l;
  l.ffn.ln_gain.value = Mat::Ones(1, dim) + 0.1 * random_normal(1, dim, 1.0, rng);
  l.ffn.ln_bias.value = 0.1 * random_normal(1, dim, 1.0, rng);
  l.ffn.w_in.value = random_normal(dim, hidden, 0.3, rng);
  l.ffn.w_out.value = random_normal(hidden, dim, 0.3, rng);
  l.router.kind = kind;
  l.router.top_k = 2;
  for (int i = 0; i < experts; ++i) {
    auto e = make_expert(dim, hidden, 2, 4.0, 0, rng);
    if (random_up) {
      e.in.up.value = random_normal(2, hidden, 0.3, rng);
      e.out.up.value = random_normal(2, dim, 0.3, rng);
    }
    l.experts.push_back(std::move(e));
    l.router.columns.push_back(make_router_column(kind, dim, rng));
  }
  name_layer_params(l, "L");
  return l;
}

RowVec unit(int dim, int axis) {
  RowVec v = RowVec::Zero(dim);
  v[axis] = 1.0;
  return v;
}

Router router_from_rows(RouterKind kind, const std::vector<RowVec>& rows) {
  Router r;
  r.kind = kind;
  for (const auto& v : rows) {
    Param p;
    p.value = v;
    r.columns.push_back(p);
  }
  return r;
}

}  // namespace

TEST(Router, CosineAndSoftmaxLogits) {
  Rng rng(1);
  Router cos = router_from_rows(RouterKind::cosine, {random_unit_row(4, rng), random_unit_row(4, rng)});
  EXPECT_NEAR(router_logits(cos.columns[0].value.row(0) * 3.0, cos)[0], 1.0, 1e-12);

  Router axes = router_from_rows(RouterKind::cosine, {unit(3, 0), unit(3, 1)});
  const Vec z = router_logits(unit(3, 2) * 2.0, axes);
  EXPECT_EQ(z[0], 0.0);
  EXPECT_EQ(z[1], 0.0);
  EXPECT_THROW(router_logits(RowVec::Zero(3), axes), NumericalError);

  Router sm = router_from_rows(RouterKind::softmax, {unit(2, 0), unit(2, 1)});
  RowVec x(2);
  x << 2.0, 1.0;
  const Vec zs = router_logits(x, sm);
  EXPECT_EQ(zs[0], 2.0);
  EXPECT_EQ(zs[1], 1.0);
}

TEST(Gate, TopKKeepsSoftmaxValues) {
  Vec z(3);
  z << 2, 1, 0;
  const Vec g = gate_topk(z, 2);
  const double s = std::exp(2.0) + std::exp(1.0) + 1.0;
  EXPECT_NEAR(g[0], std::exp(2.0) / s, 1e-15);
  EXPECT_NEAR(g[1], std::exp(1.0) / s, 1e-15);
  EXPECT_EQ(g[2], 0.0);
  EXPECT_NEAR(g[0], 0.6652, 5e-5);
  EXPECT_NEAR(g[1], 0.2447, 5e-5);

  const Vec full = gate_topk(z, 3);
  EXPECT_NEAR(full.sum(), 1.0, 1e-15);

  const Vec tie = gate_topk(Vec::Zero(4), 1);
  EXPECT_DOUBLE_EQ(tie[0], 0.25);
  EXPECT_EQ(tie.tail(3).sum(), 0.0);
}

TEST(Gate, SparsityProperty) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = testing_support::uniform_int(rng, 1, 8);
    const int k = testing_support::uniform_int(rng, 0, n);
    const Vec z = random_mat(n, 1, rng, 2.0).col(0);
    const Vec g = gate_topk(z, k);
    const Vec p = gate_topk(z, n);
    int nz = 0;
    for (int i = 0; i < n; ++i)
      if (g[i] != 0.0) {
        ++nz;
        EXPECT_EQ(g[i], p[i]);
      }
    EXPECT_LE(nz, k);
  }
}

TEST(MixForward, ZeroInitIsFrozenFfn) {
  const auto layer = make_layer(6, 10, 3, RouterKind::cosine, 3);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    const RowVec x = random_mat(1, 6, rng).row(0);
    EXPECT_EQ(mixlora_forward(x, layer), frozen_ffn(x, layer.ffn));
  }
}

TEST(MixForward, ZeroGatesGiveFrozenFfn) {
  const auto layer = make_layer(6, 10, 3, RouterKind::cosine, 5, true);
  std::mt19937_64 rng(6);
  const Vec g = Vec::Zero(3);
  for (int i = 0; i < 20; ++i) {
    const RowVec x = random_mat(1, 6, rng).row(0);
    EXPECT_EQ(mixlora_forward(x, layer, &g), frozen_ffn(x, layer.ffn));
  }
}

TEST(MixForward, SingleExpertUnitGateEqualsDenseUpdate) {
  auto layer = make_layer(5, 7, 1, RouterKind::cosine, 7, true);
  const auto& e = layer.experts[0];
  // Dense oracle: fold the low-rank factors into the frozen matrices.
  const Mat w_in = layer.ffn.w_in.value + e.factor() * e.in.down.value * e.in.up.value;
  const Mat w_out = layer.ffn.w_out.value + e.factor() * e.out.down.value * e.out.up.value;
  std::mt19937_64 rng(8);
  const Vec one = Vec::Ones(1);
  for (int i = 0; i < 20; ++i) {
    const RowVec x = random_mat(1, 5, rng).row(0);
    const RowVec xn = layer_norm_row(x, layer.ffn.ln_gain.value.row(0), layer.ffn.ln_bias.value.row(0));
    const RowVec expect = x + gelu_row(xn * w_in) * w_out;
    EXPECT_LT((mixlora_forward(x, layer, &one) - expect).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MixForward, TapeMatchesReference) {
  auto layer = make_layer(6, 8, 3, RouterKind::cosine, 9, true);
  std::mt19937_64 rng(10);
  const Mat x = random_mat(5, 6, rng);
  ag::Tape t(false);
  const Mat y = t.value(mixlora_forward(t, t.constant(x), layer).out);
  for (int r = 0; r < 5; ++r)
    EXPECT_LT((y.row(r) - mixlora_forward(RowVec(x.row(r)), layer)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LoadBalance, ClosedForms) {
  const int N = 4;
  Mat p = Mat::Constant(8, N, 1.0 / N);
  std::vector<int> a{0, 1, 2, 3, 0, 1, 2, 3};
  EXPECT_NEAR(load_balance_loss(p, a, 0.01), 0.01, 1e-15);
  EXPECT_EQ(load_balance_loss(p, a, 0.0), 0.0);

  Mat q(2, 2);
  q << 0.9, 0.1, 0.9, 0.1;
  EXPECT_NEAR(load_balance_loss(q, {0, 0}, 0.01), 0.018, 1e-15);
  EXPECT_THROW(load_balance_loss(Mat(0, 2), {}, 0.01), UsageError);
  Mat bad(1, 2);
  bad << 0.5, 0.6;
  EXPECT_THROW(load_balance_loss(bad, {1}, 0.01), UsageError);
}

TEST(AuxLoss, ClosedForms) {
  const RowVec e0 = unit(3, 0), e1 = unit(3, 1), e2 = unit(3, 2);
  Router r = router_from_rows(RouterKind::cosine, {e1, e0});
  Mat h(2, 3);
  h << e0, e0 * 2.0;
  EXPECT_NEAR(router_aux_loss(h, r, 1), 0.0, 1e-15);
  Mat perp(2, 3);
  perp << e2, e1;
  Router r2 = router_from_rows(RouterKind::cosine, {e2, e0});
  Mat hp(1, 3);
  hp << e1;
  EXPECT_NEAR(router_aux_loss(hp, r2, 1), 1.0, 1e-15);

  RowVec half(3);
  half << 0.5, std::sqrt(0.75), 0.0;  // cos(half, e0) = 0.5
  Router r3 = router_from_rows(RouterKind::cosine, {half, e0});
  EXPECT_NEAR(router_aux_loss(h, r3, 1), 0.5, 1e-15);
  EXPECT_GE(router_aux_loss(perp, r3, 0), 0.0);
  EXPECT_THROW(router_aux_loss(Mat(0, 3), r3, 1), UsageError);
}

TEST(AuxLoss, TapeMatchesReferenceAndGradients) {
  auto layer = make_layer(5, 6, 3, RouterKind::cosine, 11);
  std::mt19937_64 rng(12);
  Param h("h", random_mat(4, 5, rng));
  h.trainable = true;
  for (auto& c : layer.router.columns) c.trainable = true;
  for (int idx = 0; idx < 3; ++idx) {
    ag::Tape t(false);
    EXPECT_NEAR(t.scalar(router_aux_loss(t, t.param(h), layer.router, idx)),
                router_aux_loss(h.value, layer.router, idx), 1e-13);
  }
  ag::Tape ts(false);
  EXPECT_NEAR(ts.scalar(router_aux_loss_symmetric(ts, ts.param(h), layer.router)),
              router_aux_loss_symmetric(h.value, layer.router), 1e-13);

  std::vector<Param*> params{&h};
  for (auto& c : layer.router.columns) params.push_back(&c);
  auto loss = [&] {
    ag::Tape t(false);
    return t.scalar(router_aux_loss(t, t.param(h), layer.router, 2));
  };
  auto analytic = [&] {
    ag::Tape t(true);
    t.backward(router_aux_loss(t, t.param(h), layer.router, 2));
  };
  const auto res = check_gradients(params, loss, analytic, 20, 13);
  EXPECT_LE(res.max_rel, 1e-6);
}

TEST(LoadBalance, TapeGradients) {
  std::mt19937_64 rng(14);
  Param z("z", random_mat(6, 3, rng));
  z.trainable = true;
  std::vector<int> argmax;
  for (int r = 0; r < 6; ++r) {
    Eigen::Index i;
    z.value.row(r).maxCoeff(&i);
    argmax.push_back(static_cast<int>(i));
  }
  auto build = [&](ag::Tape& t) { return load_balance_loss(t, ag::softmax_rows(t, t.param(z)), argmax, 0.3); };
  ag::Tape t0(false);
  ag::Var probs = ag::softmax_rows(t0, t0.param(z));
  EXPECT_NEAR(t0.scalar(load_balance_loss(t0, probs, argmax, 0.3)),
              load_balance_loss(t0.value(probs), argmax, 0.3), 1e-14);
  auto loss = [&] {
    ag::Tape t(false);
    return t.scalar(build(t));
  };
  auto analytic = [&] {
    ag::Tape t(true);
    t.backward(build(t));
  };
  EXPECT_LE(check_gradients({&z}, loss, analytic, 18, 15).max_rel, 1e-6);
}

TEST(Expand, AppendsFrozenPreviousAndIsANoOpWithZeroGate) {
  auto layer = make_layer(6, 9, 2, RouterKind::cosine, 16, true);
  for (auto& e : layer.experts) e.for_each_param([](Param& p) { p.trainable = true; });
  const auto before = layer;
  Rng rng(17);
  auto grown = expand_layer(layer, 3, rng);
  grown = expand_layer(grown, 3, rng);
  ASSERT_EQ(grown.experts.size(), 4u);
  ASSERT_EQ(grown.router.size(), 4);
  EXPECT_EQ(grown.experts[2].created_at, 3);
  EXPECT_EQ(grown.experts[3].created_at, 3);
  EXPECT_FALSE(grown.experts[0].in.up.trainable);
  EXPECT_FALSE(grown.experts[2].in.up.trainable);
  EXPECT_TRUE(grown.experts[3].in.up.trainable);
  EXPECT_NEAR(grown.router.columns[3].value.norm(), 1.0, 1e-12);

  std::mt19937_64 xr(18);
  for (int i = 0; i < 30; ++i) {
    const RowVec x = random_mat(1, 6, xr).row(0);
    const Vec g_old = gate_topk(router_logits(x, before.router), 2);
    Vec g_new = Vec::Zero(4);
    g_new.head(2) = g_old;
    EXPECT_EQ(mixlora_forward(x, grown, &g_new), mixlora_forward(x, before));
  }
}
