#pragma once

// Training objectives, the trainability policy and one optimizer step.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mixdsi/autograd.hpp"
#include "mixdsi/model.hpp"
#include "mixdsi/ood_expansion.hpp"

namespace mixdsi {

struct Batch {
  std::vector<TokenSeq> queries;
  std::vector<std::vector<int>> codes;
  std::size_t size() const { return queries.size(); }
};

enum class RouterLoss { none, aux, load_balance };

struct LossConfig {
  double alpha1 = 1.0;
  double alpha2 = 0.1;
  double lb_coef = 0.01;
  RouterLoss router_loss = RouterLoss::aux;
  bool use_kl = true;
  // Treat the router-input hidden states as constants in the aux term. Without
  // this the alignment pulls every token toward the router columns.
  bool aux_detach = true;
};

struct LossTerms {
  double ce = 0.0;
  double aux = 0.0;  // router term (aux or load balancing), unweighted sum over layers
  double kl = 0.0;
  double total = 0.0;
};

// Mean negative log-probability of gold columns under per-row segment softmax.
inline double ce_loss(const Mat& logits, const std::vector<ag::Segment>& segs,
                      const std::vector<int>& gold) {
  ag::Tape t(false);
  return t.scalar(ag::segment_cross_entropy(t, t.constant(logits), segs, gold));
}

// Mean KL(p || q) over rows, both given as probability rows.
inline double kl_divergence(const Mat& p, const Mat& q) {
  require(p.rows() == q.rows() && p.cols() == q.cols(), "kl: layout mismatch");
  double total = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r)
    for (Eigen::Index j = 0; j < p.cols(); ++j)
      if (p(r, j) > 0.0) total += p(r, j) * (std::log(p(r, j)) - std::log(q(r, j)));
  return total / static_cast<double>(p.rows());
}

// Within-segment predictive distributions of a model on a batch (no gradients).
inline Mat predictive_distribution(ModelState& m, const Batch& b) {
  ag::Tape t(false);
  TeacherForced tf = teacher_forced(t, m, b.queries, b.codes);
  return ag::segment_softmax(t.value(tf.scored.logits), tf.scored.segs);
}

inline std::vector<int> trainable_columns(const Router& r) {
  std::vector<int> out;
  for (int i = 0; i < r.size(); ++i)
    if (r.columns[i].trainable) out.push_back(i);
  return out;
}

// Builds the loss graph for one batch. `prev` supplies KL targets when given.
// Router terms only apply to layers that have a trainable router column; with
// several trainable columns each takes the role of the newest one in turn.
// `fixed_h` replaces the per-layer router inputs of the aux term with given
// constants; the detached objective is the gradient of that function.
inline ag::Var build_loss(ag::Tape& t, ModelState& m, const Batch& b, ModelState* prev,
                          const LossConfig& cfg, LossTerms* terms = nullptr,
                          TeacherForced* keep = nullptr, const std::vector<Mat>* fixed_h = nullptr) {
  require(cfg.alpha1 >= 0.0 && cfg.alpha2 >= 0.0, "loss weights must be non-negative");
  TeacherForced tf = teacher_forced(t, m, b.queries, b.codes);
  ag::Var ce = ag::segment_cross_entropy(t, tf.scored.logits, tf.scored.segs, tf.gold);
  ag::Var total = ce;
  LossTerms lt;
  lt.ce = t.scalar(ce);

  if (cfg.router_loss != RouterLoss::none) {
    for (int l = 0; l < m.n_mix(); ++l) {
      MixLoRALayer& layer = m.mix(l);
      const auto cols = trainable_columns(layer.router);
      if (cols.empty()) continue;
      ag::Var term;
      if (cfg.router_loss == RouterLoss::aux) {
        const ag::Var h = fixed_h ? t.constant((*fixed_h)[l])
                          : cfg.aux_detach ? t.constant(t.value(tf.dec.router_in[l]))
                                           : tf.dec.router_in[l];
        term = router_aux_loss(t, h, layer.router, cols[0]);
        for (std::size_t j = 1; j < cols.size(); ++j)
          term = ag::add(t, term, router_aux_loss(t, h, layer.router, cols[j]));
        if (cols.size() > 1) term = ag::scale(t, term, 1.0 / static_cast<double>(cols.size()));
        lt.aux += t.scalar(term);
        total = ag::add(t, total, ag::scale(t, term, cfg.alpha1));
      } else {
        term = load_balance_loss(t, tf.dec.mix[l].probs, tf.dec.mix[l].argmax, cfg.lb_coef);
        lt.aux += t.scalar(term);
        total = ag::add(t, total, term);
      }
    }
  }

  if (cfg.use_kl && prev != nullptr) {
    require(prev->cfg.layout().total() == m.cfg.layout().total() &&
                prev->mask_enabled == m.mask_enabled,
            "kl: vocabulary layout mismatch");
    const Mat target = predictive_distribution(*prev, b);
    ag::Var kl = ag::segment_kl(t, tf.scored.logits, tf.scored.segs, target);
    lt.kl = t.scalar(kl);
    total = ag::add(t, total, ag::scale(t, kl, cfg.alpha2));
  }
  lt.total = t.scalar(total);
  if (terms) *terms = lt;
  if (keep) *keep = std::move(tf);
  return total;
}

// ---------------------------------------------------------------------------
// Trainability

inline void set_all_trainable(ModelState& m, bool on) {
  m.for_each_param([on](Param& p) {
    p.trainable = on;
    p.lr_scale = 1.0;
  });
}

// D0 training. With train_experts off the experts and routers stay frozen, so
// the zero-initialized adapters remain exact no-ops.
inline void set_pretrain_trainable(ModelState& m, bool train_experts) {
  set_all_trainable(m, true);
  if (train_experts) return;
  for (int l = 0; l < m.n_mix(); ++l) {
    auto& layer = m.mix(l);
    for (auto& e : layer.experts) e.for_each_param([](Param& p) { p.trainable = false; });
    for (auto& c : layer.router.columns) c.trainable = false;
  }
}

// Continual indexing: experts and router columns created at `timestep` plus
// the RQ rows of W_RQ, the latter scaled by 1/slow_learner_factor when
// slow_learner is on.
inline void set_continual_trainable(ModelState& m, int timestep, bool slow_learner) {
  set_all_trainable(m, false);
  for (int l = 0; l < m.n_mix(); ++l) {
    auto& layer = m.mix(l);
    for (std::size_t i = 0; i < layer.experts.size(); ++i) {
      const bool fresh = layer.experts[i].created_at == timestep;
      layer.experts[i].for_each_param([fresh](Param& p) { p.trainable = fresh; });
      layer.router.columns[i].trainable = fresh;
    }
  }
  m.rq_emb.trainable = true;
  m.rq_emb.lr_scale = slow_learner ? 1.0 / m.slow_learner_factor : 1.0;
}

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_frac = 0.1;
  double clip = 1.0;
};

class AdamW {
 public:
  AdamW(OptimizerConfig cfg, int total_steps) : cfg_(cfg), total_(std::max(total_steps, 1)) {
    warmup_ = static_cast<int>(std::ceil(cfg_.warmup_frac * total_));
  }

  // Linear warmup, then linear decay to zero at total_steps.
  double lr_at(int step) const {
    const double s = static_cast<double>(step + 1);
    if (warmup_ > 0 && step < warmup_) return cfg_.lr * s / warmup_;
    const double rest = static_cast<double>(total_ - warmup_);
    if (rest <= 0.0) return cfg_.lr;
    return cfg_.lr * std::max(0.0, (total_ - step) / rest);
  }

  // Clips by global norm and updates every trainable parameter; returns the
  // pre-clip gradient norm.
  double step(const std::vector<Param*>& params) {
    double sq = 0.0;
    for (Param* p : params)
      if (p->trainable && p->grad.size() > 0) sq += p->grad.squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm at step " + std::to_string(step_));
    const double clip = (cfg_.clip > 0.0 && norm > cfg_.clip) ? cfg_.clip / norm : 1.0;
    const double lr = lr_at(step_);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
    for (Param* p : params) {
      if (!p->trainable) continue;
      if (p->grad.size() == 0) p->zero_grad();
      auto& st = state_[p->name];
      if (st.m.size() == 0) {
        st.m = Mat::Zero(p->value.rows(), p->value.cols());
        st.v = Mat::Zero(p->value.rows(), p->value.cols());
      }
      const Mat g = p->grad * clip;
      st.m = cfg_.beta1 * st.m + (1.0 - cfg_.beta1) * g;
      st.v = cfg_.beta2 * st.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      const double a = lr * p->lr_scale;
      const Mat upd = (st.m / bc1).array() / ((st.v / bc2).array().sqrt() + cfg_.eps);
      p->value = p->value * (1.0 - a * cfg_.weight_decay) - a * upd;
    }
    return norm;
  }

  int steps_taken() const { return step_; }

 private:
  struct Moments {
    Mat m, v;
  };
  OptimizerConfig cfg_;
  int total_;
  int warmup_ = 0;
  int step_ = 0;
  std::map<std::string, Moments> state_;
};

// Cosine router columns live on the unit sphere; project back after a step.
inline void renormalize_cosine_routers(ModelState& m) {
  for (int l = 0; l < m.n_mix(); ++l) {
    Router& r = m.mix(l).router;
    if (r.kind != RouterKind::cosine) continue;
    for (Param& c : r.columns)
      if (c.trainable) {
        const double n = c.value.norm();
        if (n == 0.0) throw NumericalError("router column collapsed to zero norm");
        c.value /= n;
      }
  }
}

struct StepRecord {
  int step = 0;
  LossTerms terms;
  double grad_norm = 0.0;
};

// Folds the batch's router energies into the per-position EMA thresholds.
inline void update_thresholds(ag::Tape& t, ModelState& m, const TeacherForced& tf,
                              const ExpansionPolicy& policy) {
  const int M = m.cfg.M;
  for (int l = 0; l < m.n_mix(); ++l) {
    MixLoRALayer& layer = m.mix(l);
    if (layer.experts.empty()) continue;
    const Mat& z = t.value(tf.dec.mix[l].logits);
    layer.thresholds.resize(M);
    for (int p = 0; p < M; ++p) {
      std::vector<double> e;
      for (Eigen::Index r = p; r < z.rows(); r += M)
        e.push_back(energy_from_logits(z.row(r), policy.temperature));
      update_ema(layer.thresholds[p], batch_statistic(e, policy.statistic), policy.ema_decay);
    }
  }
}

inline StepRecord train_step(ModelState& m, const Batch& b, ModelState* prev, const LossConfig& lc,
                             AdamW& opt, const ExpansionPolicy* policy) {
  auto params = m.params();
  for (Param* p : params)
    if (p->trainable) p->zero_grad();
  ag::Tape t(true);
  StepRecord rec;
  TeacherForced tf;
  ag::Var loss = build_loss(t, m, b, prev, lc, &rec.terms, &tf);
  if (!std::isfinite(rec.terms.total)) throw NumericalError("non-finite loss");
  t.backward(loss);
  rec.grad_norm = opt.step(params);
  rec.step = opt.steps_taken();
  renormalize_cosine_routers(m);
  if (policy) update_thresholds(t, m, tf, *policy);
  return rec;
}

}  // namespace mixdsi
