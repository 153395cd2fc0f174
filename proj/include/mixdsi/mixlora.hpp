#pragma once

// Expandable mixture-of-LoRA feed-forward layers.
//
// A MixLoRALayer wraps a frozen two-matrix FFN. Every expert adapts both
// matrices with a low-rank pair, and one router gate vector is shared by the
// two halves:
//
//   x'  = W_in LN(x) + sum_i g_i * D_in^i(LN(x))
//   out = x + W_out act(x') + sum_i g_i * D_out^i(act(x'))
//
// Routers are either the classic softmax router (raw inner products) or a
// cosine classifier whose columns are kept at unit norm.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "mixdsi/autograd.hpp"
#include "mixdsi/common.hpp"

namespace mixdsi {

enum class RouterKind { softmax, cosine };

inline std::string to_string(RouterKind k) { return k == RouterKind::cosine ? "cosine" : "softmax"; }
inline RouterKind router_kind_from(const std::string& s) {
  if (s == "cosine") return RouterKind::cosine;
  if (s == "softmax") return RouterKind::softmax;
  throw UsageError("unknown router kind: " + s);
}

struct LoRAFactor {
  Param down;  // in x r
  Param up;    // r x out, zero at creation
};

struct LoRAExpertPair {
  LoRAFactor in;   // adapts W_in (dim -> hidden)
  LoRAFactor out;  // adapts W_out (hidden -> dim)
  int rank = 0;
  double scale = 1.0;  // LoRA alpha; the applied factor is scale / rank
  int created_at = 0;

  double factor() const { return scale / static_cast<double>(rank); }

  template <typename F>
  void for_each_param(F&& f) {
    f(in.down);
    f(in.up);
    f(out.down);
    f(out.up);
  }
};

struct Router {
  RouterKind kind = RouterKind::cosine;
  std::vector<Param> columns;  // each 1 x dim; frozen columns have trainable == false
  int top_k = 2;

  int size() const { return static_cast<int>(columns.size()); }
  int effective_k() const { return std::min(top_k, size()); }

  Mat matrix() const {
    Mat R(columns.size(), columns.empty() ? 0 : columns[0].value.cols());
    for (std::size_t i = 0; i < columns.size(); ++i) R.row(i) = columns[i].value.row(0);
    return R;
  }
};

struct FfnWeights {
  Param ln_gain;  // 1 x dim
  Param ln_bias;  // 1 x dim
  Param w_in;     // dim x hidden
  Param w_out;    // hidden x dim

  template <typename F>
  void for_each_param(F&& f) {
    f(ln_gain);
    f(ln_bias);
    f(w_in);
    f(w_out);
  }
};

struct EmaThreshold {
  double tau = 0.0;
  bool initialized = false;
};

struct MixLoRALayer {
  FfnWeights ffn;
  std::vector<LoRAExpertPair> experts;
  Router router;
  std::vector<EmaThreshold> thresholds;  // one per docid position

  int dim() const { return static_cast<int>(ffn.w_in.value.rows()); }
  int hidden() const { return static_cast<int>(ffn.w_in.value.cols()); }

  void validate() const {
    require(static_cast<int>(experts.size()) == router.size(),
            "MixLoRALayer: expert count differs from router column count");
    require(router.top_k >= 1, "MixLoRALayer: top_k must be >= 1");
    for (const auto& e : experts) {
      require(e.rank >= 1, "MixLoRALayer: rank must be >= 1");
      require(e.rank == experts.front().rank, "MixLoRALayer: ranks differ across experts");
    }
  }

  bool thresholds_ready() const {
    if (thresholds.empty()) return false;
    return std::all_of(thresholds.begin(), thresholds.end(),
                       [](const EmaThreshold& t) { return t.initialized; });
  }
};

// ---------------------------------------------------------------------------
// Construction

inline LoRAExpertPair make_expert(int dim, int hidden, int rank, double scale, int created_at,
                                  Rng& rng) {
  LoRAExpertPair e;
  e.rank = rank;
  e.scale = scale;
  e.created_at = created_at;
  e.in.down.value = random_normal(dim, rank, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
  e.in.up.value = Mat::Zero(rank, hidden);
  e.out.down.value = random_normal(hidden, rank, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  e.out.up.value = Mat::Zero(rank, dim);
  return e;
}

inline Param make_router_column(RouterKind kind, int dim, Rng& rng) {
  Param p;
  if (kind == RouterKind::cosine)
    p.value = random_unit_row(dim, rng);
  else
    p.value = random_normal(1, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
  return p;
}

// Gives every parameter of the layer a stable dotted name under `prefix`.
inline void name_layer_params(MixLoRALayer& layer, const std::string& prefix) {
  layer.ffn.ln_gain.name = prefix + ".ln_gain";
  layer.ffn.ln_bias.name = prefix + ".ln_bias";
  layer.ffn.w_in.name = prefix + ".w_in";
  layer.ffn.w_out.name = prefix + ".w_out";
  for (std::size_t i = 0; i < layer.experts.size(); ++i) {
    const std::string e = prefix + ".expert." + std::to_string(i);
    layer.experts[i].in.down.name = e + ".in_down";
    layer.experts[i].in.up.name = e + ".in_up";
    layer.experts[i].out.down.name = e + ".out_down";
    layer.experts[i].out.up.name = e + ".out_up";
  }
  for (std::size_t i = 0; i < layer.router.columns.size(); ++i)
    layer.router.columns[i].name = prefix + ".router." + std::to_string(i);
}

// Appends one zero-initialized expert and one router column. Everything that
// existed before becomes frozen; the new pieces are trainable. Rank and scale
// follow the existing experts; an empty layer needs them given.
inline void expand_layer_inplace(MixLoRALayer& layer, int timestep, Rng& rng, int rank = 0,
                                 double scale = 0.0) {
  if (!layer.experts.empty()) {
    rank = layer.experts.front().rank;
    scale = layer.experts.front().scale;
  }
  require(rank >= 1 && scale > 0.0, "expand_layer: empty layer needs a LoRA rank and scale");
  for (auto& e : layer.experts) e.for_each_param([](Param& p) { p.trainable = false; });
  for (auto& c : layer.router.columns) c.trainable = false;
  LoRAExpertPair e = make_expert(layer.dim(), layer.hidden(), rank, scale, timestep, rng);
  e.for_each_param([](Param& p) { p.trainable = true; });
  layer.experts.push_back(std::move(e));
  Param col = make_router_column(layer.router.kind, layer.dim(), rng);
  col.trainable = true;
  layer.router.columns.push_back(std::move(col));
}

inline MixLoRALayer expand_layer(MixLoRALayer layer, int timestep, Rng& rng) {
  expand_layer_inplace(layer, timestep, rng);
  return layer;
}

// ---------------------------------------------------------------------------
// Single-token reference computations

inline Vec router_logits(const RowVec& x, const Router& router) {
  if (!x.allFinite()) throw NumericalError("router_logits: non-finite input");
  const Mat R = router.matrix();
  if (router.kind == RouterKind::softmax) return R * x.transpose();
  const double xn = x.norm();
  if (xn == 0.0) throw NumericalError("router_logits: zero-norm input under cosine router");
  Vec out(R.rows());
  for (Eigen::Index i = 0; i < R.rows(); ++i) out[i] = R.row(i).dot(x) / (R.row(i).norm() * xn);
  return out;
}

// Indices of the k largest values; ties resolved toward the lower index.
inline std::vector<int> topk_indices(const Eigen::Ref<const RowVec>& v, int k) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&v](int a, int b) { return v[a] > v[b]; });
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(std::max(k, 0))));
  return idx;
}

// Full softmax, then keep the k largest probabilities (no renormalization).
inline Vec gate_topk(const Vec& logits, int k) {
  require(k <= logits.size(), "gate_topk: k exceeds expert count");
  const double mx = logits.maxCoeff();
  Vec p = (logits.array() - mx).exp();
  p /= p.sum();
  Vec g = Vec::Zero(p.size());
  for (int i : topk_indices(p.transpose(), k)) g[i] = p[i];
  return g;
}

inline RowVec layer_norm_row(const RowVec& x, const RowVec& gain, const RowVec& bias,
                             double eps = 1e-5) {
  const double mu = x.mean();
  RowVec c = x.array() - mu;
  const double var = c.squaredNorm() / static_cast<double>(x.size());
  return (c / std::sqrt(var + eps)).cwiseProduct(gain) + bias;
}

inline RowVec gelu_row(const RowVec& x) {
  constexpr double kC = 0.7978845608028654;
  constexpr double kA = 0.044715;
  return (0.5 * x.array() * (1.0 + (kC * (x.array() + kA * x.array().cube())).tanh())).matrix();
}

inline RowVec frozen_ffn(const RowVec& x, const FfnWeights& f) {
  const RowVec xn = layer_norm_row(x, f.ln_gain.value.row(0), f.ln_bias.value.row(0));
  const RowVec h = xn * f.w_in.value;
  return x + gelu_row(h) * f.w_out.value;
}

// Forward for one token. `gates` overrides the router when given.
inline RowVec mixlora_forward(const RowVec& x, const MixLoRALayer& layer,
                              const Vec* gates = nullptr) {
  layer.validate();
  Vec g;
  if (gates) {
    require(gates->size() == static_cast<Eigen::Index>(layer.experts.size()),
            "mixlora_forward: gate vector length mismatch");
    g = *gates;
  } else if (!layer.experts.empty()) {
    g = gate_topk(router_logits(x, layer.router), layer.router.effective_k());
  }
  const FfnWeights& f = layer.ffn;
  const RowVec xn = layer_norm_row(x, f.ln_gain.value.row(0), f.ln_bias.value.row(0));
  RowVec h = xn * f.w_in.value;
  for (std::size_t i = 0; i < layer.experts.size(); ++i) {
    if (g[i] == 0.0) continue;
    const auto& e = layer.experts[i];
    h += g[i] * e.factor() * ((xn * e.in.down.value) * e.in.up.value);
  }
  const RowVec a = gelu_row(h);
  RowVec out = x + a * f.w_out.value;
  for (std::size_t i = 0; i < layer.experts.size(); ++i) {
    if (g[i] == 0.0) continue;
    const auto& e = layer.experts[i];
    out += g[i] * e.factor() * ((a * e.out.down.value) * e.out.up.value);
  }
  if (!out.allFinite()) throw NumericalError("mixlora_forward: non-finite output");
  return out;
}

// a * N * sum_i F_i * P_i with F the argmax-dispatch share and P the mean probability.
inline double load_balance_loss(const Mat& batch_probs, const std::vector<int>& assignments,
                                double a) {
  const Eigen::Index T = batch_probs.rows();
  const Eigen::Index N = batch_probs.cols();
  require(T > 0, "load_balance_loss: empty batch");
  require(static_cast<Eigen::Index>(assignments.size()) == T,
          "load_balance_loss: assignment count differs from batch size");
  for (Eigen::Index r = 0; r < T; ++r)
    require(std::abs(batch_probs.row(r).sum() - 1.0) <= 1e-6,
            "load_balance_loss: probability rows must sum to 1");
  RowVec F = RowVec::Zero(N);
  for (int i : assignments) F[i] += 1.0;
  F /= static_cast<double>(T);
  const RowVec P = batch_probs.colwise().mean();
  return a * static_cast<double>(N) * F.dot(P);
}

inline double cosine(const RowVec& a, const RowVec& b) { return a.dot(b) / (a.norm() * b.norm()); }

// Alignment of the newest column with the docid hidden states plus a hinge on
// its overlap with every other column.
inline double router_aux_loss(const Mat& h_id, const Router& router, int new_index) {
  require(h_id.rows() > 0, "router_aux_loss: no hidden states");
  require(new_index >= 0 && new_index < router.size(), "router_aux_loss: bad expert index");
  const RowVec rn = router.columns[new_index].value.row(0);
  double align = 0.0;
  for (Eigen::Index i = 0; i < h_id.rows(); ++i) align += 1.0 - cosine(rn, h_id.row(i));
  align /= static_cast<double>(h_id.rows());
  double hinge = 0.0;
  for (int j = 0; j < router.size(); ++j)
    if (j != new_index) hinge += std::max(0.0, cosine(router.columns[j].value.row(0), rn));
  return align + hinge;
}

// Pretraining form: every expert takes the role of the newest one in turn.
inline double router_aux_loss_symmetric(const Mat& h_id, const Router& router) {
  double total = 0.0;
  for (int i = 0; i < router.size(); ++i) total += router_aux_loss(h_id, router, i);
  return total / static_cast<double>(router.size());
}

// ---------------------------------------------------------------------------
// Differentiable versions

struct MixForward {
  ag::Var out;
  ag::Var logits;  // router logits, rows x N
  ag::Var probs;   // full softmax
  Mat gates;       // top-k gates (values)
  std::vector<int> argmax;
};

inline ag::Var router_logits(ag::Tape& t, ag::Var x, Router& router) {
  std::vector<ag::Var> cols;
  cols.reserve(router.columns.size());
  for (Param& c : router.columns) cols.push_back(t.param(c));
  ag::Var R = ag::vcat(t, cols);
  if (router.kind == RouterKind::softmax) return ag::matmul_nt(t, x, R);
  return ag::matmul_nt(t, ag::normalize_rows(t, x), ag::normalize_rows(t, R));
}

struct MixOptions {
  // Replaces router gates (rows x N) when non-empty.
  const Mat* forced_gates = nullptr;
};

inline MixForward mixlora_forward(ag::Tape& t, ag::Var x, MixLoRALayer& layer,
                                  const MixOptions& opt = {}) {
  MixForward res;
  FfnWeights& f = layer.ffn;
  const Eigen::Index rows = t.value(x).rows();
  const int n = static_cast<int>(layer.experts.size());
  ag::Var gates{};
  if (n > 0) {
    res.logits = router_logits(t, x, layer.router);
    res.probs = ag::softmax_rows(t, res.logits);
    const Mat& p = t.value(res.probs);
    res.argmax.resize(rows);
    Mat keep = Mat::Zero(rows, n);
    const int k = layer.router.effective_k();
    for (Eigen::Index r = 0; r < rows; ++r) {
      const auto idx = topk_indices(p.row(r), k);
      for (int i : idx) keep(r, i) = 1.0;
      res.argmax[r] = idx.empty() ? 0 : idx.front();
    }
    if (opt.forced_gates) {
      gates = t.constant(*opt.forced_gates);
    } else {
      gates = ag::mul_const(t, res.probs, keep);
    }
    res.gates = t.value(gates);
  }

  ag::Var xn = ag::layer_norm(t, x, t.param(f.ln_gain), t.param(f.ln_bias));
  ag::Var h = ag::matmul(t, xn, t.param(f.w_in));
  std::vector<ag::Var> gate_cols(n);
  for (int i = 0; i < n; ++i) {
    if (res.gates.col(i).isZero(0.0)) continue;
    gate_cols[i] = ag::column(t, gates, i);
    auto& e = layer.experts[i];
    ag::Var d = ag::matmul(t, ag::matmul(t, xn, t.param(e.in.down)), t.param(e.in.up));
    h = ag::add(t, h, ag::row_scale(t, ag::scale(t, d, e.factor()), gate_cols[i]));
  }
  ag::Var a = ag::gelu(t, h);
  ag::Var out = ag::add(t, x, ag::matmul(t, a, t.param(f.w_out)));
  for (int i = 0; i < n; ++i) {
    if (!gate_cols[i].valid()) continue;
    auto& e = layer.experts[i];
    ag::Var d = ag::matmul(t, ag::matmul(t, a, t.param(e.out.down)), t.param(e.out.up));
    out = ag::add(t, out, ag::row_scale(t, ag::scale(t, d, e.factor()), gate_cols[i]));
  }
  res.out = out;
  return res;
}

inline ag::Var router_aux_loss(ag::Tape& t, ag::Var h, Router& router, int new_index) {
  std::vector<ag::Var> cols;
  for (Param& c : router.columns) cols.push_back(t.param(c));
  ag::Var Rn = ag::normalize_rows(t, ag::vcat(t, cols));
  ag::Var rnew = ag::select_rows(t, Rn, {new_index});
  ag::Var cos_h = ag::matmul_nt(t, ag::normalize_rows(t, h), rnew);
  ag::Var loss = ag::affine(t, ag::mean(t, cos_h), -1.0, 1.0);
  std::vector<int> others;
  for (int j = 0; j < router.size(); ++j)
    if (j != new_index) others.push_back(j);
  if (!others.empty()) {
    ag::Var cos_o = ag::matmul_nt(t, ag::select_rows(t, Rn, others), rnew);
    loss = ag::add(t, loss, ag::sum(t, ag::relu(t, cos_o)));
  }
  return loss;
}

inline ag::Var router_aux_loss_symmetric(ag::Tape& t, ag::Var h, Router& router) {
  std::vector<ag::Var> terms;
  ag::Var total = router_aux_loss(t, h, router, 0);
  for (int i = 1; i < router.size(); ++i)
    total = ag::add(t, total, router_aux_loss(t, h, router, i));
  return ag::scale(t, total, 1.0 / router.size());
}

inline ag::Var load_balance_loss(ag::Tape& t, ag::Var probs, const std::vector<int>& argmax,
                                 double a) {
  const Mat& p = t.value(probs);
  const Eigen::Index N = p.cols();
  Mat F = Mat::Zero(1, N);
  for (int i : argmax) F(0, i) += 1.0;
  F /= static_cast<double>(argmax.size());
  ag::Var P = ag::mean_rows(t, probs);
  return ag::scale(t, ag::sum(t, ag::mul_const(t, P, F)), a * static_cast<double>(N));
}

}  // namespace mixdsi
