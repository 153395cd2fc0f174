#pragma once

// Minimal reverse-mode differentiation over row-major double matrices.
//
// A Tape records every op of one forward pass. Parameters enter through
// Tape::param (or ag::embedding) and receive their gradients in Param::grad
// when Tape::backward runs. Nodes that do not depend on a trainable parameter
// carry no backward closure, so frozen sub-graphs cost forward time only.

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mixdsi/common.hpp"

namespace mixdsi {

struct Param {
  std::string name;
  Mat value;
  Mat grad;
  bool trainable = false;
  // Multiplies the optimizer step for this parameter (slow learner).
  double lr_scale = 1.0;

  Param() = default;
  Param(std::string n, Mat v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() { grad = Mat::Zero(value.rows(), value.cols()); }
  void accumulate(const Mat& g) {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) zero_grad();
    grad += g;
  }
};

namespace ag {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape;
using Backward = std::function<void(Tape&, int)>;

class Tape {
 public:
  // With track=false nothing is differentiated (inference).
  explicit Tape(bool track = true) : track_(track) { nodes_.reserve(512); }

  bool tracking() const { return track_; }

  Var constant(Mat v) { return push(std::move(v), false, nullptr); }

  Var param(Param& p) {
    const bool g = track_ && p.trainable;
    Param* ptr = &p;
    return push(p.value, g, [ptr](Tape& t, int self) {
      ptr->accumulate(t.grad_of(self));
    });
  }

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  double scalar(Var v) const { return nodes_[v.id].value(0, 0); }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  bool any_grad(std::initializer_list<Var> vs) const {
    if (!track_) return false;
    for (Var v : vs)
      if (nodes_[v.id].needs_grad) return true;
    return false;
  }

  Var push(Mat value, bool needs_grad, Backward back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad && track_;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& grad_of(int id) const { return nodes_[id].grad; }

  void accumulate(Var v, const Mat& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void backward(Var root) {
    if (!track_ || !nodes_[root.id].needs_grad) return;
    nodes_[root.id].grad = Mat::Ones(nodes_[root.id].value.rows(), nodes_[root.id].value.cols());
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0 || !n.back) continue;
      Backward back = std::move(n.back);
      back(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Backward back;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  bool track_;
};

// ---------------------------------------------------------------------------
// Elementwise and linear ops

inline Var matmul(Tape& t, Var a, Var b) {
  Mat out = t.value(a) * t.value(b);
  return t.push(std::move(out), t.any_grad({a, b}), [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad_of(self);
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.needs_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

// a * b^T
inline Var matmul_nt(Tape& t, Var a, Var b) {
  Mat out = t.value(a) * t.value(b).transpose();
  return t.push(std::move(out), t.any_grad({a, b}), [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad_of(self);
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(b));
    if (tp.needs_grad(b)) tp.accumulate(b, g.transpose() * tp.value(a));
  });
}

inline Var add(Tape& t, Var a, Var b) {
  Mat out = t.value(a) + t.value(b);
  return t.push(std::move(out), t.any_grad({a, b}), [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad_of(self);
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

inline Var sub(Tape& t, Var a, Var b) {
  Mat out = t.value(a) - t.value(b);
  return t.push(std::move(out), t.any_grad({a, b}), [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad_of(self);
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

// y = s * a + c
inline Var affine(Tape& t, Var a, double s, double c = 0.0) {
  Mat out = (s * t.value(a).array() + c).matrix();
  return t.push(std::move(out), t.any_grad({a}), [a, s](Tape& tp, int self) {
    tp.accumulate(a, s * tp.grad_of(self));
  });
}

inline Var scale(Tape& t, Var a, double s) { return affine(t, a, s, 0.0); }

// Adds a 1 x n row to every row of a.
inline Var add_row(Tape& t, Var a, Var row) {
  Mat out = t.value(a).rowwise() + t.value(row).row(0);
  return t.push(std::move(out), t.any_grad({a, row}), [a, row](Tape& tp, int self) {
    const Mat& g = tp.grad_of(self);
    tp.accumulate(a, g);
    if (tp.needs_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

inline Var mul(Tape& t, Var a, Var b) {
  Mat out = t.value(a).cwiseProduct(t.value(b));
  return t.push(std::move(out), t.any_grad({a, b}), [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad_of(self);
    if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
    if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
  });
}

inline Var mul_const(Tape& t, Var a, const Mat& c) {
  Mat out = t.value(a).cwiseProduct(c);
  return t.push(std::move(out), t.any_grad({a}), [a, c](Tape& tp, int self) {
    tp.accumulate(a, tp.grad_of(self).cwiseProduct(c));
  });
}

inline Var relu(Tape& t, Var a) {
  Mat out = t.value(a).cwiseMax(0.0);
  return t.push(std::move(out), t.any_grad({a}), [a](Tape& tp, int self) {
    Mat mask = (tp.value(a).array() > 0.0).cast<double>().matrix();
    tp.accumulate(a, tp.grad_of(self).cwiseProduct(mask));
  });
}

// tanh approximation of GELU
inline Var gelu(Tape& t, Var a) {
  static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double kA = 0.044715;
  const Mat& x = t.value(a);
  Mat th = (kC * (x.array() + kA * x.array().cube())).tanh().matrix();
  Mat out = (0.5 * x.array() * (1.0 + th.array())).matrix();
  return t.push(std::move(out), t.any_grad({a}), [a, th](Tape& tp, int self) {
    const auto x = tp.value(a).array();
    auto d = 0.5 * (1.0 + th.array()) +
             0.5 * x * (1.0 - th.array().square()) * kC * (1.0 + 3.0 * kA * x.square());
    tp.accumulate(a, (tp.grad_of(self).array() * d).matrix());
  });
}

inline Var sum(Tape& t, Var a) {
  Mat out(1, 1);
  out(0, 0) = t.value(a).sum();
  return t.push(std::move(out), t.any_grad({a}), [a](Tape& tp, int self) {
    const Mat& v = tp.value(a);
    tp.accumulate(a, Mat::Constant(v.rows(), v.cols(), tp.grad_of(self)(0, 0)));
  });
}

inline Var mean(Tape& t, Var a) {
  const double n = static_cast<double>(t.value(a).size());
  return scale(t, sum(t, a), 1.0 / n);
}

// Column means: rows x cols -> 1 x cols.
inline Var mean_rows(Tape& t, Var a) {
  const double n = static_cast<double>(t.value(a).rows());
  Mat out = t.value(a).colwise().sum() / n;
  return t.push(std::move(out), t.any_grad({a}), [a, n](Tape& tp, int self) {
    const Mat& g = tp.grad_of(self);
    Mat full = g.replicate(tp.value(a).rows(), 1) / n;
    tp.accumulate(a, full);
  });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Var vcat(Tape& t, const std::vector<Var>& parts) {
  Eigen::Index rows = 0, cols = t.value(parts.at(0)).cols();
  bool g = false;
  for (Var p : parts) {
    rows += t.value(p).rows();
    if (t.value(p).cols() != cols) throw std::invalid_argument("vcat: column mismatch");
    g = g || t.needs_grad(p);
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, t.value(p).rows()) = t.value(p);
    r += t.value(p).rows();
  }
  return t.push(std::move(out), g, [parts](Tape& tp, int self) {
    const Mat& gr = tp.grad_of(self);
    Eigen::Index r0 = 0;
    for (Var p : parts) {
      const Eigen::Index n = tp.value(p).rows();
      if (tp.needs_grad(p)) tp.accumulate(p, gr.middleRows(r0, n));
      r0 += n;
    }
  });
}

inline Var column(Tape& t, Var a, Eigen::Index j) {
  Mat out = t.value(a).col(j);
  return t.push(std::move(out), t.any_grad({a}), [a, j](Tape& tp, int self) {
    Mat g = Mat::Zero(tp.value(a).rows(), tp.value(a).cols());
    g.col(j) = tp.grad_of(self).col(0);
    tp.accumulate(a, g);
  });
}

inline Var select_rows(Tape& t, Var a, std::vector<int> rows) {
  const Mat& v = t.value(a);
  Mat out(static_cast<Eigen::Index>(rows.size()), v.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(i) = v.row(rows[i]);
  return t.push(std::move(out), t.any_grad({a}), [a, rows](Tape& tp, int self) {
    const Mat& g = tp.grad_of(self);
    Mat full = Mat::Zero(tp.value(a).rows(), tp.value(a).cols());
    for (std::size_t i = 0; i < rows.size(); ++i) full.row(rows[i]) += g.row(i);
    tp.accumulate(a, full);
  });
}

// y[r,:] = s[r] * a[r,:] with s a column (rows x 1).
inline Var row_scale(Tape& t, Var a, Var s) {
  Mat out = t.value(a).array().colwise() * t.value(s).col(0).array();
  return t.push(std::move(out), t.any_grad({a, s}), [a, s](Tape& tp, int self) {
    const Mat& g = tp.grad_of(self);
    if (tp.needs_grad(a))
      tp.accumulate(a, (g.array().colwise() * tp.value(s).col(0).array()).matrix());
    if (tp.needs_grad(s)) tp.accumulate(s, g.cwiseProduct(tp.value(a)).rowwise().sum());
  });
}

// Rows drawn from parameter tables; gradients scatter straight into Param::grad.
inline Var embedding(Tape& t, const std::vector<std::pair<Param*, int>>& rows) {
  if (rows.empty()) throw std::invalid_argument("embedding: no rows");
  const Eigen::Index dim = rows[0].first->value.cols();
  Mat out(static_cast<Eigen::Index>(rows.size()), dim);
  bool g = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(i) = rows[i].first->value.row(rows[i].second);
    g = g || rows[i].first->trainable;
  }
  return t.push(std::move(out), g, [rows](Tape& tp, int self) {
    const Mat& gr = tp.grad_of(self);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      Param* p = rows[i].first;
      if (!p->trainable) continue;
      if (p->grad.rows() != p->value.rows()) p->zero_grad();
      p->grad.row(rows[i].second) += gr.row(i);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and softmax

inline Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5) {
  const Mat& v = t.value(x);
  const Eigen::Index n = v.cols();
  Vec mu = v.rowwise().mean();
  Mat centered = v.colwise() - mu;
  Vec inv = ((centered.array().square().rowwise().sum() / static_cast<double>(n)) + eps)
                .rsqrt()
                .matrix();
  Mat xhat = centered.array().colwise() * inv.array();
  Mat out = (xhat.array().rowwise() * t.value(gain).row(0).array()).matrix();
  out.rowwise() += t.value(bias).row(0);
  return t.push(std::move(out), t.any_grad({x, gain, bias}),
                [x, gain, bias, xhat, inv, n](Tape& tp, int self) {
                  const Mat& g = tp.grad_of(self);
                  if (tp.needs_grad(gain)) tp.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
                  if (tp.needs_grad(bias)) tp.accumulate(bias, g.colwise().sum());
                  if (tp.needs_grad(x)) {
                    Mat dxhat = g.array().rowwise() * tp.value(gain).row(0).array();
                    Vec m1 = dxhat.rowwise().mean();
                    Vec m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                    Mat dx = dxhat;
                    dx.colwise() -= m1;
                    dx -= (xhat.array().colwise() * m2.array()).matrix();
                    dx = dx.array().colwise() * inv.array();
                    tp.accumulate(x, dx);
                  }
                  (void)n;
                });
}

inline Var softmax_rows(Tape& t, Var a) {
  const Mat& v = t.value(a);
  Mat out(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double mx = v.row(r).maxCoeff();
    out.row(r) = (v.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  Mat y = out;
  return t.push(std::move(out), t.any_grad({a}), [a, y](Tape& tp, int self) {
    const Mat& g = tp.grad_of(self);
    Vec dots = g.cwiseProduct(y).rowwise().sum();
    Mat d = g;
    d.colwise() -= dots;
    tp.accumulate(a, d.cwiseProduct(y));
  });
}

inline Var normalize_rows(Tape& t, Var a) {
  const Mat& v = t.value(a);
  Vec norms = v.rowwise().norm();
  if ((norms.array() == 0.0).any()) throw NumericalError("normalize_rows: zero-norm row");
  Mat y = v.array().colwise() / norms.array();
  Mat out = y;
  return t.push(std::move(out), t.any_grad({a}), [a, y, norms](Tape& tp, int self) {
    const Mat& g = tp.grad_of(self);
    Vec dots = g.cwiseProduct(y).rowwise().sum();
    Mat d = g - (y.array().colwise() * dots.array()).matrix();
    d = d.array().colwise() / norms.array();
    tp.accumulate(a, d);
  });
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention over a padded batch.

struct AttentionLayout {
  int heads = 1;
  int q_len = 0;   // query positions per batch item
  int kv_len = 0;  // key positions per kv item
  bool causal = false;
  std::vector<int> key_len;  // valid keys per kv item
  std::vector<int> kv_of;    // batch item -> kv item; empty means identity
};

inline Var attention(Tape& t, Var q, Var k, Var v, const AttentionLayout& lay) {
  const Mat& Q = t.value(q);
  const Mat& K = t.value(k);
  const Mat& V = t.value(v);
  const int dim = static_cast<int>(Q.cols());
  const int hd = dim / lay.heads;
  const int batch = static_cast<int>(Q.rows()) / lay.q_len;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  auto kv_index = [&lay](int b) { return lay.kv_of.empty() ? b : lay.kv_of[b]; };

  Mat out = Mat::Zero(Q.rows(), dim);
  // probs[b * heads + h] is q_len x kv_len
  std::vector<Mat> probs(static_cast<std::size_t>(batch) * lay.heads);
  for (int b = 0; b < batch; ++b) {
    const int kb = kv_index(b);
    const int klen = lay.key_len.empty() ? lay.kv_len : lay.key_len[kb];
    for (int h = 0; h < lay.heads; ++h) {
      auto qb = Q.block(b * lay.q_len, h * hd, lay.q_len, hd);
      auto kblk = K.block(kb * lay.kv_len, h * hd, lay.kv_len, hd);
      auto vblk = V.block(kb * lay.kv_len, h * hd, lay.kv_len, hd);
      Mat s = (qb * kblk.transpose()) * sc;
      Mat& p = probs[b * lay.heads + h];
      p = Mat::Zero(lay.q_len, lay.kv_len);
      for (int i = 0; i < lay.q_len; ++i) {
        int lim = klen;
        if (lay.causal) lim = std::min(lim, i + 1);
        if (lim <= 0) continue;
        const double mx = s.row(i).head(lim).maxCoeff();
        double z = 0.0;
        for (int j = 0; j < lim; ++j) {
          p(i, j) = std::exp(s(i, j) - mx);
          z += p(i, j);
        }
        p.row(i).head(lim) /= z;
      }
      out.block(b * lay.q_len, h * hd, lay.q_len, hd) = p * vblk;
    }
  }
  return t.push(
      std::move(out), t.any_grad({q, k, v}),
      [q, k, v, lay, probs = std::move(probs), batch, hd, sc](Tape& tp, int self) {
        auto kv_index = [&lay](int b) { return lay.kv_of.empty() ? b : lay.kv_of[b]; };
        const Mat& g = tp.grad_of(self);
        const Mat& Qv = tp.value(q);
        const Mat& Kv = tp.value(k);
        const Mat& Vv = tp.value(v);
        Mat dq = Mat::Zero(Qv.rows(), Qv.cols());
        Mat dk = Mat::Zero(Kv.rows(), Kv.cols());
        Mat dv = Mat::Zero(Vv.rows(), Vv.cols());
        for (int b = 0; b < batch; ++b) {
          const int kb = kv_index(b);
          for (int h = 0; h < lay.heads; ++h) {
            const Mat& p = probs[b * lay.heads + h];
            auto go = g.block(b * lay.q_len, h * hd, lay.q_len, hd);
            auto qb = Qv.block(b * lay.q_len, h * hd, lay.q_len, hd);
            auto kblk = Kv.block(kb * lay.kv_len, h * hd, lay.kv_len, hd);
            auto vblk = Vv.block(kb * lay.kv_len, h * hd, lay.kv_len, hd);
            dv.block(kb * lay.kv_len, h * hd, lay.kv_len, hd) += p.transpose() * go;
            Mat dp = go * vblk.transpose();
            Vec dots = dp.cwiseProduct(p).rowwise().sum();
            Mat ds = dp;
            ds.colwise() -= dots;
            ds = ds.cwiseProduct(p) * sc;
            dq.block(b * lay.q_len, h * hd, lay.q_len, hd) += ds * kblk;
            dk.block(kb * lay.kv_len, h * hd, lay.kv_len, hd) += ds.transpose() * qb;
          }
        }
        if (tp.needs_grad(q)) tp.accumulate(q, dq);
        if (tp.needs_grad(k)) tp.accumulate(k, dk);
        if (tp.needs_grad(v)) tp.accumulate(v, dv);
      });
}

// ---------------------------------------------------------------------------
// Losses over per-row vocabulary segments [begin, end).

struct Segment {
  int begin = 0;
  int end = 0;
};

// Softmax restricted to a row's segment; zero outside it.
inline Mat segment_softmax(const Mat& logits, const std::vector<Segment>& segs) {
  Mat p = Mat::Zero(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Segment s = segs[r];
    auto row = logits.row(r).segment(s.begin, s.end - s.begin);
    const double mx = row.maxCoeff();
    auto e = (row.array() - mx).exp();
    p.row(r).segment(s.begin, s.end - s.begin) = e / e.sum();
  }
  return p;
}

// Mean over rows of -log softmax_seg(logits)[gold].
inline Var segment_cross_entropy(Tape& t, Var logits, std::vector<Segment> segs,
                                 std::vector<int> gold) {
  const Mat& z = t.value(logits);
  Mat p = segment_softmax(z, segs);
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const Segment s = segs[r];
    if (gold[r] < s.begin || gold[r] >= s.end)
      throw std::invalid_argument("segment_cross_entropy: gold index outside segment");
    const double lse = log_sum_exp(z.row(r).segment(s.begin, s.end - s.begin));
    total += lse - z(r, gold[r]);
  }
  const double n = static_cast<double>(z.rows());
  Mat out(1, 1);
  out(0, 0) = total / n;
  return t.push(std::move(out), t.any_grad({logits}), [logits, p, gold, n](Tape& tp, int self) {
    Mat d = p;
    for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, gold[r]) -= 1.0;
    tp.accumulate(logits, d * (tp.grad_of(self)(0, 0) / n));
  });
}

// Mean over rows of KL(target || softmax_seg(logits)); target is constant.
inline Var segment_kl(Tape& t, Var logits, std::vector<Segment> segs, Mat target) {
  const Mat& z = t.value(logits);
  Mat q = segment_softmax(z, segs);
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const Segment s = segs[r];
    const double lse = log_sum_exp(z.row(r).segment(s.begin, s.end - s.begin));
    for (int j = s.begin; j < s.end; ++j) {
      const double pj = target(r, j);
      if (pj <= 0.0) continue;
      // log q from the normalized probabilities so identical inputs give exactly 0
      const double lq = q(r, j) > 0.0 ? std::log(q(r, j)) : z(r, j) - lse;
      total += pj * (std::log(pj) - lq);
    }
  }
  const double n = static_cast<double>(z.rows());
  Mat out(1, 1);
  out(0, 0) = total / n;
  return t.push(std::move(out), t.any_grad({logits}),
                [logits, q, target, n](Tape& tp, int self) {
                  tp.accumulate(logits, (q - target) * (tp.grad_of(self)(0, 0) / n));
                });
}

}  // namespace ag
}  // namespace mixdsi
