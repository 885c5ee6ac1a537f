#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dual.hpp"
#include "errors.hpp"

namespace shlab {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

namespace scalar {
inline double value_of(float x) { return static_cast<double>(x); }
inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.a; }
template <typename T>
inline bool finite(const T& x) {
  using std::isfinite;
  return isfinite(x);
}
}  // namespace scalar

// Per-evaluation reverse-mode tape over row-major matrices. Nodes are
// appended in topological order; backward() replays stored closures in
// reverse. A tape is built, differentiated, and discarded within one call;
// it is never shared or reused.
//
// Scalar type T is float or double for plain training/evaluation, or Dual
// for forward-over-reverse Hessian-vector products. Backward closures do all
// arithmetic in T so tangents propagate through the reverse pass too.
template <typename T>
class Tape {
 public:
  struct Node {
    int id = -1;
  };

  Node leaf(MatX<T> value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
  }

  Node constant(MatX<T> value) { return leaf(std::move(value), false); }

  const MatX<T>& value(Node n) const { return rec(n.id).value; }
  const MatX<T>& grad(Node n) const {
    const NodeRec& r = rec(n.id);
    if (r.grad.size() == 0) {
      throw StructureError("gradient not populated; run backward first");
    }
    return r.grad;
  }

  Node add(Node a, Node b) {
    require_same_shape(a, b, "add");
    MatX<T> out = value(a) + value(b);
    return push(std::move(out), needs(a) || needs(b),
                [a, b](Tape& t, const MatX<T>& g) {
                  if (t.needs(a)) t.gref(a) += g;
                  if (t.needs(b)) t.gref(b) += g;
                });
  }

  Node sub(Node a, Node b) {
    require_same_shape(a, b, "sub");
    MatX<T> out = value(a) - value(b);
    return push(std::move(out), needs(a) || needs(b),
                [a, b](Tape& t, const MatX<T>& g) {
                  if (t.needs(a)) t.gref(a) += g;
                  if (t.needs(b)) t.gref(b) -= g;
                });
  }

  Node mul(Node a, Node b) {
    require_same_shape(a, b, "mul");
    MatX<T> out = value(a).cwiseProduct(value(b));
    return push(std::move(out), needs(a) || needs(b),
                [a, b](Tape& t, const MatX<T>& g) {
                  if (t.needs(a)) t.gref(a) += g.cwiseProduct(t.value(b));
                  if (t.needs(b)) t.gref(b) += g.cwiseProduct(t.value(a));
                });
  }

  Node scale(Node a, double c) {
    MatX<T> out = value(a) * T(c);
    return push(std::move(out), needs(a), [a, c](Tape& t, const MatX<T>& g) {
      if (t.needs(a)) t.gref(a) += g * T(c);
    });
  }

  // C = A * B
  Node matmul(Node a, Node b) {
    if (value(a).cols() != value(b).rows()) {
      throw StructureError("matmul: inner dimensions disagree");
    }
    MatX<T> out = value(a) * value(b);
    return push(std::move(out), needs(a) || needs(b),
                [a, b](Tape& t, const MatX<T>& g) {
                  if (t.needs(a)) t.gref(a) += g * t.value(b).transpose();
                  if (t.needs(b)) t.gref(b) += t.value(a).transpose() * g;
                });
  }

  // x [n,d] + r [1,d], r broadcast over rows.
  Node add_row(Node x, Node r) {
    if (value(r).rows() != 1 || value(r).cols() != value(x).cols()) {
      throw StructureError("add_row: broadcast row must be [1, cols(x)]");
    }
    MatX<T> out = value(x);
    out.rowwise() += value(r).row(0);
    return push(std::move(out), needs(x) || needs(r),
                [x, r](Tape& t, const MatX<T>& g) {
                  if (t.needs(x)) t.gref(x) += g;
                  if (t.needs(r)) t.gref(r).row(0) += g.colwise().sum();
                });
  }

  // out.row(i) = table.row(ids[i]); backward scatter-adds.
  Node rows(Node table, std::vector<int32_t> ids) {
    const auto& tab = value(table);
    for (int32_t id : ids) {
      if (id < 0 || id >= tab.rows()) {
        throw DomainError("rows: index " + std::to_string(id) +
                          " outside table of " + std::to_string(tab.rows()));
      }
    }
    MatX<T> out(static_cast<Eigen::Index>(ids.size()), tab.cols());
    for (size_t i = 0; i < ids.size(); ++i) out.row(i) = tab.row(ids[i]);
    auto idp = std::make_shared<std::vector<int32_t>>(std::move(ids));
    return push(std::move(out), needs(table),
                [table, idp](Tape& t, const MatX<T>& g) {
                  if (!t.needs(table)) return;
                  MatX<T>& gt = t.gref(table);
                  for (size_t i = 0; i < idp->size(); ++i) {
                    gt.row((*idp)[i]) += g.row(i);
                  }
                });
  }

  // Root-mean-square norm per row with a learned gain:
  //   y_ij = x_ij * g_j / sqrt(mean_j x_ij^2 + eps)
  Node rmsnorm(Node x, Node gain, double eps = 1e-6) {
    const MatX<T>& xv = value(x);
    if (value(gain).rows() != 1 || value(gain).cols() != xv.cols()) {
      throw StructureError("rmsnorm: gain must be [1, cols(x)]");
    }
    const Eigen::Index n = xv.rows(), d = xv.cols();
    auto rinv = std::make_shared<VecX<T>>(n);
    MatX<T> out(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      T ss = T(0.0);
      for (Eigen::Index j = 0; j < d; ++j) ss += xv(i, j) * xv(i, j);
      using std::sqrt;
      const T r = T(1.0) / sqrt(ss / T(double(d)) + T(eps));
      (*rinv)[i] = r;
      for (Eigen::Index j = 0; j < d; ++j) {
        out(i, j) = xv(i, j) * r * value(gain)(0, j);
      }
    }
    return push(
        std::move(out), needs(x) || needs(gain),
        [x, gain, rinv](Tape& t, const MatX<T>& g) {
          const MatX<T>& xv = t.value(x);
          const MatX<T>& gv = t.value(gain);
          const Eigen::Index n = xv.rows(), d = xv.cols();
          for (Eigen::Index i = 0; i < n; ++i) {
            const T r = (*rinv)[i];
            if (t.needs(gain)) {
              for (Eigen::Index j = 0; j < d; ++j) {
                t.gref(gain)(0, j) += g(i, j) * xv(i, j) * r;
              }
            }
            if (t.needs(x)) {
              T dot = T(0.0);
              for (Eigen::Index j = 0; j < d; ++j) {
                dot += g(i, j) * gv(0, j) * xv(i, j);
              }
              const T k = r * r * r * dot / T(double(d));
              for (Eigen::Index j = 0; j < d; ++j) {
                t.gref(x)(i, j) += g(i, j) * r * gv(0, j) - k * xv(i, j);
              }
            }
          }
        });
  }

  // Exact (erf-based) GELU.
  Node gelu(Node x) {
    const MatX<T>& xv = value(x);
    MatX<T> out(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      out(i) = gelu_fwd(xv(i));
    }
    return push(std::move(out), needs(x), [x](Tape& t, const MatX<T>& g) {
      if (!t.needs(x)) return;
      const MatX<T>& xv = t.value(x);
      MatX<T>& gx = t.gref(x);
      for (Eigen::Index i = 0; i < xv.size(); ++i) {
        gx(i) += g(i) * gelu_deriv(xv(i));
      }
    });
  }

  Node tanh_fn(Node x) {
    const MatX<T>& xv = value(x);
    auto yv = std::make_shared<MatX<T>>(xv.rows(), xv.cols());
    using std::tanh;
    for (Eigen::Index i = 0; i < xv.size(); ++i) (*yv)(i) = tanh(xv(i));
    MatX<T> out = *yv;
    return push(std::move(out), needs(x), [x, yv](Tape& t, const MatX<T>& g) {
      if (!t.needs(x)) return;
      MatX<T>& gx = t.gref(x);
      for (Eigen::Index i = 0; i < yv->size(); ++i) {
        gx(i) += g(i) * (T(1.0) - (*yv)(i) * (*yv)(i));
      }
    });
  }

  // Multi-head causal self-attention core. q, k, v are [B*S, d] with d split
  // into n_heads slices; rows are B consecutive blocks of S positions.
  // Softmax rows are max-subtracted; masked entries never enter exp().
  Node causal_attention(Node q, Node k, Node v, int n_heads, Eigen::Index seq_len) {
    const MatX<T>& qv = value(q);
    if (value(k).rows() != qv.rows() || value(k).cols() != qv.cols() ||
        value(v).rows() != qv.rows() || value(v).cols() != qv.cols()) {
      throw StructureError("causal_attention: q, k, v must share one shape");
    }
    if (n_heads <= 0 || qv.cols() % n_heads != 0) {
      throw StructureError("causal_attention: heads must divide width");
    }
    if (seq_len <= 0 || qv.rows() % seq_len != 0) {
      throw StructureError("causal_attention: seq_len must divide rows");
    }
    const Eigen::Index batches = qv.rows() / seq_len;
    const Eigen::Index dh = qv.cols() / n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    auto probs = std::make_shared<std::vector<MatX<T>>>();
    probs->reserve(static_cast<size_t>(batches) * n_heads);
    MatX<T> out(qv.rows(), qv.cols());
    using std::exp;
    for (Eigen::Index b = 0; b < batches; ++b) {
      for (int h = 0; h < n_heads; ++h) {
        const auto Q = qv.block(b * seq_len, h * dh, seq_len, dh);
        const auto K = value(k).block(b * seq_len, h * dh, seq_len, dh);
        const auto V = value(v).block(b * seq_len, h * dh, seq_len, dh);
        MatX<T> S = (Q * K.transpose()) * T(att_scale);
        MatX<T> P = MatX<T>::Zero(seq_len, seq_len);
        for (Eigen::Index i = 0; i < seq_len; ++i) {
          T m = S(i, 0);
          for (Eigen::Index j = 1; j <= i; ++j) {
            if (S(i, j) > m) m = S(i, j);
          }
          T z = T(0.0);
          for (Eigen::Index j = 0; j <= i; ++j) {
            P(i, j) = exp(S(i, j) - m);
            z += P(i, j);
          }
          const T inv = T(1.0) / z;
          for (Eigen::Index j = 0; j <= i; ++j) P(i, j) *= inv;
        }
        out.block(b * seq_len, h * dh, seq_len, dh) = P * V;
        probs->push_back(std::move(P));
      }
    }
    return push(
        std::move(out), needs(q) || needs(k) || needs(v),
        [q, k, v, n_heads, seq_len, dh, batches, att_scale, probs](
            Tape& t, const MatX<T>& g) {
          for (Eigen::Index b = 0; b < batches; ++b) {
            for (int h = 0; h < n_heads; ++h) {
              const MatX<T>& P = (*probs)[b * n_heads + h];
              const auto dO = g.block(b * seq_len, h * dh, seq_len, dh);
              const auto K = t.value(k).block(b * seq_len, h * dh, seq_len, dh);
              const auto Q = t.value(q).block(b * seq_len, h * dh, seq_len, dh);
              const auto V = t.value(v).block(b * seq_len, h * dh, seq_len, dh);
              if (t.needs(v)) {
                t.gref(v).block(b * seq_len, h * dh, seq_len, dh) +=
                    P.transpose() * dO;
              }
              if (!t.needs(q) && !t.needs(k)) continue;
              MatX<T> dP = dO * V.transpose();
              MatX<T> dS(seq_len, seq_len);
              for (Eigen::Index i = 0; i < seq_len; ++i) {
                T acc = T(0.0);
                for (Eigen::Index j = 0; j <= i; ++j) acc += dP(i, j) * P(i, j);
                for (Eigen::Index j = 0; j < seq_len; ++j) {
                  dS(i, j) = j <= i ? P(i, j) * (dP(i, j) - acc) : T(0.0);
                }
              }
              dS *= T(att_scale);
              if (t.needs(q)) {
                t.gref(q).block(b * seq_len, h * dh, seq_len, dh) += dS * K;
              }
              if (t.needs(k)) {
                t.gref(k).block(b * seq_len, h * dh, seq_len, dh) +=
                    dS.transpose() * Q;
              }
            }
          }
        });
  }

  // Mean token-level cross entropy of logits [n, V] against integer targets.
  Node mean_cross_entropy(Node logits, std::vector<int32_t> targets) {
    const MatX<T>& lv = value(logits);
    if (static_cast<Eigen::Index>(targets.size()) != lv.rows()) {
      throw StructureError("mean_cross_entropy: one target per logits row");
    }
    const Eigen::Index n = lv.rows(), vocab = lv.cols();
    for (int32_t tgt : targets) {
      if (tgt < 0 || tgt >= vocab) {
        throw DomainError("mean_cross_entropy: target outside vocabulary");
      }
    }
    auto p = std::make_shared<MatX<T>>(n, vocab);
    using std::exp;
    using std::log;
    T total = T(0.0);
    for (Eigen::Index i = 0; i < n; ++i) {
      T m = lv(i, 0);
      for (Eigen::Index j = 1; j < vocab; ++j) {
        if (lv(i, j) > m) m = lv(i, j);
      }
      T z = T(0.0);
      for (Eigen::Index j = 0; j < vocab; ++j) {
        (*p)(i, j) = exp(lv(i, j) - m);
        z += (*p)(i, j);
      }
      const T inv = T(1.0) / z;
      for (Eigen::Index j = 0; j < vocab; ++j) (*p)(i, j) *= inv;
      total += m + log(z) - lv(i, targets[i]);
    }
    MatX<T> out(1, 1);
    out(0, 0) = total / T(double(n));
    auto tgtp = std::make_shared<std::vector<int32_t>>(std::move(targets));
    return push(std::move(out), needs(logits),
                [logits, p, tgtp, n](Tape& t, const MatX<T>& g) {
                  if (!t.needs(logits)) return;
                  const T w = g(0, 0) / T(double(n));
                  MatX<T>& gl = t.gref(logits);
                  for (Eigen::Index i = 0; i < n; ++i) {
                    for (Eigen::Index j = 0; j < gl.cols(); ++j) {
                      gl(i, j) += w * (*p)(i, j);
                    }
                    gl(i, (*tgtp)[i]) -= w;
                  }
                });
  }

  Node sum(Node x) {
    MatX<T> out(1, 1);
    out(0, 0) = value(x).sum();
    return push(std::move(out), needs(x), [x](Tape& t, const MatX<T>& g) {
      if (t.needs(x)) {
        t.gref(x).array() += g(0, 0);
      }
    });
  }

  Node dot(Node a, Node b) {
    require_same_shape(a, b, "dot");
    MatX<T> out(1, 1);
    out(0, 0) = value(a).cwiseProduct(value(b)).sum();
    return push(std::move(out), needs(a) || needs(b),
                [a, b](Tape& t, const MatX<T>& g) {
                  if (t.needs(a)) t.gref(a) += t.value(b) * g(0, 0);
                  if (t.needs(b)) t.gref(b) += t.value(a) * g(0, 0);
                });
  }

  // Mean squared error against a constant target of the same shape.
  Node mean_sq(Node pred, MatX<T> target) {
    const MatX<T>& pv = value(pred);
    if (target.rows() != pv.rows() || target.cols() != pv.cols()) {
      throw StructureError("mean_sq: target shape must match prediction");
    }
    const Eigen::Index n = pv.size();
    auto tp = std::make_shared<MatX<T>>(std::move(target));
    MatX<T> diff = pv - *tp;
    MatX<T> out(1, 1);
    out(0, 0) = diff.cwiseProduct(diff).sum() / T(double(n));
    return push(std::move(out), needs(pred),
                [pred, tp, n](Tape& t, const MatX<T>& g) {
                  if (!t.needs(pred)) return;
                  t.gref(pred) +=
                      (t.value(pred) - *tp) * (g(0, 0) * T(2.0) / T(double(n)));
                });
  }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
  void backward(Node loss) {
    NodeRec& lr = rec(loss.id);
    if (lr.value.rows() != 1 || lr.value.cols() != 1) {
      throw StructureError("backward: root must be a scalar node");
    }
    gref(loss)(0, 0) = T(1.0);
    for (int i = loss.id; i >= 0; --i) {
      NodeRec& r = nodes_[i];
      if (r.backfn && r.grad.size() != 0) {
        r.backfn(*this, r.grad);
      }
    }
  }

  size_t node_count() const { return nodes_.size(); }

  bool needs(Node n) const { return rec(n.id).requires_grad; }

  // Gradient accumulator for a node, zero-initialized on first touch.
  MatX<T>& gref(Node n) {
    NodeRec& r = rec(n.id);
    if (r.grad.size() == 0) {
      r.grad = MatX<T>::Zero(r.value.rows(), r.value.cols());
    }
    return r.grad;
  }

 private:
  struct NodeRec {
    MatX<T> value;
    MatX<T> grad;
    bool requires_grad = false;
    std::function<void(Tape&, const MatX<T>&)> backfn;
  };

  static T gelu_fwd(T x) {
    using std::erf;
    return T(0.5) * x * (T(1.0) + erf(x * T(0.70710678118654752440)));
  }
  static T gelu_deriv(T x) {
    using std::erf;
    using std::exp;
    const T cdf = T(0.5) * (T(1.0) + erf(x * T(0.70710678118654752440)));
    const T pdf = T(0.39894228040143267794) * exp(x * x * T(-0.5));
    return cdf + x * pdf;
  }

  NodeRec& rec(int id) {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) {
      throw StructureError("node id does not belong to this tape");
    }
    return nodes_[id];
  }
  const NodeRec& rec(int id) const {
    return const_cast<Tape*>(this)->rec(id);
  }

  void require_same_shape(Node a, Node b, const char* op) const {
    if (value(a).rows() != value(b).rows() ||
        value(a).cols() != value(b).cols()) {
      throw StructureError(std::string(op) + ": operand shapes disagree");
    }
  }

  Node push(MatX<T> value, bool requires_grad,
            std::function<void(Tape&, const MatX<T>&)> backfn) {
    NodeRec r;
    r.value = std::move(value);
    r.requires_grad = requires_grad;
    if (requires_grad) r.backfn = std::move(backfn);
    nodes_.push_back(std::move(r));
    return Node{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<NodeRec> nodes_;
};

}  // namespace shlab
