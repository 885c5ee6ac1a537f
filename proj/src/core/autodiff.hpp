#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "loss.hpp"
#include "param_vector.hpp"
#include "tape.hpp"

namespace shlab {

namespace detail {

// Slices a flat parameter vector into per-tensor leaves following the layout.
template <typename T>
std::vector<typename Tape<T>::Node> make_leaves(Tape<T>& tape,
                                                const LossFunction& f,
                                                const VecX<T>& theta,
                                                bool requires_grad) {
  const auto& layout = f.param_layout();
  Eigen::Index total = 0;
  for (const auto& s : layout) total += s.size();
  if (theta.size() != total) {
    throw StructureError("parameter vector length " +
                         std::to_string(theta.size()) +
                         " does not match layout size " + std::to_string(total));
  }
  std::vector<typename Tape<T>::Node> leaves;
  leaves.reserve(layout.size());
  Eigen::Index off = 0;
  for (const auto& s : layout) {
    MatX<T> m(s.rows, s.cols);
    for (Eigen::Index i = 0; i < s.size(); ++i) m(i / s.cols, i % s.cols) = theta[off + i];
    leaves.push_back(tape.leaf(std::move(m), requires_grad));
    off += s.size();
  }
  return leaves;
}

// Locates which tensor a flat index falls in, for error messages.
inline std::string locate(const LossFunction& f, Eigen::Index flat) {
  Eigen::Index off = 0;
  for (const auto& s : f.param_layout()) {
    if (flat < off + s.size()) {
      return s.name + "[" + std::to_string(flat - off) + "]";
    }
    off += s.size();
  }
  return "<out of range>";
}

template <typename T>
void gather_grads(Tape<T>& tape,
                  const std::vector<typename Tape<T>::Node>& leaves,
                  const LossFunction& f, VecX<T>& out) {
  const auto& layout = f.param_layout();
  Eigen::Index off = 0;
  for (size_t li = 0; li < layout.size(); ++li) {
    const auto& s = layout[li];
    const MatX<T>& g = tape.gref(leaves[li]);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      out[off + i] = g(i / s.cols, i % s.cols);
    }
    off += s.size();
  }
}

}  // namespace detail

// Loss value at theta, in T precision. Leaves are constants, so no backward
// closures are recorded.
template <typename T>
T loss_value_t(const LossFunction& f, const VecX<T>& theta, const Batch& batch) {
  Tape<T> tape;
  auto leaves = detail::make_leaves<T>(tape, f, theta, false);
  auto loss = f.build(tape, leaves, batch);
  const auto& lv = tape.value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw StructureError("loss must evaluate to a scalar");
  }
  if (!scalar::finite(lv(0, 0))) throw NumericError("loss is not finite");
  return lv(0, 0);
}

// Loss and gradient in one reverse pass, in T precision.
template <typename T>
std::pair<T, VecX<T>> value_and_grad_t(const LossFunction& f,
                                       const VecX<T>& theta,
                                       const Batch& batch) {
  Tape<T> tape;
  auto leaves = detail::make_leaves<T>(tape, f, theta, true);
  auto loss = f.build(tape, leaves, batch);
  const auto& lv = tape.value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw StructureError("loss must evaluate to a scalar");
  }
  if (!scalar::finite(lv(0, 0))) throw NumericError("loss is not finite");
  tape.backward(loss);
  VecX<T> grad(theta.size());
  detail::gather_grads<T>(tape, leaves, f, grad);
  for (Eigen::Index i = 0; i < grad.size(); ++i) {
    if (!scalar::finite(grad[i])) {
      throw NumericError("gradient is not finite at " + detail::locate(f, i));
    }
  }
  return {lv(0, 0), std::move(grad)};
}

struct ValueGrad {
  double value;
  ParamVector grad;
};

// f64 convenience wrappers over the templated workers.

inline double loss_value(const LossFunction& f, const ParamVector& theta,
                         const Batch& batch) {
  return loss_value_t<double>(f, theta.vec(), batch);
}

inline ValueGrad value_and_grad(const LossFunction& f, const ParamVector& theta,
                                const Batch& batch) {
  auto [v, g] = value_and_grad_t<double>(f, theta.vec(), batch);
  return {v, ParamVector(std::move(g))};
}

// Exact Hessian-vector product by forward-over-reverse: evaluate the gradient
// in Dual arithmetic at theta + eps*v; the tangent of the gradient is H v.
// hvp(theta, 0) is the zero vector by linearity, no special case needed.
inline ParamVector hvp(const LossFunction& f, const ParamVector& theta,
                       const ParamVector& v, const Batch& batch) {
  if (v.size() != theta.size()) {
    throw StructureError("hvp: direction length must match parameter length");
  }
  VecX<Dual> seed(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    seed[i] = Dual(theta[i], v[i]);
  }
  Tape<Dual> tape;
  auto leaves = detail::make_leaves<Dual>(tape, f, seed, true);
  auto loss = f.build(tape, leaves, batch);
  const auto& lv = tape.value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw StructureError("loss must evaluate to a scalar");
  }
  if (!scalar::finite(lv(0, 0))) throw NumericError("loss is not finite");
  tape.backward(loss);
  VecX<Dual> grad(theta.size());
  detail::gather_grads<Dual>(tape, leaves, f, grad);
  Eigen::VectorXd out(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    if (!scalar::finite(grad[i])) {
      throw NumericError("hvp is not finite at " + detail::locate(f, i));
    }
    out[i] = grad[i].b;
  }
  return ParamVector(std::move(out));
}

}  // namespace shlab
