#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tape.hpp"

namespace shlab {

// A batch of token sequences, one row per sequence. Every position except the
// last is a prediction site for next-token losses.
struct TokenBatch {
  Eigen::Matrix<int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> seq;
};

// A regression batch for vector-in / vector-out models.
struct VecBatch {
  Eigen::MatrixXd x;  // [n, d_in]
  Eigen::MatrixXd y;  // [n, d_out]
};

using Batch = std::variant<TokenBatch, VecBatch>;

struct TensorSpec {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index size() const { return rows * cols; }
};

// Scalar loss over a flat parameter vector, expressed as a tape program.
// One definition serves values, gradients, and Hessian-vector products: the
// driver slices the flat vector into per-tensor leaves (layout order, each
// tensor row-major), calls build(), and differentiates the returned scalar.
class LossFunction {
 public:
  virtual ~LossFunction() = default;

  // Tensor order here fixes the flat parameter order everywhere: training,
  // checkpoints, probes, and curvature all index the same flattening.
  virtual const std::vector<TensorSpec>& param_layout() const = 0;

  Eigen::Index param_count() const {
    Eigen::Index total = 0;
    for (const auto& s : param_layout()) total += s.size();
    return total;
  }

  virtual Tape<float>::Node build(Tape<float>& tape,
                                  std::span<const Tape<float>::Node> params,
                                  const Batch& batch) const = 0;
  virtual Tape<double>::Node build(Tape<double>& tape,
                                   std::span<const Tape<double>::Node> params,
                                   const Batch& batch) const = 0;
  virtual Tape<Dual>::Node build(Tape<Dual>& tape,
                                 std::span<const Tape<Dual>::Node> params,
                                 const Batch& batch) const = 0;
};

// CRTP adapter. Derive and provide one member template
//   template <typename T>
//   Tape<T>::Node graph(Tape<T>&, std::span<const typename Tape<T>::Node>,
//                       const Batch&) const;
template <typename Derived>
class LossFunctionOf : public LossFunction {
 public:
  Tape<float>::Node build(Tape<float>& tape,
                          std::span<const Tape<float>::Node> params,
                          const Batch& batch) const override {
    return self().template graph<float>(tape, params, batch);
  }
  Tape<double>::Node build(Tape<double>& tape,
                           std::span<const Tape<double>::Node> params,
                           const Batch& batch) const override {
    return self().template graph<double>(tape, params, batch);
  }
  Tape<Dual>::Node build(Tape<Dual>& tape,
                         std::span<const Tape<Dual>::Node> params,
                         const Batch& batch) const override {
    return self().template graph<Dual>(tape, params, batch);
  }

 private:
  const Derived& self() const { return static_cast<const Derived&>(*this); }
};

}  // namespace shlab
