#pragma once

#include <Eigen/Core>
#include <utility>

#include "errors.hpp"

namespace shlab {

// Flat f64 view of a model's parameters (or of a gradient / direction over
// them). Entries follow the owning layout's tensor order, each tensor
// flattened row-major. A zero-length vector is rejected at construction so
// every downstream norm and dot product is well-defined.
class ParamVector {
 public:
  explicit ParamVector(Eigen::VectorXd values) : v_(std::move(values)) {
    if (v_.size() == 0) {
      throw StructureError("ParamVector must have at least one element");
    }
  }

  static ParamVector zeros(Eigen::Index n) {
    if (n <= 0) throw StructureError("ParamVector must have at least one element");
    return ParamVector(Eigen::VectorXd::Zero(n));
  }

  Eigen::Index size() const { return v_.size(); }
  double operator[](Eigen::Index i) const { return v_[i]; }
  double& operator[](Eigen::Index i) { return v_[i]; }
  double norm() const { return v_.norm(); }

  const Eigen::VectorXd& vec() const { return v_; }
  Eigen::VectorXd& vec() { return v_; }

 private:
  Eigen::VectorXd v_;
};

}  // namespace shlab
