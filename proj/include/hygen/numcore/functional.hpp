#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>

#include "hygen/errors.hpp"

namespace hygen {

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixT<double>;
using Vector = VectorT<double>;
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IndexMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

/// Softmax along `axis` (0: each column sums to one, 1: each row sums to one).
template <typename Derived>
MatrixT<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& x, int axis = 1) {
  using Scalar = typename Derived::Scalar;
  if (axis != 0 && axis != 1) throw DimensionError("softmax: axis must be 0 or 1");
  MatrixT<Scalar> out = x;
  if (axis == 1) {
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      auto row = out.row(r);
      row.array() = (row.array() - row.maxCoeff()).exp();
      row /= row.sum();
    }
  } else {
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
      auto col = out.col(c);
      col.array() = (col.array() - col.maxCoeff()).exp();
      col /= col.sum();
    }
  }
  return out;
}

/// Log-softmax along rows, computed as x - logsumexp(x).
template <typename Derived>
MatrixT<typename Derived::Scalar> log_softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  MatrixT<Scalar> out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const Scalar m = row.maxCoeff();
    const Scalar lse = m + std::log((row.array() - m).exp().sum());
    row.array() -= lse;
  }
  return out;
}

/// log(sum(exp(x))) along `axis`, max-subtracted. Returns a column (axis 1) or row (axis 0).
template <typename Derived>
MatrixT<typename Derived::Scalar> logsumexp(const Eigen::MatrixBase<Derived>& x, int axis = 1) {
  using Scalar = typename Derived::Scalar;
  if (axis != 0 && axis != 1) throw DimensionError("logsumexp: axis must be 0 or 1");
  if (axis == 1) {
    MatrixT<Scalar> out(x.rows(), 1);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Scalar m = x.row(r).maxCoeff();
      out(r, 0) = m + std::log((x.row(r).array() - m).exp().sum());
    }
    return out;
  }
  MatrixT<Scalar> out(1, x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const Scalar m = x.col(c).maxCoeff();
    out(0, c) = m + std::log((x.col(c).array() - m).exp().sum());
  }
  return out;
}

/// KL(p || q) for categorical distributions, with 0 * log 0 = 0.
template <typename DerivedP, typename DerivedQ>
typename DerivedP::Scalar kl_categorical(const Eigen::MatrixBase<DerivedP>& p,
                                         const Eigen::MatrixBase<DerivedQ>& q) {
  using Scalar = typename DerivedP::Scalar;
  if (p.size() != q.size()) {
    throw DimensionError("kl_categorical: " + shape_string(p.rows(), p.cols()) + " vs " +
                         shape_string(q.rows(), q.cols()));
  }
  Scalar kl = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const Scalar pi = p.reshaped()(i);
    const Scalar qi = q.reshaped()(i);
    if (pi < 0 || qi < 0) throw DomainError("kl_categorical: negative probability");
    if (pi == 0) continue;
    if (qi == 0) throw DomainError("kl_categorical: q has zero mass where p > 0");
    kl += pi * std::log(pi / qi);
  }
  return kl;
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& x) {
  return x.allFinite();
}

/// Index of the largest entry, lowest index on ties.
template <typename Derived>
Eigen::Index argmax(const Eigen::MatrixBase<Derived>& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v.reshaped()(i) > v.reshaped()(best)) best = i;
  }
  return best;
}

inline double elu(double x) { return x > 0 ? x : std::expm1(x); }

}  // namespace hygen
