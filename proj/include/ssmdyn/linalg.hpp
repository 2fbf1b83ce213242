#pragma once

// Thin Eigen views over row-major tensors, used for the dense products in the
// block projections and the training model.

#include <Eigen/Dense>

#include "ssmdyn/tensor.hpp"

namespace ssmdyn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMatrix>;
using ConstMatrixView = Eigen::Map<const RowMatrix>;

inline MatrixView as_matrix(Tensor& t) {
    return MatrixView(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline ConstMatrixView as_matrix(const Tensor& t) {
    return ConstMatrixView(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

/// a * b
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.cols() == b.rows(), "matmul: inner dimensions differ");
    Tensor out(a.rows(), b.cols());
    as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
    return out;
}

/// a^T * b
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require(a.rows() == b.rows(), "matmul_tn: row counts differ");
    Tensor out(a.cols(), b.cols());
    as_matrix(out).noalias() = as_matrix(a).transpose() * as_matrix(b);
    return out;
}

/// a * b^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require(a.cols() == b.cols(), "matmul_nt: column counts differ");
    Tensor out(a.rows(), b.rows());
    as_matrix(out).noalias() = as_matrix(a) * as_matrix(b).transpose();
    return out;
}

}  // namespace ssmdyn
