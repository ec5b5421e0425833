#pragma once

#include "saehd/model.hpp"

#include <Eigen/Dense>

#include <string>

namespace saehd::detail {

/// Solves A x = b for a small square system; throws on (numerical) rank deficiency.
inline Eigen::VectorXd solve_small(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, const char* what) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    lu.setThreshold(1e-12);
    if (lu.rank() < A.rows()) throw SingularSystemError(std::string("singular system in ") + what);
    return lu.solve(b);
}

/// Design matrix with a leading intercept column.
inline Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& X) {
    Eigen::MatrixXd Xt(X.rows(), X.cols() + 1);
    Xt.col(0).setOnes();
    Xt.rightCols(X.cols()) = X;
    return Xt;
}

}  // namespace saehd::detail
