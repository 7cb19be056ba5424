#pragma once

#include <Eigen/Dense>

namespace gridguard {

/// min 1/2 x'Hx + c'x  s.t.  A x <= b, with H positive definite.
struct QpProblem {
    Eigen::MatrixXd H;
    Eigen::VectorXd c;
    Eigen::MatrixXd A;
    Eigen::VectorXd b;
};

struct QpOptions {
    double feas_tol = 1e-11;
    double opt_tol = 1e-10;
    double sigma0 = 10.0;
    double sigma_max = 1e12;
    // Multiplier cap; an infeasible QP then returns an elastic (least-penalized) point.
    double y_max = 1e9;
    int max_outer = 60;
    int max_inner = 60;
};

struct QpResult {
    Eigen::VectorXd x;
    Eigen::VectorXd y;  // row multipliers
    double objective = 0.0;
    double max_violation = 0.0;
    bool feasible = false;
    int iterations = 0;
};

/// Augmented-Lagrangian outer loop with a semismooth Newton inner solve.
QpResult solve_qp(const QpProblem& qp, const QpOptions& opt = {}, const Eigen::VectorXd* x0 = nullptr);

}  // namespace gridguard
