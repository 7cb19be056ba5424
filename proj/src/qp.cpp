#include "gridguard/qp.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>

namespace gridguard {

QpResult solve_qp(const QpProblem& qp, const QpOptions& opt, const Eigen::VectorXd* x0) {
    const Eigen::Index n = qp.H.rows();
    const Eigen::Index m = qp.A.rows();

    // Unit-norm rows keep sigma meaningful across mixed constraint scales.
    Eigen::VectorXd scale(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        const double nrm = qp.A.row(i).norm();
        scale[i] = nrm > 1e-300 ? 1.0 / nrm : 0.0;
    }
    const Eigen::MatrixXd A = scale.asDiagonal() * qp.A;
    const Eigen::VectorXd b = scale.cwiseProduct(qp.b);

    QpResult r;
    r.x = (x0 && x0->size() == n) ? *x0 : Eigen::VectorXd(Eigen::VectorXd::Zero(n));
    Eigen::VectorXd y = Eigen::VectorXd::Zero(m);
    double sigma = opt.sigma0;
    double prev_viol = std::numeric_limits<double>::infinity();
    const double gscale = std::max(1.0, qp.c.lpNorm<Eigen::Infinity>());

    auto merit = [&](const Eigen::VectorXd& x) {
        const Eigen::VectorXd z = (y + sigma * (A * x - b)).cwiseMax(0.0);
        return 0.5 * x.dot(qp.H * x) + qp.c.dot(x) + z.squaredNorm() / (2.0 * sigma);
    };
    auto violation = [&](const Eigen::VectorXd& x) {
        double v = 0.0;
        for (Eigen::Index i = 0; i < m; ++i) {
            if (scale[i] == 0.0) continue;  // empty row: nothing x can change
            v = std::max(v, A.row(i).dot(x) - b[i]);
        }
        return v;
    };

    for (int outer = 0; outer < opt.max_outer; ++outer) {
        for (int inner = 0; inner < opt.max_inner; ++inner) {
            ++r.iterations;
            const Eigen::VectorXd z = y + sigma * (A * r.x - b);
            Eigen::VectorXd grad = qp.H * r.x + qp.c;
            Eigen::MatrixXd M = qp.H;
            for (Eigen::Index i = 0; i < m; ++i) {
                if (z[i] <= 0.0) continue;
                grad += z[i] * A.row(i).transpose();
                M.noalias() += sigma * A.row(i).transpose() * A.row(i);
            }
            if (grad.lpNorm<Eigen::Infinity>() <= opt.opt_tol * gscale) break;
            const Eigen::VectorXd d = -M.ldlt().solve(grad);
            const double slope = grad.dot(d);
            if (!(slope < 0.0)) break;
            const double f0 = merit(r.x);
            double t = 1.0;
            bool moved = false;
            for (int ls = 0; ls < 50; ++ls, t *= 0.5) {
                const Eigen::VectorXd xn = r.x + t * d;
                if (merit(xn) <= f0 + 1e-4 * t * slope) {
                    r.x = xn;
                    moved = true;
                    break;
                }
            }
            if (!moved || t * d.lpNorm<Eigen::Infinity>() < 1e-16) break;
        }
        const Eigen::VectorXd z = y + sigma * (A * r.x - b);
        const Eigen::VectorXd y_new = z.cwiseMax(0.0).cwiseMin(opt.y_max);
        const double viol = violation(r.x);
        const double dy = (y_new - y).lpNorm<Eigen::Infinity>();
        y = y_new;
        if (viol <= opt.feas_tol && dy <= 1e-9 * std::max(1.0, y.lpNorm<Eigen::Infinity>())) break;
        if (viol > 0.25 * prev_viol) sigma = std::min(sigma * 10.0, opt.sigma_max);
        prev_viol = viol;
    }

    r.y = scale.cwiseProduct(y);
    r.objective = 0.5 * r.x.dot(qp.H * r.x) + qp.c.dot(r.x);
    r.max_violation = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) r.max_violation = std::max(r.max_violation, qp.A.row(i).dot(r.x) - qp.b[i]);
    r.feasible = violation(r.x) <= 10.0 * opt.feas_tol;
    return r;
}

}  // namespace gridguard
