#pragma once

// Independent brute-force references shared by the unit and acceptance tests.

#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <vector>

namespace oracles {

using namespace gridguard;
using cd = std::complex<double>;

// Two-bus lossless line, slack at 1.0 pu: V sin(th) = -P x and V cos(th) = V^2 + Q x,
// so (V^2 + Q x)^2 + (P x)^2 = V^2 has a single high-voltage root, found by bisection.
inline std::pair<double, double> two_bus(double p_load, double q_load, double x) {
    auto f = [&](double v) {
        const double a = v * v + q_load * x;
        return a * a + (p_load * x) * (p_load * x) - v * v;
    };
    double lo = 0.5, hi = 1.5;
    for (int k = 0; k < 200; ++k) {
        const double mid = 0.5 * (lo + hi);
        (f(mid) < 0.0 ? lo : hi) = mid;
    }
    const double v = 0.5 * (lo + hi);
    return {v, std::asin(-p_load * x / v)};
}

// Gauss-Seidel with PV magnitude reset; a different algorithm from the Newton solver.
inline Eigen::VectorXcd gauss_seidel(const AdmittanceMatrix& y, const InjectionSpec& inj) {
    const auto n = static_cast<Eigen::Index>(y.size());
    const auto sl = static_cast<Eigen::Index>(inj.slack);
    Eigen::VectorXcd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = inj.vm_set[i];
    v[sl] = std::polar(inj.vm_set[sl], inj.va_slack);
    for (int it = 0; it < 200000; ++it) {
        double change = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (i == sl) continue;
            const bool pv = inj.pv[static_cast<std::size_t>(i)];
            cd sum = 0.0;
            for (Eigen::Index k = 0; k < n; ++k)
                if (k != i) sum += y.y()(i, k) * v[k];
            const double q = pv ? -std::imag(std::conj(v[i]) * (sum + y.y()(i, i) * v[i])) : inj.q[i];
            cd vi = (cd(inj.p[i], -q) / std::conj(v[i]) - sum) / y.y()(i, i);
            if (pv) vi = std::polar(inj.vm_set[i], std::arg(vi));
            change = std::max(change, std::abs(vi - v[i]));
            v[i] = vi;
        }
        if (change < 1e-15) break;
    }
    return v;
}

struct Stage1Grid {
    double cost = std::numeric_limits<double>::infinity();
    double pg2 = 0.0, v1 = 0.0, v2 = 0.0;
    std::size_t points = 0;
};

// Exhaustive search for the 3-bus fixture: generator 1 is the slack at bus 1, generator 2
// sits on PV bus 2. Dispatch step 0.001 pu, setpoint step `v_step`.
inline Stage1Grid stage1_grid(const NetworkCase& c, double p_step = 0.001, double v_step = 0.01) {
    const AdmittanceMatrix y(c);
    const Demand d = base_demand(c);
    const Generator& g1 = c.generators[0];
    const Generator& g2 = c.generators[1];
    const double tol = 1e-6;
    Stage1Grid best;
    OperatingPoint warm;
    bool have_warm = false;
    const int np = static_cast<int>(std::round((g2.pmax - g2.pmin) / p_step));
    const int nv1 = static_cast<int>(std::round((c.buses[0].vmax - c.buses[0].vmin) / v_step));
    const int nv2 = static_cast<int>(std::round((c.buses[1].vmax - c.buses[1].vmin) / v_step));
    for (int a = 0; a <= nv1; ++a)
        for (int b = 0; b <= nv2; ++b) {
            have_warm = false;
            for (int k = 0; k <= np; ++k) {
                const double pg2 = g2.pmin + k * p_step;
                InjectionSpec inj = InjectionSpec::zeros(3, 0);
                inj.vm_set << c.buses[0].vmin + a * v_step, c.buses[1].vmin + b * v_step, 1.0;
                inj.pv[1] = true;
                inj.p << -d.pd[0], pg2 - d.pd[1], -d.pd[2];
                inj.q << -d.qd[0], 0.0, -d.qd[2];
                const OperatingPoint op = try_solve_pf(c, y, inj, have_warm ? &warm : nullptr, {1e-10, 30, false});
                ++best.points;
                if (!op.converged) continue;
                warm = op;
                have_warm = true;
                const double ps = op.p_slack, qs = op.q_slack, qg2 = op.q_inj[1] + d.qd[1];
                bool ok = ps >= g1.pmin - tol && ps <= g1.pmax + tol && qs >= g1.qmin - tol && qs <= g1.qmax + tol &&
                          qg2 >= g2.qmin - tol && qg2 <= g2.qmax + tol;
                for (std::size_t i = 0; i < 3 && ok; ++i)
                    ok = op.vm[static_cast<Eigen::Index>(i)] <= c.buses[i].vmax + tol &&
                         op.vm[static_cast<Eigen::Index>(i)] >= c.buses[i].vmin - tol;
                for (std::size_t l = 0; l < c.n_branch() && ok; ++l) ok = op.s_from[static_cast<Eigen::Index>(l)] <= c.branches[l].rate + tol;
                if (!ok) continue;
                const double cost = g1.cost(c.to_mw(ps)) + g2.cost(c.to_mw(pg2));
                if (cost < best.cost) best = {cost, pg2, inj.vm_set[0], inj.vm_set[1], best.points};
            }
        }
    return best;
}

struct AttackGrid {
    double j2 = -std::numeric_limits<double>::infinity();
    double y = 0.0;
    double max_step = 0.0;  // largest change of J2 between neighbouring grid points
};

// Grid over the single attackable generator's intensity.
inline AttackGrid attack_grid(const NetworkCase& c, const HourData& h, double step = 0.1) {
    const AdmittanceMatrix y(c);
    AttackGrid g;
    double prev = std::numeric_limits<double>::quiet_NaN();
    const int n = static_cast<int>(std::round(1.0 / step));
    for (int k = 0; k <= n; ++k) {
        Eigen::VectorXd a(1);
        a << k * step;
        const double j = eval_attack(c, y, h, a, 1e9).j2;
        if (j > g.j2) g = {j, a[0], g.max_step};
        if (k > 0) g.max_step = std::max(g.max_step, std::abs(j - prev));
        prev = j;
    }
    return g;
}

/// Every grid action of one storage unit (step 0.05 of the [-1, 1] range).
inline std::vector<Eigen::VectorXd> action_grid(std::size_t n_bess, double step = 0.05) {
    const int n = static_cast<int>(std::round(2.0 / step));
    const auto dim = static_cast<Eigen::Index>(3 * n_bess);
    std::vector<Eigen::VectorXd> out;
    std::vector<int> idx(static_cast<std::size_t>(dim), 0);
    for (;;) {
        Eigen::VectorXd a(dim);
        for (Eigen::Index i = 0; i < dim; ++i) a[i] = std::min(1.0, -1.0 + idx[static_cast<std::size_t>(i)] * step);
        out.push_back(a);
        std::size_t i = 0;
        while (i < idx.size() && ++idx[i] > n) idx[i++] = 0;
        if (i == idx.size()) break;
    }
    return out;
}

struct Stage3Grid {
    double cost = std::numeric_limits<double>::infinity();
    Eigen::VectorXd a;
    double resolution = 0.0;  // spread of cost across the grid cell around the best point
};

inline Stage3Grid stage3_grid(const StepContext& ctx, const std::vector<Eigen::VectorXd>& grid, double step = 0.05) {
    Stage3Grid best;
    std::vector<double> cost(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const StepOutcome o = evaluate_action(ctx, grid[i]);
        // Slack and unit limits stay hard for the oracle as well.
        const bool ok = o.pf_ok && o.slack_excess <= 1e-9;
        cost[i] = ok ? o.cost : std::numeric_limits<double>::infinity();
        if (cost[i] < best.cost) {
            best.cost = cost[i];
            best.a = grid[i];
        }
    }
    for (std::size_t i = 0; i < grid.size(); ++i)
        if ((grid[i] - best.a).cwiseAbs().maxCoeff() <= step + 1e-12 && std::isfinite(cost[i]))
            best.resolution = std::max(best.resolution, cost[i] - best.cost);
    return best;
}

}  // namespace oracles
