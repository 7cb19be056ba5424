#include "gridguard/powerflow.hpp"

#include <Eigen/LU>

#include <cmath>
#include <ostream>

namespace gridguard {

namespace {

using cd = std::complex<double>;
constexpr cd kJ{0.0, 1.0};

Eigen::VectorXcd phasors(const Eigen::VectorXd& vm, const Eigen::VectorXd& va) {
    Eigen::VectorXcd v(vm.size());
    for (Eigen::Index i = 0; i < vm.size(); ++i) v[i] = std::polar(vm[i], va[i]);
    return v;
}

struct Layout {
    std::vector<Eigen::Index> pvpq;  // non-slack buses: angle unknowns, P equations
    std::vector<Eigen::Index> pq;    // magnitude unknowns, Q equations
};

Layout layout_of(const InjectionSpec& inj, std::size_t n) {
    Layout l;
    for (std::size_t i = 0; i < n; ++i) {
        if (i == inj.slack) continue;
        l.pvpq.push_back(static_cast<Eigen::Index>(i));
        if (!inj.pv[i]) l.pq.push_back(static_cast<Eigen::Index>(i));
    }
    return l;
}

Eigen::MatrixXd jacobian(const PowerDerivatives& d, const Layout& l) {
    const auto a = static_cast<Eigen::Index>(l.pvpq.size());
    const auto b = static_cast<Eigen::Index>(l.pq.size());
    Eigen::MatrixXd jac(a + b, a + b);
    jac.topLeftCorner(a, a) = d.dp_dva(l.pvpq, l.pvpq);
    jac.topRightCorner(a, b) = d.dp_dvm(l.pvpq, l.pq);
    jac.bottomLeftCorner(b, a) = d.dq_dva(l.pq, l.pvpq);
    jac.bottomRightCorner(b, b) = d.dq_dvm(l.pq, l.pq);
    return jac;
}

Eigen::VectorXd mismatch_vector(const Eigen::VectorXcd& s, const InjectionSpec& inj, const Layout& l) {
    const auto a = static_cast<Eigen::Index>(l.pvpq.size());
    Eigen::VectorXd f(a + static_cast<Eigen::Index>(l.pq.size()));
    for (Eigen::Index k = 0; k < a; ++k) f[k] = s[l.pvpq[k]].real() - inj.p[l.pvpq[k]];
    for (std::size_t k = 0; k < l.pq.size(); ++k) f[a + static_cast<Eigen::Index>(k)] = s[l.pq[k]].imag() - inj.q[l.pq[k]];
    return f;
}

std::size_t equation_bus(const Layout& l, Eigen::Index row) {
    const auto a = static_cast<Eigen::Index>(l.pvpq.size());
    return static_cast<std::size_t>(row < a ? l.pvpq[row] : l.pq[row - a]);
}

// Checks the LU pivots; returns the original equation row of the first vanishing pivot, or -1.
Eigen::Index singular_row(const Eigen::PartialPivLU<Eigen::MatrixXd>& lu) {
    const Eigen::VectorXd diag = lu.matrixLU().diagonal().cwiseAbs();
    const double scale = std::max(1.0, lu.matrixLU().cwiseAbs().maxCoeff());
    const auto& perm = lu.permutationP().indices();
    for (Eigen::Index k = 0; k < diag.size(); ++k) {
        if (diag[k] <= 1e-13 * scale || !std::isfinite(diag[k])) {
            for (Eigen::Index r = 0; r < perm.size(); ++r)
                if (perm[r] == k) return r;
            return k;
        }
    }
    return -1;
}

void finish(const NetworkCase& c, const AdmittanceMatrix& y, const InjectionSpec& inj, OperatingPoint& op) {
    const Eigen::VectorXcd s = bus_injections(y, op.vm, op.va);
    op.p_inj = s.real();
    op.q_inj = s.imag();
    op.p_slack = op.p_inj[inj.slack] - inj.p[inj.slack];
    op.q_slack = op.q_inj[inj.slack] - inj.q[inj.slack];
    op.s_branch = branch_flows(c, y, op.vm, op.va);
    op.s_from = op.s_branch.cwiseAbs();
    auto v = violations(c, op.vm, op.s_from);
    op.psi = std::move(v.psi);
    op.omega = std::move(v.omega);
}

}  // namespace

InjectionSpec InjectionSpec::zeros(std::size_t n_bus, std::size_t slack) {
    InjectionSpec inj;
    inj.p = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_bus));
    inj.q = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_bus));
    inj.pv.assign(n_bus, false);
    inj.vm_set = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n_bus));
    inj.slack = slack;
    return inj;
}

Eigen::VectorXcd bus_injections(const AdmittanceMatrix& y, const Eigen::VectorXd& vm, const Eigen::VectorXd& va) {
    const Eigen::VectorXcd v = phasors(vm, va);
    const Eigen::VectorXcd i = y.y() * v;
    return v.cwiseProduct(i.conjugate());
}

Eigen::VectorXcd branch_flows(const NetworkCase& c, const AdmittanceMatrix& y, const Eigen::VectorXd& vm,
                              const Eigen::VectorXd& va) {
    Eigen::VectorXcd s(static_cast<Eigen::Index>(c.n_branch()));
    for (std::size_t l = 0; l < c.n_branch(); ++l) {
        const auto& br = c.branches[l];
        const auto& a = y.branches()[l];
        const cd vf = std::polar(vm[br.from], va[br.from]);
        const cd vt = std::polar(vm[br.to], va[br.to]);
        s[l] = vf * std::conj(a.yff * vf + a.yft * vt);
    }
    return s;
}

Violations violations(const NetworkCase& c, const Eigen::VectorXd& vm, const Eigen::VectorXd& s_from) {
    Violations v{Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.n_branch())),
                 Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.n_bus()))};
    for (std::size_t l = 0; l < c.n_branch(); ++l) {
        const double rate = c.branches[l].rate;
        if (std::isfinite(rate)) v.psi[l] = std::max(s_from[l] - rate, 0.0);
    }
    for (std::size_t i = 0; i < c.n_bus(); ++i)
        v.omega[i] = std::max({vm[i] - c.buses[i].vmax, c.buses[i].vmin - vm[i], 0.0});
    return v;
}

PowerDerivatives power_derivatives(const AdmittanceMatrix& y, const Eigen::VectorXd& vm, const Eigen::VectorXd& va) {
    const Eigen::VectorXcd v = phasors(vm, va);
    const Eigen::VectorXcd ibus = y.y() * v;
    const Eigen::Index n = v.size();
    Eigen::VectorXcd vnorm(n);
    for (Eigen::Index i = 0; i < n; ++i) vnorm[i] = v[i] / vm[i];

    // dS/dVa = j diag(V) conj(diag(I) - Y diag(V)),  dS/dVm = diag(V) conj(Y diag(Vn)) + conj(diag(I)) diag(Vn)
    Eigen::MatrixXcd dva = -(y.y() * v.asDiagonal());
    dva.diagonal() += ibus;
    dva = (kJ * (v.asDiagonal() * dva.conjugate())).eval();
    Eigen::MatrixXcd dvm = v.asDiagonal() * (y.y() * vnorm.asDiagonal()).conjugate();
    dvm.diagonal() += ibus.conjugate().cwiseProduct(vnorm);
    return {dva.real(), dvm.real(), dva.imag(), dvm.imag()};
}

FlowDerivatives flow_derivatives(const NetworkCase& c, const AdmittanceMatrix& y, const Eigen::VectorXd& vm,
                                 const Eigen::VectorXd& va) {
    const auto nl = static_cast<Eigen::Index>(c.n_branch());
    const auto n = static_cast<Eigen::Index>(c.n_bus());
    FlowDerivatives d{Eigen::MatrixXd::Zero(nl, n), Eigen::MatrixXd::Zero(nl, n)};
    for (Eigen::Index l = 0; l < nl; ++l) {
        const auto& br = c.branches[l];
        const auto& a = y.branches()[l];
        const auto f = static_cast<Eigen::Index>(br.from);
        const auto t = static_cast<Eigen::Index>(br.to);
        const cd vf = std::polar(vm[f], va[f]);
        const cd vt = std::polar(vm[t], va[t]);
        const cd s = vf * std::conj(a.yff * vf + a.yft * vt);
        const double mag = std::abs(s);
        if (mag < 1e-12) continue;
        const cd ds_daf = kJ * s - kJ * vm[f] * vm[f] * std::conj(a.yff);
        const cd ds_dat = -kJ * vf * std::conj(a.yft * vt);
        const cd ds_dmf = s / vm[f] + std::conj(a.yff) * vm[f];
        const cd ds_dmt = vf * std::conj(a.yft * vt / vm[t]);
        auto proj = [&](cd ds) { return (std::conj(s) * ds).real() / mag; };
        d.ds_dva(l, f) += proj(ds_daf);
        d.ds_dva(l, t) += proj(ds_dat);
        d.ds_dvm(l, f) += proj(ds_dmf);
        d.ds_dvm(l, t) += proj(ds_dmt);
    }
    return d;
}

OperatingPoint solve_pf(const NetworkCase& c, const AdmittanceMatrix& y, const InjectionSpec& inj,
                        const OperatingPoint* start, const PfOptions& opt) {
    const std::size_t n = c.n_bus();
    OperatingPoint op;
    if (start && static_cast<std::size_t>(start->vm.size()) == n) {
        op.vm = start->vm;
        op.va = start->va;
    } else {
        op.vm = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
        op.va = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    }
    for (std::size_t i = 0; i < n; ++i)
        if (inj.pv[i] || i == inj.slack) op.vm[i] = inj.vm_set[i];
    op.va[inj.slack] = inj.va_slack;

    const Layout l = layout_of(inj, n);
    const auto a = static_cast<Eigen::Index>(l.pvpq.size());
    Eigen::VectorXd f = mismatch_vector(bus_injections(y, op.vm, op.va), inj, l);
    op.mismatch = f.size() ? f.lpNorm<Eigen::Infinity>() : 0.0;
    op.status = PfStatus::max_iterations;
    int extra = opt.polish ? 1 : 0;
    while (true) {
        if (!std::isfinite(op.mismatch)) {
            op.status = PfStatus::diverged;
            break;
        }
        if (op.mismatch <= opt.tol) {
            if (extra-- <= 0 || op.mismatch == 0.0) {
                op.status = PfStatus::converged;
                break;
            }
        }
        if (op.iterations >= opt.max_iter) break;
        const Eigen::MatrixXd jac = jacobian(power_derivatives(y, op.vm, op.va), l);
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
        if (const Eigen::Index row = singular_row(lu); row >= 0) {
            const std::size_t bus = equation_bus(l, row);
            throw PowerFlowError(bus, "singular power-flow Jacobian at bus " + std::to_string(c.buses[bus].id) +
                                          " (index " + std::to_string(bus) + ")");
        }
        const Eigen::VectorXd dx = lu.solve(-f);
        for (Eigen::Index k = 0; k < a; ++k) op.va[l.pvpq[k]] += dx[k];
        for (std::size_t k = 0; k < l.pq.size(); ++k) op.vm[l.pq[k]] += dx[a + static_cast<Eigen::Index>(k)];
        ++op.iterations;
        f = mismatch_vector(bus_injections(y, op.vm, op.va), inj, l);
        op.mismatch = f.lpNorm<Eigen::Infinity>();
        if ((op.vm.array() <= 0.0).any()) {
            op.status = PfStatus::diverged;
            break;
        }
    }
    op.converged = op.status == PfStatus::converged;
    finish(c, y, inj, op);
    return op;
}

OperatingPoint solve_pf(const NetworkCase& c, const InjectionSpec& inj, const OperatingPoint* start,
                        const PfOptions& opt) {
    return solve_pf(c, AdmittanceMatrix(c), inj, start, opt);
}

OperatingPoint try_solve_pf(const NetworkCase& c, const AdmittanceMatrix& y, const InjectionSpec& inj,
                            const OperatingPoint* start, const PfOptions& opt) noexcept {
    try {
        return solve_pf(c, y, inj, start, opt);
    } catch (const std::exception&) {
        OperatingPoint op;
        const auto n = static_cast<Eigen::Index>(c.n_bus());
        op.vm = Eigen::VectorXd::Ones(n);
        op.va = Eigen::VectorXd::Zero(n);
        op.p_inj = op.q_inj = Eigen::VectorXd::Zero(n);
        op.s_branch = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(c.n_branch()));
        op.s_from = op.psi = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.n_branch()));
        op.omega = Eigen::VectorXd::Zero(n);
        op.status = PfStatus::singular;
        op.mismatch = std::numeric_limits<double>::infinity();
        return op;
    }
}

Sensitivity sensitivities(const NetworkCase& c, const AdmittanceMatrix& y, const InjectionSpec& inj,
                          const OperatingPoint& op, const std::vector<InjectionDirection>& dirs) {
    const std::size_t n = c.n_bus();
    const Layout l = layout_of(inj, n);
    const auto a = static_cast<Eigen::Index>(l.pvpq.size());
    const auto m = static_cast<Eigen::Index>(dirs.size());
    const PowerDerivatives pd = power_derivatives(y, op.vm, op.va);
    const Eigen::MatrixXd jac = jacobian(pd, l);

    // Right-hand sides: d(spec)/du placed on the matching equation rows.
    std::vector<Eigen::Index> row_p(n, -1), row_q(n, -1);
    for (Eigen::Index k = 0; k < a; ++k) row_p[l.pvpq[k]] = k;
    for (std::size_t k = 0; k < l.pq.size(); ++k) row_q[l.pq[k]] = a + static_cast<Eigen::Index>(k);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(jac.rows(), m);
    for (Eigen::Index k = 0; k < m; ++k) {
        const auto& d = dirs[k];
        const Eigen::Index r = d.reactive ? row_q[d.bus] : row_p[d.bus];
        if (r >= 0) rhs(r, k) = 1.0;
    }
    const Eigen::MatrixXd dx = jac.rows() ? Eigen::MatrixXd(jac.partialPivLu().solve(rhs)) : Eigen::MatrixXd(0, m);

    Sensitivity s;
    s.dvm = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), m);
    s.dva = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), m);
    for (Eigen::Index k = 0; k < a; ++k) s.dva.row(l.pvpq[k]) = dx.row(k);
    for (std::size_t k = 0; k < l.pq.size(); ++k) s.dvm.row(l.pq[k]) = dx.row(a + static_cast<Eigen::Index>(k));

    const auto sl = static_cast<Eigen::Index>(inj.slack);
    s.dp_slack = pd.dp_dva.row(sl) * s.dva + pd.dp_dvm.row(sl) * s.dvm;
    s.dq_slack = pd.dq_dva.row(sl) * s.dva + pd.dq_dvm.row(sl) * s.dvm;
    for (Eigen::Index k = 0; k < m; ++k) {
        if (dirs[k].bus != inj.slack) continue;
        if (dirs[k].reactive)
            s.dq_slack[k] -= 1.0;
        else
            s.dp_slack[k] -= 1.0;
    }
    const FlowDerivatives fd = flow_derivatives(c, y, op.vm, op.va);
    s.ds_from = fd.ds_dva * s.dva + fd.ds_dvm * s.dvm;
    return s;
}

void write_operating_point_csv(std::ostream& out, const NetworkCase& c, const OperatingPoint& op) {
    out.precision(17);
    out << "kind,id,from,to,vm,va,p,q,omega,s,psi\n";
    for (std::size_t i = 0; i < c.n_bus(); ++i)
        out << "bus," << c.buses[i].id << ",,," << op.vm[i] << ',' << op.va[i] << ',' << op.p_inj[i] << ','
            << op.q_inj[i] << ',' << op.omega[i] << ",,\n";
    for (std::size_t l = 0; l < c.n_branch(); ++l)
        out << "branch," << l << ',' << c.buses[c.branches[l].from].id << ',' << c.buses[c.branches[l].to].id
            << ",,,,,," << op.s_from[l] << ',' << op.psi[l] << '\n';
}

}  // namespace gridguard
