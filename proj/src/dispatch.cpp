#include "gridguard/dispatch.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace gridguard {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Layout of the Stage-1 reduced problem.
struct Problem {
    const NetworkCase& c;
    const AdmittanceMatrix y;
    const Demand& d;
    std::size_t slack_gen;
    std::vector<std::size_t> ctrl_gens;
    std::vector<std::size_t> gen_buses;  // unique, includes slack bus
    std::vector<Eigen::Index> pvpq, pq;
    Eigen::VectorXd lo, hi;
    PfOptions pf;

    Problem(const NetworkCase& cc, const Demand& dd, double pf_tol) : c(cc), y(cc), d(dd), slack_gen(cc.slack_generator()) {
        for (std::size_t g = 0; g < c.n_gen(); ++g) {
            if (g != slack_gen) ctrl_gens.push_back(g);
            if (std::find(gen_buses.begin(), gen_buses.end(), c.generators[g].bus) == gen_buses.end())
                gen_buses.push_back(c.generators[g].bus);
        }
        std::sort(gen_buses.begin(), gen_buses.end());
        for (std::size_t i = 0; i < c.n_bus(); ++i) {
            if (i == c.slack_bus()) continue;
            pvpq.push_back(static_cast<Eigen::Index>(i));
            if (std::find(gen_buses.begin(), gen_buses.end(), i) == gen_buses.end()) pq.push_back(static_cast<Eigen::Index>(i));
        }
        const auto n = static_cast<Eigen::Index>(ctrl_gens.size() + gen_buses.size());
        lo.resize(n);
        hi.resize(n);
        Eigen::Index k = 0;
        for (std::size_t g : ctrl_gens) {
            lo[k] = c.generators[g].pmin;
            hi[k++] = c.generators[g].pmax;
        }
        for (std::size_t b : gen_buses) {
            lo[k] = c.buses[b].vmin;
            hi[k++] = c.buses[b].vmax;
        }
        pf.tol = pf_tol;
        pf.polish = true;
    }

    Eigen::Index size() const { return lo.size(); }

    InjectionSpec injection(const Eigen::VectorXd& u) const {
        InjectionSpec inj = InjectionSpec::zeros(c.n_bus(), c.slack_bus());
        inj.p = -d.pd;
        inj.q = -d.qd;
        Eigen::Index k = 0;
        for (std::size_t g : ctrl_gens) inj.p[c.generators[g].bus] += u[k++];
        for (std::size_t b : gen_buses) {
            inj.vm_set[b] = u[k++];
            if (b != inj.slack) inj.pv[b] = true;
        }
        return inj;
    }

    struct Eval {
        bool ok = false;
        double cost = kInf;
        Eigen::VectorXd cons;  // c(u) <= 0
        OperatingPoint op;
        Eigen::VectorXd q_bus;
    };

    Eval evaluate(const Eigen::VectorXd& u, const OperatingPoint* start) const {
        Eval e;
        const InjectionSpec inj = injection(u);
        e.op = try_solve_pf(c, y, inj, start, pf);
        if (!e.op.converged) return e;
        e.ok = true;
        const double base = c.base_mva;
        e.cost = c.generators[slack_gen].cost(e.op.p_slack * base);
        for (std::size_t k = 0; k < ctrl_gens.size(); ++k)
            e.cost += c.generators[ctrl_gens[k]].cost(u[static_cast<Eigen::Index>(k)] * base);

        std::vector<double> cons;
        const auto& sg = c.generators[slack_gen];
        cons.push_back(sg.pmin - e.op.p_slack);
        cons.push_back(e.op.p_slack - sg.pmax);
        e.q_bus = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.n_bus()));
        for (std::size_t b : gen_buses) {
            double qmin = 0.0, qmax = 0.0;
            for (const auto& g : c.generators)
                if (g.bus == b) {
                    qmin += g.qmin;
                    qmax += g.qmax;
                }
            const double qg = e.op.q_inj[b] + d.qd[b];
            e.q_bus[b] = qg;
            cons.push_back(qmin - qg);
            cons.push_back(qg - qmax);
        }
        for (std::size_t i = 0; i < c.n_bus(); ++i) {
            if (std::find(gen_buses.begin(), gen_buses.end(), i) != gen_buses.end()) continue;
            cons.push_back(c.buses[i].vmin - e.op.vm[i]);
            cons.push_back(e.op.vm[i] - c.buses[i].vmax);
        }
        for (std::size_t l = 0; l < c.n_branch(); ++l)
            if (std::isfinite(c.branches[l].rate)) cons.push_back(e.op.s_from[l] - c.branches[l].rate);
        e.cons = Eigen::Map<Eigen::VectorXd>(cons.data(), static_cast<Eigen::Index>(cons.size()));
        return e;
    }

    std::string describe(std::size_t row) const {
        std::ostringstream s;
        const std::size_t nq = 2 * gen_buses.size();
        std::size_t n_pq = c.n_bus() - gen_buses.size();
        if (row < 2) {
            s << "slack generator " << (row == 0 ? "pmin" : "pmax");
        } else if (row < 2 + nq) {
            const std::size_t b = gen_buses[(row - 2) / 2];
            s << "bus " << c.buses[b].id << ((row - 2) % 2 ? " qmax" : " qmin");
        } else if (row < 2 + nq + 2 * n_pq) {
            std::size_t k = (row - 2 - nq) / 2;
            std::size_t bus = 0;
            for (std::size_t i = 0; i < c.n_bus(); ++i) {
                if (std::find(gen_buses.begin(), gen_buses.end(), i) != gen_buses.end()) continue;
                if (k-- == 0) {
                    bus = i;
                    break;
                }
            }
            s << "bus " << c.buses[bus].id << ((row - 2 - nq) % 2 ? " vmax" : " vmin");
        } else {
            std::size_t k = row - 2 - nq - 2 * n_pq;
            for (std::size_t l = 0; l < c.n_branch(); ++l) {
                if (!std::isfinite(c.branches[l].rate)) continue;
                if (k-- == 0) {
                    s << "branch " << c.buses[c.branches[l].from].id << "-" << c.buses[c.branches[l].to].id << " rate";
                    break;
                }
            }
        }
        return s.str();
    }
};

struct Augmented {
    const Problem& pb;
    Eigen::VectorXd mu;
    double rho;
    int pf_solves = 0;

    double value(const Problem::Eval& e) const {
        if (!e.ok) return kInf;
        double v = e.cost;
        for (Eigen::Index i = 0; i < e.cons.size(); ++i) {
            const double t = std::max(0.0, mu[i] + rho * e.cons[i]);
            v += (t * t - mu[i] * mu[i]) / (2.0 * rho);
        }
        return v;
    }

    double at(const Eigen::VectorXd& u, const OperatingPoint* start) {
        ++pf_solves;
        return value(pb.evaluate(u, start));
    }

    Eigen::VectorXd fd_gradient(const Eigen::VectorXd& u, const OperatingPoint& start, double h) {
        Eigen::VectorXd g(u.size());
        for (Eigen::Index i = 0; i < u.size(); ++i) {
            Eigen::VectorXd up = u, dn = u;
            up[i] += h;
            dn[i] -= h;
            g[i] = (at(up, &start) - at(dn, &start)) / (2.0 * h);
        }
        return g;
    }

    // Reduced gradient by the adjoint of the power-flow equations.
    Eigen::VectorXd gradient(const Eigen::VectorXd& u, const Problem::Eval& e) const {
        const NetworkCase& c = pb.c;
        const auto n = static_cast<Eigen::Index>(c.n_bus());
        const auto s = static_cast<Eigen::Index>(c.slack_bus());
        const double base = c.base_mva;
        const PowerDerivatives pd = power_derivatives(pb.y, e.op.vm, e.op.va);
        const FlowDerivatives fd = flow_derivatives(c, pb.y, e.op.vm, e.op.va);
        auto w = [&](Eigen::Index row) { return std::max(0.0, mu[row] + rho * e.cons[row]); };

        Eigen::RowVectorXd gva = Eigen::RowVectorXd::Zero(n), gvm = Eigen::RowVectorXd::Zero(n);
        Eigen::Index row = 0;
        const double w_slack = c.generators[pb.slack_gen].cost.marginal(e.op.p_slack * base) * base - w(row) + w(row + 1);
        row += 2;
        gva += w_slack * pd.dp_dva.row(s);
        gvm += w_slack * pd.dp_dvm.row(s);
        for (std::size_t b : pb.gen_buses) {
            const double wq = -w(row) + w(row + 1);
            row += 2;
            gva += wq * pd.dq_dva.row(static_cast<Eigen::Index>(b));
            gvm += wq * pd.dq_dvm.row(static_cast<Eigen::Index>(b));
        }
        for (std::size_t i = 0; i < c.n_bus(); ++i) {
            if (std::find(pb.gen_buses.begin(), pb.gen_buses.end(), i) != pb.gen_buses.end()) continue;
            gvm[static_cast<Eigen::Index>(i)] += -w(row) + w(row + 1);
            row += 2;
        }
        for (std::size_t l = 0; l < c.n_branch(); ++l) {
            if (!std::isfinite(c.branches[l].rate)) continue;
            const double wl = w(row++);
            gva += wl * fd.ds_dva.row(static_cast<Eigen::Index>(l));
            gvm += wl * fd.ds_dvm.row(static_cast<Eigen::Index>(l));
        }

        // Adjoint solve J^T lambda = d(phi)/dx.
        const auto np = static_cast<Eigen::Index>(pb.pvpq.size());
        const auto nq = static_cast<Eigen::Index>(pb.pq.size());
        Eigen::MatrixXd jac(np + nq, np + nq);
        jac.topLeftCorner(np, np) = pd.dp_dva(pb.pvpq, pb.pvpq);
        jac.topRightCorner(np, nq) = pd.dp_dvm(pb.pvpq, pb.pq);
        jac.bottomLeftCorner(nq, np) = pd.dq_dva(pb.pq, pb.pvpq);
        jac.bottomRightCorner(nq, nq) = pd.dq_dvm(pb.pq, pb.pq);
        Eigen::VectorXd rhs(np + nq);
        rhs << gva(pb.pvpq).transpose(), gvm(pb.pq).transpose();
        const Eigen::VectorXd lam = jac.rows() ? Eigen::VectorXd(jac.transpose().partialPivLu().solve(rhs)) : Eigen::VectorXd();

        Eigen::VectorXd g(u.size());
        Eigen::Index k = 0;
        std::vector<Eigen::Index> p_row(static_cast<std::size_t>(n), -1);
        for (Eigen::Index j = 0; j < np; ++j) p_row[static_cast<std::size_t>(pb.pvpq[j])] = j;
        for (std::size_t gi : pb.ctrl_gens) {
            const std::size_t b = c.generators[gi].bus;
            double v = c.generators[gi].cost.marginal(u[k] * base) * base;
            if (static_cast<Eigen::Index>(b) == s) v -= w_slack;  // raises the fixed part at the slack bus
            const Eigen::Index r = p_row[b];
            if (r >= 0) v += lam[r];  // dG/dp = -1 on that row
            g[k++] = v;
        }
        for (std::size_t b : pb.gen_buses) {
            const auto bi = static_cast<Eigen::Index>(b);
            double v = gvm[bi];
            if (np) v -= lam.head(np).dot(pd.dp_dvm(pb.pvpq, Eigen::seqN(bi, 1)).col(0));
            if (nq) v -= lam.tail(nq).dot(pd.dq_dvm(pb.pq, Eigen::seqN(bi, 1)).col(0));
            g[k++] = v;
        }
        return g;
    }
};

Eigen::VectorXd project(const Eigen::VectorXd& u, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
    return u.cwiseMax(lo).cwiseMin(hi);
}

double projected_gradient_norm(const Eigen::VectorXd& u, const Eigen::VectorXd& g, const Problem& pb) {
    if (!u.size()) return 0.0;
    return (project(u - g, pb.lo, pb.hi) - u).lpNorm<Eigen::Infinity>();
}

struct InnerResult {
    Eigen::VectorXd u;
    Problem::Eval eval;
    Eigen::VectorXd grad;
    double pg_norm = kInf;
};

// Projected BFGS with Armijo backtracking on the augmented objective.
InnerResult minimize(Augmented& al, Eigen::VectorXd u, const Stage1Options& opt) {
    const Problem& pb = al.pb;
    const Eigen::Index n = u.size();
    InnerResult r;
    r.eval = pb.evaluate(u, nullptr);
    ++al.pf_solves;
    if (!r.eval.ok) {
        r.u = u;
        return r;
    }
    double f = al.value(r.eval);
    Eigen::VectorXd g = al.gradient(u, r.eval);
    Eigen::MatrixXd h_inv = Eigen::MatrixXd::Identity(n, n) * 1e-3;
    bool scaled = false;
    for (int it = 0; it < opt.max_inner; ++it) {
        r.pg_norm = projected_gradient_norm(u, g, pb);
        if (r.pg_norm <= 0.1 * opt.stationarity_tol) break;

        std::vector<bool> free(static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) {
            const bool at_lo = u[i] <= pb.lo[i] + 1e-12 && g[i] > 0.0;
            const bool at_hi = u[i] >= pb.hi[i] - 1e-12 && g[i] < 0.0;
            free[static_cast<std::size_t>(i)] = !(at_lo || at_hi);
        }
        bool accepted = false;
        for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
            Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
            if (attempt == 0) {
                Eigen::VectorXd gf = g;
                for (Eigen::Index i = 0; i < n; ++i)
                    if (!free[static_cast<std::size_t>(i)]) gf[i] = 0.0;
                d = -h_inv * gf;
                for (Eigen::Index i = 0; i < n; ++i)
                    if (!free[static_cast<std::size_t>(i)]) d[i] = 0.0;
                if (g.dot(d) >= 0.0) continue;
            } else {
                h_inv = Eigen::MatrixXd::Identity(n, n) * h_inv.diagonal().mean();
                d = -g;
            }
            double alpha = 1.0;
            for (int ls = 0; ls < 60; ++ls, alpha *= 0.5) {
                const Eigen::VectorXd un = project(u + alpha * d, pb.lo, pb.hi);
                const Eigen::VectorXd step = un - u;
                if (step.lpNorm<Eigen::Infinity>() < 1e-16) break;
                Problem::Eval en = pb.evaluate(un, &r.eval.op);
                ++al.pf_solves;
                const double fn = al.value(en);
                if (!std::isfinite(fn)) continue;
                const Eigen::VectorXd gn = al.gradient(un, en);
                // Near the optimum function differences drown in rounding; fall back to the gradient.
                const bool flat = std::abs(fn - f) <= 1e-14 * std::max(1.0, std::abs(f));
                if (fn <= f + 1e-4 * g.dot(step) ||
                    (flat && projected_gradient_norm(un, gn, pb) < projected_gradient_norm(u, g, pb))) {
                    const Eigen::VectorXd yv = gn - g;
                    const double sy = step.dot(yv);
                    if (sy > 1e-12 * step.norm() * yv.norm()) {
                        if (!scaled) {
                            h_inv = Eigen::MatrixXd::Identity(n, n) * (sy / yv.squaredNorm());
                            scaled = true;
                        }
                        const double rr = 1.0 / sy;
                        const Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n) - rr * yv * step.transpose();
                        h_inv = v.transpose() * h_inv * v + rr * step * step.transpose();
                    }
                    u = un;
                    f = fn;
                    g = gn;
                    r.eval = std::move(en);
                    accepted = true;
                    break;
                }
            }
        }
        if (!accepted) break;
    }
    r.u = u;
    r.grad = g;
    r.pg_norm = projected_gradient_norm(u, g, pb);
    return r;
}

}  // namespace

Eigen::VectorXd split_reactive(const NetworkCase& c, const Eigen::VectorXd& q_bus) {
    Eigen::VectorXd qg = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.n_gen()));
    for (std::size_t b = 0; b < c.n_bus(); ++b) {
        std::vector<std::size_t> at;
        double qmin = 0.0, qmax = 0.0;
        for (std::size_t g = 0; g < c.n_gen(); ++g)
            if (c.generators[g].bus == b) {
                at.push_back(g);
                qmin += c.generators[g].qmin;
                qmax += c.generators[g].qmax;
            }
        if (at.empty()) continue;
        for (std::size_t g : at) {
            const auto& gen = c.generators[g];
            if (qmax - qmin > 1e-12)
                qg[g] = gen.qmin + (q_bus[b] - qmin) / (qmax - qmin) * (gen.qmax - gen.qmin);
            else
                qg[g] = q_bus[b] / static_cast<double>(at.size());
        }
    }
    return qg;
}

DispatchSlice solve_stage1(const NetworkCase& c, const Demand& demand, const Stage1Options& opt) {
    Problem pb(c, demand, opt.pf_tol);
    const Eigen::Index n = pb.size();

    // Proportional start: total demand shared by capacity, voltages at their setpoints.
    Eigen::VectorXd u(n);
    double cap = 0.0;
    for (const auto& g : c.generators) cap += g.pmax;
    const double share = cap > 0.0 ? std::clamp(demand.pd.sum() / cap, 0.0, 1.0) : 0.0;
    Eigen::Index k = 0;
    for (std::size_t g : pb.ctrl_gens) u[k++] = share * c.generators[g].pmax;
    for (std::size_t b : pb.gen_buses) {
        double vg = c.buses[b].vm0;
        for (const auto& g : c.generators)
            if (g.bus == b) vg = g.vg;
        u[k++] = vg;
    }
    u = project(u, pb.lo, pb.hi);

    Augmented al{pb, Eigen::VectorXd(), opt.rho0};
    Problem::Eval e0 = pb.evaluate(u, nullptr);
    if (!e0.ok) {
        // Flat-voltage fallback in case the stored setpoints diverge.
        for (Eigen::Index i = static_cast<Eigen::Index>(pb.ctrl_gens.size()); i < n; ++i) u[i] = std::clamp(1.0, pb.lo[i], pb.hi[i]);
        e0 = pb.evaluate(u, nullptr);
    }
    al.mu = Eigen::VectorXd::Zero(e0.ok ? e0.cons.size() : 0);

    DispatchSlice out;
    InnerResult best;
    double prev_viol = kInf;
    int outer = 0;
    if (e0.ok) {
        for (; outer < opt.max_outer; ++outer) {
            best = minimize(al, u, opt);
            if (!best.eval.ok) break;
            u = best.u;
            const Eigen::VectorXd& cons = best.eval.cons;
            const double viol = std::max(0.0, cons.maxCoeff());
            const Eigen::VectorXd mu_new = (al.mu + al.rho * cons).cwiseMax(0.0);
            const double dmu = (mu_new - al.mu).lpNorm<Eigen::Infinity>();
            const bool done = viol <= opt.feas_tol && best.pg_norm <= opt.stationarity_tol && dmu <= 1e-3;
            if (done) break;
            al.mu = mu_new;
            if (viol > opt.feas_tol && viol > 0.25 * prev_viol) al.rho = std::min(al.rho * 10.0, opt.rho_max);
            prev_viol = viol;
        }
    }

    out.outer_iterations = outer;
    out.penalty = al.rho;
    out.pf_solves = al.pf_solves;
    const Eigen::Index ng = static_cast<Eigen::Index>(c.n_gen());
    out.pg = Eigen::VectorXd::Zero(ng);
    out.qg = Eigen::VectorXd::Zero(ng);
    if (!best.eval.ok) {
        out.feasible = false;
        out.report.push_back("power flow did not converge");
        out.cost = kInf;
        out.max_violation = kInf;
        out.op = best.eval.op;
        out.vm = out.op.vm;
        out.va = out.op.va;
        return out;
    }
    // Re-solve at the standard tolerance so the stored state matches what downstream stages rebuild.
    const InjectionSpec inj = pb.injection(u);
    out.op = solve_pf(c, pb.y, inj, &best.eval.op, PfOptions{});
    out.vm = out.op.vm;
    out.va = out.op.va;
    for (std::size_t j = 0; j < pb.ctrl_gens.size(); ++j) out.pg[static_cast<Eigen::Index>(pb.ctrl_gens[j])] = u[static_cast<Eigen::Index>(j)];
    out.pg[static_cast<Eigen::Index>(pb.slack_gen)] = out.op.p_slack;
    Eigen::VectorXd q_bus = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.n_bus()));
    for (std::size_t b : pb.gen_buses) q_bus[b] = out.op.q_inj[b] + demand.qd[b];
    out.qg = split_reactive(c, q_bus);
    out.cost = best.eval.cost;
    out.stationarity = best.pg_norm;
    out.max_violation = std::max(0.0, best.eval.cons.maxCoeff());
    out.feasible = out.max_violation <= opt.feas_tol;
    for (Eigen::Index i = 0; i < best.eval.cons.size(); ++i)
        if (best.eval.cons[i] > opt.feas_tol) {
            std::ostringstream s;
            s << pb.describe(static_cast<std::size_t>(i)) << " exceeded by " << best.eval.cons[i] << " p.u.";
            out.report.push_back(s.str());
        }
    return out;
}

Stage1GradientCheck stage1_gradient_check(const NetworkCase& c, const Demand& demand, double rho, double fd_step) {
    Problem pb(c, demand, 1e-13);
    Eigen::VectorXd u = (pb.lo + pb.hi) / 2.0;
    const Problem::Eval e = pb.evaluate(u, nullptr);
    if (!e.ok) throw std::runtime_error("stage-1 gradient check: power flow failed at the midpoint");
    Augmented al{pb, Eigen::VectorXd::Zero(e.cons.size()), rho};
    return {al.gradient(u, e), al.fd_gradient(u, e.op, fd_step)};
}

DispatchSlice solve_stage1(const NetworkCase& c, const LoadProfile& profile, std::size_t t, const Stage1Options& opt) {
    DispatchSlice s = solve_stage1(c, demand_at(c, profile, t), opt);
    s.t = t;
    return s;
}

DispatchSolution solve_horizon(const NetworkCase& c, const LoadProfile& profile, const Stage1Options& opt, Exec exec) {
    DispatchSolution sol;
    sol.slices.resize(profile.hours());
    parallel_for(exec, profile.hours(), [&](std::size_t t) { sol.slices[t] = solve_stage1(c, profile, t, opt); });
    for (const auto& s : sol.slices) {
        sol.total_cost += s.cost;
        sol.feasible = sol.feasible && s.feasible;
    }
    return sol;
}

InjectionSpec dispatch_injection(const NetworkCase& c, const Demand& demand, const DispatchSlice& x,
                                 const Eigen::VectorXd& gen_scale) {
    InjectionSpec inj = InjectionSpec::zeros(c.n_bus(), c.slack_bus());
    inj.p = -demand.pd;
    inj.q = -demand.qd;
    const std::size_t sg = c.slack_generator();
    for (std::size_t g = 0; g < c.n_gen(); ++g) {
        if (g == sg) continue;
        const std::size_t b = c.generators[g].bus;
        inj.p[b] += gen_scale[g] * x.pg[g];
        inj.q[b] += gen_scale[g] * x.qg[g];
    }
    inj.vm_set[inj.slack] = x.vm[inj.slack];
    inj.va_slack = x.va[inj.slack];
    return inj;
}

}  // namespace gridguard
