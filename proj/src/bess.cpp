#include "gridguard/bess.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

namespace gridguard {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
std::atomic<std::size_t> g_projection_calls{0};

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

}  // namespace

BessPhysical action_to_physical(const NetworkCase& c, const Eigen::VectorXd& a) {
    const std::size_t nb = c.n_bess();
    if (static_cast<std::size_t>(a.size()) != 3 * nb) throw std::invalid_argument("action dimension must be 3B");
    BessPhysical p{Eigen::VectorXd(idx(nb)), Eigen::VectorXd(idx(nb)), Eigen::VectorXd(idx(nb))};
    for (std::size_t b = 0; b < nb; ++b) {
        const auto& u = c.bess[b];
        p.p_ch[idx(b)] = u.p_ch_max / 2.0 * (a[idx(b)] + 1.0);
        p.p_dis[idx(b)] = u.p_dis_max / 2.0 * (a[idx(nb + b)] + 1.0);
        p.q[idx(b)] = u.q_min + (u.q_max - u.q_min) / 2.0 * (a[idx(2 * nb + b)] + 1.0);
    }
    return p;
}

BessPhysical from_net(const Eigen::VectorXd& p_net, const Eigen::VectorXd& q) {
    return {(-p_net).cwiseMax(0.0), p_net.cwiseMax(0.0), q};
}

BessPhysical arbitrate(const BessPhysical& raw) { return from_net(raw.p_net(), raw.q); }

Eigen::VectorXd physical_to_action(const NetworkCase& c, const Eigen::VectorXd& p_net, const Eigen::VectorXd& q,
                                   const Eigen::VectorXd& near) {
    const std::size_t nb = c.n_bess();
    Eigen::VectorXd a = near;
    for (std::size_t b = 0; b < nb; ++b) {
        const auto& u = c.bess[b];
        const double range = u.q_max - u.q_min;
        if (range > 0.0) a[idx(2 * nb + b)] = std::clamp(2.0 * (q[idx(b)] - u.q_min) / range - 1.0, -1.0, 1.0);

        // Points (x, y) = (a_ch, a_dis) with  D/2 (y+1) - C/2 (x+1) = p  form a line; take the
        // point on its in-box segment closest to `near`.
        const double cc = u.p_ch_max / 2.0, dd = u.p_dis_max / 2.0;
        const double k = p_net[idx(b)] + cc - dd;  // dd*y - cc*x = k
        const double x0 = near[idx(b)], y0 = near[idx(nb + b)];
        if (cc == 0.0 && dd == 0.0) continue;
        if (cc == 0.0) {
            a[idx(nb + b)] = std::clamp(k / dd, -1.0, 1.0);
            continue;
        }
        if (dd == 0.0) {
            a[idx(b)] = std::clamp(-k / cc, -1.0, 1.0);
            continue;
        }
        // Parametrize x = s, y = (k + cc s)/dd.
        double s_lo = -1.0, s_hi = 1.0;
        // y in [-1,1]  =>  s in [(-dd - k)/cc, (dd - k)/cc]
        s_lo = std::max(s_lo, (-dd - k) / cc);
        s_hi = std::min(s_hi, (dd - k) / cc);
        const double slope = cc / dd;
        double s = (x0 + slope * (y0 - k / dd)) / (1.0 + slope * slope);
        if (s_lo <= s_hi)
            s = std::clamp(s, s_lo, s_hi);
        else
            s = std::clamp(s, -1.0, 1.0);
        a[idx(b)] = s;
        a[idx(nb + b)] = std::clamp((k + cc * s) / dd, -1.0, 1.0);
    }
    return a;
}

Eigen::VectorXd idle_action(const NetworkCase& c, const Eigen::VectorXd& near) {
    const auto nb = idx(c.n_bess());
    Eigen::VectorXd q(nb);
    for (Eigen::Index b = 0; b < nb; ++b) q[b] = std::clamp(0.0, c.bess[static_cast<std::size_t>(b)].q_min, c.bess[static_cast<std::size_t>(b)].q_max);
    return physical_to_action(c, Eigen::VectorXd::Zero(nb), q, near);
}

double soc_step(const BessUnit& u, double soc, double p_ch, double p_dis, double base_mva, double dt) {
    return soc + (u.eta_ch * p_ch - p_dis / u.eta_dis) * base_mva * dt / u.e_max_mwh;
}

NetInterval p_net_interval(const BessUnit& u, double soc, double base_mva, double dt) {
    const double head = std::max(0.0, u.soc_max - soc) * u.e_max_mwh / (u.eta_ch * base_mva * dt);
    const double room = std::max(0.0, soc - u.soc_min) * u.eta_dis * u.e_max_mwh / (base_mva * dt);
    return {-std::min(u.p_ch_max, head), std::min(u.p_dis_max, room)};
}

StepContext make_step_context(const NetworkCase& c, const AdmittanceMatrix& y, const HourData& h,
                              const Eigen::VectorXd& attack, const Eigen::VectorXd& soc) {
    StepContext ctx;
    ctx.c = &c;
    ctx.y = &y;
    ctx.base = dispatch_injection(c, h.demand, h.x, attack_scale(c, attack));
    ctx.idle = try_solve_pf(c, y, ctx.base, &h.x.op);
    ctx.soc = soc;
    return ctx;
}

InjectionSpec with_storage(const StepContext& ctx, const Eigen::VectorXd& p_net, const Eigen::VectorXd& q) {
    InjectionSpec inj = ctx.base;
    for (std::size_t b = 0; b < ctx.c->n_bess(); ++b) {
        inj.p[idx(ctx.c->bess[b].bus)] += p_net[idx(b)];
        inj.q[idx(ctx.c->bess[b].bus)] += q[idx(b)];
    }
    return inj;
}

std::size_t residual_h_size(const NetworkCase& c) { return 2 * (c.n_bus() - 1) + c.n_bess(); }
std::size_t residual_g_size(const NetworkCase& c) {
    return 2 * c.n_bus() + c.n_branch() + 2 * c.n_bess() + 4 + 6 * c.n_bess();
}

StepOutcome evaluate_step(const StepContext& ctx, const Eigen::VectorXd& p_net, const Eigen::VectorXd& q,
                          const FeasibilityTol& tol) {
    const NetworkCase& c = *ctx.c;
    const std::size_t n = c.n_bus(), nb = c.n_bess(), nl = c.n_branch();
    const double base = c.base_mva;
    StepOutcome o;
    o.phys = from_net(p_net, q);
    const InjectionSpec inj = with_storage(ctx, p_net, q);
    const OperatingPoint* start = ctx.idle.converged ? &ctx.idle : nullptr;
    o.op = try_solve_pf(c, *ctx.y, inj, start);
    o.pf_ok = o.op.converged;

    o.soc_next.resize(idx(nb));
    for (std::size_t b = 0; b < nb; ++b)
        o.soc_next[idx(b)] = soc_step(c.bess[b], ctx.soc[idx(b)], o.phys.p_ch[idx(b)], o.phys.p_dis[idx(b)], base, ctx.dt);

    o.h = Eigen::VectorXd::Zero(idx(residual_h_size(c)));
    o.g = Eigen::VectorXd::Zero(idx(residual_g_size(c)));
    Eigen::Index k = 0;
    for (int part = 0; part < 2; ++part)
        for (std::size_t i = 0; i < n; ++i) {
            if (i == inj.slack) continue;
            if (!o.pf_ok)
                o.h[k++] = tol.pf_cap;
            else
                o.h[k++] = part == 0 ? o.op.p_inj[idx(i)] - inj.p[idx(i)] : o.op.q_inj[idx(i)] - inj.q[idx(i)];
        }
    for (std::size_t b = 0; b < nb; ++b) {
        const auto& u = c.bess[b];
        const double energy = (u.eta_ch * o.phys.p_ch[idx(b)] - o.phys.p_dis[idx(b)] / u.eta_dis) * base * ctx.dt;
        o.h[k++] = (o.soc_next[idx(b)] - ctx.soc[idx(b)]) * u.e_max_mwh - energy;
    }

    k = 0;
    for (std::size_t i = 0; i < n; ++i) o.g[k++] = o.pf_ok ? o.op.vm[idx(i)] - c.buses[i].vmax : tol.pf_cap;
    for (std::size_t i = 0; i < n; ++i) o.g[k++] = o.pf_ok ? c.buses[i].vmin - o.op.vm[idx(i)] : tol.pf_cap;
    for (std::size_t l = 0; l < nl; ++l) {
        const double rate = c.branches[l].rate;
        o.g[k++] = !o.pf_ok ? tol.pf_cap : std::isfinite(rate) ? o.op.s_from[idx(l)] - rate : -1.0;
    }
    for (std::size_t b = 0; b < nb; ++b) o.g[k++] = o.soc_next[idx(b)] - c.bess[b].soc_max;
    for (std::size_t b = 0; b < nb; ++b) o.g[k++] = c.bess[b].soc_min - o.soc_next[idx(b)];
    const auto& sl = c.slack_limits;
    auto lim = [&](double v) { return !o.pf_ok ? tol.pf_cap : std::isfinite(v) ? v : -1.0; };
    o.g[k++] = lim(o.op.p_slack - sl.p_max);
    o.g[k++] = lim(sl.p_min - o.op.p_slack);
    o.g[k++] = lim(o.op.q_slack - sl.q_max);
    o.g[k++] = lim(sl.q_min - o.op.q_slack);
    for (std::size_t b = 0; b < nb; ++b) {
        const auto& u = c.bess[b];
        o.g[k++] = o.phys.p_ch[idx(b)] - u.p_ch_max;
        o.g[k++] = -o.phys.p_ch[idx(b)];
        o.g[k++] = o.phys.p_dis[idx(b)] - u.p_dis_max;
        o.g[k++] = -o.phys.p_dis[idx(b)];
        o.g[k++] = q[idx(b)] - u.q_max;
        o.g[k++] = u.q_min - q[idx(b)];
    }

    for (std::size_t b = 0; b < nb; ++b)
        o.bess_cost += c.bess[b].cost_per_mw * (o.phys.p_ch[idx(b)] + o.phys.p_dis[idx(b)]) * base;
    if (o.pf_ok) {
        o.slack_cost = c.slack_cost(o.op.p_slack * base);
        o.line_term = c.penalties.xi_line * o.op.max_psi();
        o.voltage_term = c.penalties.xi_voltage * o.op.max_omega();
        o.slack_excess = std::max({o.op.p_slack - sl.p_max, sl.p_min - o.op.p_slack, o.op.q_slack - sl.q_max,
                                   sl.q_min - o.op.q_slack, 0.0});
        o.cost = o.bess_cost + o.slack_cost + o.line_term + o.voltage_term;
    } else {
        o.slack_excess = kInf;
        o.cost = kInf;
    }
    o.member = o.pf_ok && o.h.lpNorm<Eigen::Infinity>() <= tol.h && o.g.maxCoeff() <= tol.g;
    return o;
}

StepOutcome evaluate_action(const StepContext& ctx, const Eigen::VectorXd& a, const FeasibilityTol& tol) {
    const BessPhysical p = arbitrate(action_to_physical(*ctx.c, a.cwiseMax(-1.0).cwiseMin(1.0)));
    return evaluate_step(ctx, p.p_net(), p.q, tol);
}

LinearModel linearize(const StepContext& ctx, const Eigen::VectorXd& p_net, const Eigen::VectorXd& q,
                      const OperatingPoint& op) {
    const NetworkCase& c = *ctx.c;
    const std::size_t nb = c.n_bess();
    std::vector<InjectionDirection> dirs;
    for (std::size_t b = 0; b < nb; ++b) dirs.push_back({c.bess[b].bus, false});
    for (std::size_t b = 0; b < nb; ++b) dirs.push_back({c.bess[b].bus, true});
    const Sensitivity s = sensitivities(c, *ctx.y, with_storage(ctx, p_net, q), op, dirs);
    LinearModel m;
    m.u0.resize(idx(2 * nb));
    m.u0 << p_net, q;
    m.vm0 = op.vm;
    m.va0 = op.va;
    m.s0 = op.s_from;
    m.dvm = s.dvm;
    m.dva = s.dva;
    m.ds = s.ds_from;
    m.ps0 = op.p_slack;
    m.qs0 = op.q_slack;
    m.dps = s.dp_slack;
    m.dqs = s.dq_slack;
    return m;
}

// ---------------------------------------------------------------------------
// Projection

namespace {

// Affine action -> u = [p_net; q] map, u = T a + t0.
struct ActionMap {
    Eigen::MatrixXd T;
    Eigen::VectorXd t0;
};

ActionMap action_map(const NetworkCase& c) {
    const std::size_t nb = c.n_bess();
    ActionMap m{Eigen::MatrixXd::Zero(idx(2 * nb), idx(3 * nb)), Eigen::VectorXd::Zero(idx(2 * nb))};
    for (std::size_t b = 0; b < nb; ++b) {
        const auto& u = c.bess[b];
        m.T(idx(b), idx(b)) = -u.p_ch_max / 2.0;
        m.T(idx(b), idx(nb + b)) = u.p_dis_max / 2.0;
        m.t0[idx(b)] = (u.p_dis_max - u.p_ch_max) / 2.0;
        m.T(idx(nb + b), idx(2 * nb + b)) = (u.q_max - u.q_min) / 2.0;
        m.t0[idx(nb + b)] = (u.q_max + u.q_min) / 2.0;
    }
    return m;
}

double violation_of(const StepOutcome& o) {
    if (!o.pf_ok) return kInf;
    return std::max(o.h.lpNorm<Eigen::Infinity>(), std::max(0.0, o.g.maxCoeff()));
}

// Rows  G u <= r  from the linear model: voltage, thermal, slack limits (all tightened by margin).
void network_rows(const NetworkCase& c, const LinearModel& m, double margin, std::vector<Eigen::RowVectorXd>& G,
                  std::vector<double>& r) {
    const Eigen::VectorXd& u0 = m.u0;
    for (std::size_t i = 0; i < c.n_bus(); ++i) {
        const Eigen::RowVectorXd d = m.dvm.row(idx(i));
        if (d.lpNorm<Eigen::Infinity>() == 0.0) continue;
        const double v0 = m.vm0[idx(i)] - d.dot(u0);
        G.push_back(d);
        r.push_back(c.buses[i].vmax - margin - v0);
        G.push_back(-d);
        r.push_back(v0 - c.buses[i].vmin - margin);
    }
    for (std::size_t l = 0; l < c.n_branch(); ++l) {
        if (!std::isfinite(c.branches[l].rate)) continue;
        const Eigen::RowVectorXd d = m.ds.row(idx(l));
        G.push_back(d);
        r.push_back(c.branches[l].rate - margin - (m.s0[idx(l)] - d.dot(u0)));
    }
    const auto& sl = c.slack_limits;
    const double p0 = m.ps0 - m.dps.dot(u0), q0 = m.qs0 - m.dqs.dot(u0);
    if (std::isfinite(sl.p_max)) {
        G.push_back(m.dps);
        r.push_back(sl.p_max - margin - p0);
    }
    if (std::isfinite(sl.p_min)) {
        G.push_back(-m.dps);
        r.push_back(p0 - sl.p_min - margin);
    }
    if (std::isfinite(sl.q_max)) {
        G.push_back(m.dqs);
        r.push_back(sl.q_max - margin - q0);
    }
    if (std::isfinite(sl.q_min)) {
        G.push_back(-m.dqs);
        r.push_back(q0 - sl.q_min - margin);
    }
}

struct SqpOutcome {
    Eigen::VectorXd best;  // closest member found
    bool found = false;
    Eigen::VectorXd least;  // least violating iterate
    double least_violation = kInf;
    int iterations = 0;
};

// Distances are measured to `target`, which may lie outside the action box.
SqpOutcome sqp_project(const StepContext& ctx, const Eigen::VectorXd& target, const Eigen::VectorXd& seed,
                       const ProjectionOptions& opt) {
    const NetworkCase& c = *ctx.c;
    const std::size_t nb = c.n_bess();
    const Eigen::Index na = idx(3 * nb);
    const ActionMap am = action_map(c);
    SqpOutcome out;

    auto consider = [&](const Eigen::VectorXd& a, const StepOutcome& o) {
        const double v = violation_of(o);
        if (v < out.least_violation) {
            out.least_violation = v;
            out.least = a;
        }
        if (o.member && (!out.found || (a - target).squaredNorm() < (out.best - target).squaredNorm())) {
            out.best = a;
            out.found = true;
        }
    };

    Eigen::VectorXd ak = seed;
    StepOutcome ok = evaluate_action(ctx, ak, opt.tol);
    consider(ak, ok);
    double vk = violation_of(ok);
    double w = 0.0;
    LinearModel model;
    bool have_model = false;
    auto relinearize = [&] {
        if (ok.pf_ok) {
            const Eigen::VectorXd u = am.T * ak + am.t0;
            model = linearize(ctx, u.head(idx(nb)), u.tail(idx(nb)), ok.op);
            have_model = true;
        } else if (!have_model && ctx.idle.converged) {
            model = linearize(ctx, Eigen::VectorXd::Zero(idx(nb)), Eigen::VectorXd::Zero(idx(nb)), ctx.idle);
            have_model = true;
        }
    };
    relinearize();
    if (!have_model) {
        out.least = ak;
        return out;
    }

    for (int it = 0; it < opt.max_iter; ++it) {
        ++out.iterations;
        std::vector<Eigen::RowVectorXd> G;
        std::vector<double> r;
        network_rows(c, model, opt.margin, G, r);
        const std::size_t n_net = G.size();
        QpProblem qp;
        const Eigen::Index m = idx(n_net + 2 * nb) + 2 * na;
        qp.A = Eigen::MatrixXd::Zero(m, na);
        qp.b = Eigen::VectorXd::Zero(m);
        Eigen::Index row = 0;
        for (std::size_t k = 0; k < n_net; ++k, ++row) {
            qp.A.row(row) = G[k] * am.T;
            qp.b[row] = r[k] - G[k].dot(am.t0);
        }
        for (std::size_t b = 0; b < nb; ++b) {
            const NetInterval iv = p_net_interval(c.bess[b], ctx.soc[idx(b)], c.base_mva, ctx.dt);
            qp.A.row(row) = am.T.row(idx(b));
            qp.b[row++] = iv.hi - am.t0[idx(b)];
            qp.A.row(row) = -am.T.row(idx(b));
            qp.b[row++] = am.t0[idx(b)] - iv.lo;
        }
        for (Eigen::Index j = 0; j < na; ++j) {
            qp.A(row, j) = 1.0;
            qp.b[row++] = 1.0;
            qp.A(row, j) = -1.0;
            qp.b[row++] = 1.0;
        }
        qp.H = Eigen::MatrixXd::Identity(na, na) * 2.0 * (1.0 + w);
        qp.c = -2.0 * (target + w * ak);
        const QpResult sol = solve_qp(qp, {}, &ak);
        const Eigen::VectorXd an = sol.x.cwiseMax(-1.0).cwiseMin(1.0);
        const double step = (an - ak).lpNorm<Eigen::Infinity>();
        const StepOutcome on = evaluate_action(ctx, an, opt.tol);
        consider(an, on);
        const double vn = violation_of(on);
        const bool acceptable = on.pf_ok && (vn <= 0.5 * opt.tol.g || vn < vk);
        if (!acceptable) {
            w = std::max(1.0, 10.0 * w);
            if (w > 1e8) break;
            continue;
        }
        ak = an;
        ok = on;
        vk = vn;
        w = w < 1e-3 ? 0.0 : w / 10.0;
        if (step < opt.step_tol) break;
        relinearize();
    }
    return out;
}

}  // namespace

std::size_t projection_call_count() { return g_projection_calls.load(); }

ProjectionResult project_action(const StepContext& ctx, const Eigen::VectorXd& a_expl, const ProjectionOptions& opt) {
    ++g_projection_calls;
    const NetworkCase& c = *ctx.c;
    ProjectionResult res;
    const Eigen::VectorXd a0 = a_expl.cwiseMax(-1.0).cwiseMin(1.0);
    if (evaluate_action(ctx, a0, opt.tol).member) {
        res.a = a0;
        res.feasible = true;
        res.distance = (a0 - a_expl).norm();
        res.path = "identity";
        return res;
    }

    Eigen::VectorXd least = a0;
    double least_v = kInf;
    auto attempt = [&](const Eigen::VectorXd& seed, const char* path) {
        SqpOutcome s = sqp_project(ctx, a_expl, seed, opt);
        res.iterations += s.iterations;
        if (s.least_violation < least_v) {
            least_v = s.least_violation;
            least = s.least;
        }
        if (s.found && (!res.feasible || (s.best - a_expl).squaredNorm() < (res.a - a_expl).squaredNorm())) {
            res.a = s.best;
            res.feasible = true;
            res.path = path;
        }
        return s.found;
    };

    if (!attempt(a0, "sqp") && !attempt(idle_action(c, a0), "idle-seed")) {
        OracleOptions oo;
        oo.hard_limits = true;
        oo.tol = opt.tol;
        const StepSolution s = solve_step(ctx, oo, Exec::serial);
        const Eigen::VectorXd seed = physical_to_action(c, s.p_net, s.q, a0);
        if (!attempt(seed, "oracle-seed") && evaluate_action(ctx, seed, opt.tol).member) {
            res.a = seed;
            res.feasible = true;
            res.path = "oracle-seed";
        }
    }
    if (!res.feasible) {
        res.a = least;
        res.path = "least-violating";
    }
    res.distance = (res.a - a_expl).norm();
    return res;
}

// ---------------------------------------------------------------------------
// Stage-3 oracle

namespace {

struct ModeSolve {
    Eigen::VectorXd x;  // [p_net of active units, q, tau...]
    Eigen::VectorXd p_net, q;
    StepOutcome out;
    double merit = kInf;
};

std::vector<Mode> decode_modes(std::size_t code, std::size_t nb) {
    std::vector<Mode> modes(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        modes[b] = static_cast<Mode>(code % 3);
        code /= 3;
    }
    return modes;
}

double merit_of(const StepOutcome& o, const OracleOptions& opt) {
    if (!o.pf_ok) return kInf;
    double m = o.cost + 1e7 * std::max(0.0, o.slack_excess - opt.tol.g);
    if (opt.hard_limits) m += 1e7 * std::max(0.0, violation_of(o) - opt.tol.g);
    return m;
}

struct ModeProblem {
    const StepContext& ctx;
    const OracleOptions& opt;
    std::vector<Mode> modes;
    std::vector<std::size_t> active;
    Eigen::Index n_u = 0, n_x = 0;
    bool soft;
    Eigen::VectorXd lo, hi;  // bounds on the u-part of x

    ModeProblem(const StepContext& cx, const OracleOptions& o, std::vector<Mode> m)
        : ctx(cx), opt(o), modes(std::move(m)), soft(!o.hard_limits) {
        const NetworkCase& c = *ctx.c;
        const std::size_t nb = c.n_bess();
        for (std::size_t b = 0; b < nb; ++b)
            if (modes[b] != Mode::idle) active.push_back(b);
        n_u = idx(active.size() + nb);
        n_x = n_u + (soft ? 2 : 0);
        lo.resize(n_u);
        hi.resize(n_u);
        for (std::size_t k = 0; k < active.size(); ++k) {
            const std::size_t b = active[k];
            const NetInterval iv = p_net_interval(c.bess[b], ctx.soc[idx(b)], c.base_mva, ctx.dt);
            if (modes[b] == Mode::charge) {
                lo[idx(k)] = std::min(iv.lo, 0.0);
                hi[idx(k)] = 0.0;
            } else {
                lo[idx(k)] = 0.0;
                hi[idx(k)] = std::max(iv.hi, 0.0);
            }
        }
        for (std::size_t b = 0; b < nb; ++b) {
            lo[idx(active.size() + b)] = c.bess[b].q_min;
            hi[idx(active.size() + b)] = c.bess[b].q_max;
        }
    }

    // Selection u = S x_u, u = [p_net (B); q (B)].
    Eigen::MatrixXd selection() const {
        const std::size_t nb = ctx.c->n_bess();
        Eigen::MatrixXd S = Eigen::MatrixXd::Zero(idx(2 * nb), n_u);
        for (std::size_t k = 0; k < active.size(); ++k) S(idx(active[k]), idx(k)) = 1.0;
        for (std::size_t b = 0; b < nb; ++b) S(idx(nb + b), idx(active.size() + b)) = 1.0;
        return S;
    }

    void split(const Eigen::VectorXd& x, Eigen::VectorXd& p_net, Eigen::VectorXd& q) const {
        const std::size_t nb = ctx.c->n_bess();
        const Eigen::VectorXd u = selection() * x.head(n_u);
        p_net = u.head(idx(nb));
        q = u.segment(idx(nb), idx(nb));
    }

    ModeSolve finish(const Eigen::VectorXd& x) const {
        ModeSolve s;
        s.x = x;
        split(x, s.p_net, s.q);
        s.out = evaluate_step(ctx, s.p_net, s.q, opt.tol);
        s.merit = merit_of(s.out, opt);
        return s;
    }

    Eigen::VectorXd subsolve(const LinearModel& m, const Eigen::VectorXd& xk, double w) const {
        const NetworkCase& c = *ctx.c;
        const double base = c.base_mva;
        const Eigen::MatrixXd S = selection();
        const Eigen::Index nx = n_x;

        QpProblem qp;
        qp.H = Eigen::MatrixXd::Identity(nx, nx) * w;
        qp.c = -w * xk;
        // Slack cost: c2 (base ps)^2 + c1 base ps with ps affine in x.
        const Eigen::RowVectorXd dps_x = m.dps * S;
        const double ps_const = m.ps0 - m.dps.dot(m.u0);
        const auto& sc = c.slack_cost;
        qp.H.topLeftCorner(n_u, n_u) += 2.0 * sc.c2 * base * base * dps_x.transpose() * dps_x;
        qp.c.head(n_u) += (2.0 * sc.c2 * base * base * ps_const + sc.c1 * base) * dps_x.transpose();
        for (std::size_t k = 0; k < active.size(); ++k) {
            const std::size_t b = active[k];
            const double sign = modes[b] == Mode::discharge ? 1.0 : -1.0;
            qp.c[idx(k)] += c.bess[b].cost_per_mw * base * sign;
        }
        if (soft) {
            qp.c[n_u] += c.penalties.xi_line;
            qp.c[n_u + 1] += c.penalties.xi_voltage;
        }

        std::vector<Eigen::RowVectorXd> rows;
        std::vector<double> rhs;
        auto add = [&](const Eigen::RowVectorXd& r, double v) {
            rows.push_back(r);
            rhs.push_back(v);
        };
        const double margin = soft ? 0.0 : 1e-8;
        for (std::size_t l = 0; l < c.n_branch(); ++l) {
            if (!std::isfinite(c.branches[l].rate)) continue;
            Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(nx);
            r.head(n_u) = m.ds.row(idx(l)) * S;
            if (soft) r[n_u] = -1.0;
            add(r, c.branches[l].rate - margin - (m.s0[idx(l)] - m.ds.row(idx(l)).dot(m.u0)));
        }
        for (std::size_t i = 0; i < c.n_bus(); ++i) {
            const Eigen::RowVectorXd d = m.dvm.row(idx(i));
            if (d.lpNorm<Eigen::Infinity>() == 0.0) continue;
            const double v0 = m.vm0[idx(i)] - d.dot(m.u0);
            Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(nx);
            r.head(n_u) = d * S;
            if (soft) r[n_u + 1] = -1.0;
            add(r, c.buses[i].vmax - margin - v0);
            r.head(n_u) = -d * S;
            add(r, v0 - c.buses[i].vmin - margin);
        }
        const auto& sl = c.slack_limits;
        const double q_const = m.qs0 - m.dqs.dot(m.u0);
        const Eigen::RowVectorXd dqs_x = m.dqs * S;
        auto slack_row = [&](const Eigen::RowVectorXd& d, double bound) {
            Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(nx);
            r.head(n_u) = d;
            add(r, bound);
        };
        if (std::isfinite(sl.p_max)) slack_row(dps_x, sl.p_max - 1e-8 - ps_const);
        if (std::isfinite(sl.p_min)) slack_row(-dps_x, ps_const - sl.p_min - 1e-8);
        if (std::isfinite(sl.q_max)) slack_row(dqs_x, sl.q_max - 1e-8 - q_const);
        if (std::isfinite(sl.q_min)) slack_row(-dqs_x, q_const - sl.q_min - 1e-8);
        for (Eigen::Index j = 0; j < n_u; ++j) {
            Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(nx);
            r[j] = 1.0;
            add(r, hi[j]);
            r[j] = -1.0;
            add(r, -lo[j]);
        }
        if (soft)
            for (Eigen::Index j = n_u; j < nx; ++j) {
                Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(nx);
                r[j] = -1.0;
                add(r, 0.0);
            }
        qp.A.resize(idx(rows.size()), nx);
        qp.b.resize(idx(rows.size()));
        for (std::size_t k = 0; k < rows.size(); ++k) {
            qp.A.row(idx(k)) = rows[k];
            qp.b[idx(k)] = rhs[k];
        }
        QpResult sol = solve_qp(qp, {}, &xk);
        Eigen::VectorXd x = sol.x;
        x.head(n_u) = x.head(n_u).cwiseMax(lo).cwiseMin(hi);
        return x;
    }

    Eigen::VectorXd x_of(const StepOutcome& o) const {
        Eigen::VectorXd x = Eigen::VectorXd::Zero(n_x);
        const std::size_t nb = ctx.c->n_bess();
        const Eigen::VectorXd p = o.phys.p_net();
        for (std::size_t k = 0; k < active.size(); ++k) x[idx(k)] = p[idx(active[k])];
        x.segment(idx(active.size()), idx(nb)) = o.phys.q;
        if (soft && o.pf_ok) {
            x[n_u] = o.op.max_psi();
            x[n_u + 1] = o.op.max_omega();
        }
        return x;
    }

    ModeSolve refine(ModeSolve s) const {
        double w = opt.prox0;
        for (int it = 0; it < opt.max_prox && s.out.pf_ok; ++it) {
            const LinearModel m = linearize(ctx, s.p_net, s.q, s.out.op);
            const Eigen::VectorXd xn = subsolve(m, s.x, w);
            ModeSolve cand = finish(xn);
            const double step = (xn.head(n_u) - s.x.head(n_u)).lpNorm<Eigen::Infinity>();
            if (cand.merit < s.merit - 1e-12) {
                s = std::move(cand);
                w = std::max(w / 2.0, opt.prox_min);
                if (step < opt.step_tol) break;
            } else {
                if (step < opt.step_tol) break;
                w *= 4.0;
                if (w > 1e9) break;
            }
        }
        return s;
    }
};

}  // namespace

StepSolution solve_step(const StepContext& ctx, const OracleOptions& opt, Exec exec) {
    const NetworkCase& c = *ctx.c;
    const std::size_t nb = c.n_bess();
    std::size_t n_modes = 1;
    for (std::size_t b = 0; b < nb; ++b) n_modes *= 3;

    StepSolution best;
    best.modes_scanned = n_modes;
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(idx(nb));
    Eigen::VectorXd q_idle(idx(nb));
    for (std::size_t b = 0; b < nb; ++b) q_idle[idx(b)] = std::clamp(0.0, c.bess[b].q_min, c.bess[b].q_max);

    if (!ctx.idle.converged) {
        // Nothing to linearize around; report the idle point as the least-violating answer.
        best.p_net = zero;
        best.q = q_idle;
        best.modes.assign(nb, Mode::idle);
        best.outcome = evaluate_step(ctx, zero, q_idle, opt.tol);
        best.feasible = false;
        return best;
    }
    const LinearModel idle_model = linearize(ctx, zero, zero, ctx.idle);

    // Phase 1: every mode against the model at the idle point.
    std::vector<ModeSolve> first(n_modes);
    parallel_for(exec, n_modes, [&](std::size_t code) {
        ModeProblem mp(ctx, opt, decode_modes(code, nb));
        Eigen::VectorXd x0 = Eigen::VectorXd::Zero(mp.n_x);
        first[code] = mp.finish(mp.subsolve(idle_model, x0, opt.prox_min));
    });

    // Phase 2: refine the most promising modes against the full power flow.
    std::vector<std::size_t> order(n_modes);
    for (std::size_t i = 0; i < n_modes; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return first[a].merit < first[b].merit; });
    const std::size_t n_ref = std::min<std::size_t>(n_modes, static_cast<std::size_t>(std::max(1, opt.refine)));
    std::vector<ModeSolve> refined(n_ref);
    parallel_for(exec, n_ref, [&](std::size_t k) {
        ModeProblem mp(ctx, opt, decode_modes(order[k], nb));
        refined[k] = mp.refine(first[order[k]]);
    });

    std::size_t pick = 0;
    for (std::size_t k = 1; k < n_ref; ++k)
        if (refined[k].merit < refined[pick].merit) pick = k;
    ModeSolve& s = refined[pick];

    // The all-idle schedule (reactive output still free) is always a candidate.
    {
        ModeProblem mp(ctx, opt, std::vector<Mode>(nb, Mode::idle));
        ModeSolve idle = mp.finish(mp.x_of(evaluate_step(ctx, zero, q_idle, opt.tol)));
        if (idle.merit < s.merit) {
            s = std::move(idle);
            pick = n_ref;
        }
    }
    best.p_net = s.p_net;
    best.q = s.q;
    best.modes = decode_modes(pick < n_ref ? order[pick] : 0, nb);
    best.outcome = std::move(s.out);
    best.feasible = best.outcome.pf_ok && best.outcome.slack_excess <= opt.tol.g &&
                    (!opt.hard_limits || best.outcome.member);
    return best;
}

BessSchedule solve_stage3(const NetworkCase& c, const std::vector<HourData>& hours, const Eigen::MatrixXd& attack,
                          const Eigen::VectorXd& soc0, const OracleOptions& opt, Exec exec) {
    const AdmittanceMatrix ybus(c);
    const std::size_t nb = c.n_bess(), T = hours.size();
    BessSchedule s;
    s.p_ch = Eigen::MatrixXd::Zero(idx(nb), idx(T));
    s.p_dis = s.p_ch;
    s.q = s.p_ch;
    s.soc = Eigen::MatrixXd::Zero(idx(nb), idx(T + 1));
    s.soc.col(0) = soc0;
    s.stage_cost = Eigen::VectorXd::Zero(idx(T));
    for (std::size_t t = 0; t < T; ++t) {
        const StepContext ctx = make_step_context(c, ybus, hours[t], attack.col(idx(t)), s.soc.col(idx(t)));
        StepSolution sol = solve_step(ctx, opt, exec);
        s.p_ch.col(idx(t)) = sol.outcome.phys.p_ch;
        s.p_dis.col(idx(t)) = sol.outcome.phys.p_dis;
        s.q.col(idx(t)) = sol.outcome.phys.q;
        s.soc.col(idx(t + 1)) = sol.outcome.soc_next;
        s.stage_cost[idx(t)] = sol.outcome.cost;
        s.modes.push_back(sol.modes);
        s.feasible = s.feasible && sol.feasible;
        s.outcomes.push_back(std::move(sol.outcome));
    }
    s.j3 = s.stage_cost.sum();
    return s;
}

}  // namespace gridguard
