#include "gridguard/adversary.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>

namespace gridguard {

std::vector<HourData> hours_of(const NetworkCase& c, const LoadProfile& profile, const DispatchSolution& sol) {
    std::vector<HourData> hours;
    hours.reserve(sol.slices.size());
    for (std::size_t t = 0; t < sol.slices.size(); ++t) hours.push_back({t, demand_at(c, profile, t), sol.slices[t]});
    return hours;
}

Eigen::VectorXd attack_scale(const NetworkCase& c, const Eigen::VectorXd& y) {
    Eigen::VectorXd scale = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(c.n_gen()));
    for (std::size_t k = 0; k < c.attackable.size(); ++k) scale[static_cast<Eigen::Index>(c.attackable[k])] = 1.0 - y[static_cast<Eigen::Index>(k)];
    return scale;
}

AttackEval eval_attack(const NetworkCase& c, const AdmittanceMatrix& y, const HourData& h, const Eigen::VectorXd& attack,
                       double blackout_j2) {
    AttackEval e;
    const InjectionSpec inj = dispatch_injection(c, h.demand, h.x, attack_scale(c, attack));
    e.op = try_solve_pf(c, y, inj, &h.x.op);
    const double base = c.base_mva;
    for (std::size_t k = 0; k < c.attackable.size(); ++k) {
        const auto& g = c.generators[c.attackable[k]];
        e.gen_cost += g.cost(h.x.pg[static_cast<Eigen::Index>(c.attackable[k])] * (1.0 - attack[static_cast<Eigen::Index>(k)]) * base);
    }
    if (!e.op.converged) {
        e.blackout = true;
        e.j2 = blackout_j2;
        return e;
    }
    e.slack_cost = c.slack_cost(e.op.p_slack * base);
    e.line_term = c.penalties.xi_line * e.op.max_psi();
    e.voltage_term = c.penalties.xi_voltage * e.op.max_omega();
    const auto& sl = c.slack_limits;
    e.slack_excess = std::max({e.op.p_slack - sl.p_max, sl.p_min - e.op.p_slack, e.op.q_slack - sl.q_max,
                               sl.q_min - e.op.q_slack, 0.0});
    e.j2 = e.gen_cost + e.slack_cost + e.line_term + e.voltage_term;
    return e;
}

Eigen::VectorXd project_budget(const Eigen::VectorXd& y, double budget) {
    Eigen::VectorXd clipped = y.cwiseMax(0.0).cwiseMin(1.0);
    if (clipped.sum() <= budget) return clipped;
    auto shifted = [&](double tau) { return (y.array() - tau).cwiseMax(0.0).cwiseMin(1.0).matrix().eval(); };
    double lo = 0.0, hi = std::max(0.0, y.maxCoeff());
    for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;
        if (shifted(mid).sum() > budget)
            lo = mid;
        else
            hi = mid;
    }
    return shifted(hi);  // the upper end always satisfies the budget
}

namespace {

struct Candidate {
    Eigen::VectorXd y;
    std::size_t ones = 0;
    AttackEval eval;
};

std::vector<Candidate> enumerate_binary(std::size_t n, std::size_t budget) {
    std::vector<Candidate> out;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
        const auto ones = static_cast<std::size_t>(std::popcount(mask));
        if (ones > budget) continue;
        Candidate cand;
        cand.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i)
            if (mask >> i & 1u) cand.y[static_cast<Eigen::Index>(i)] = 1.0;
        cand.ones = ones;
        out.push_back(std::move(cand));
    }
    return out;
}

struct Ascent {
    Eigen::VectorXd y;
    AttackEval eval;
    std::size_t evaluations = 0;
};

Ascent ascend(const NetworkCase& c, const AdmittanceMatrix& ybus, const HourData& h, Eigen::VectorXd y0, AttackEval e0,
              double budget, double cap, const AttackOptions& opt) {
    Ascent a{std::move(y0), std::move(e0), 0};
    const Eigen::Index n = a.y.size();
    if (n == 0 || budget <= 0.0) return a;
    double alpha = -1.0;
    for (int it = 0; it < opt.max_ascent; ++it) {
        Eigen::VectorXd g(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::VectorXd up = a.y, dn = a.y;
            up[i] += opt.fd_step;
            dn[i] -= opt.fd_step;
            g[i] = (eval_attack(c, ybus, h, up, cap).j2 - eval_attack(c, ybus, h, dn, cap).j2) / (2.0 * opt.fd_step);
            a.evaluations += 2;
        }
        const double gmax = g.lpNorm<Eigen::Infinity>();
        if (!(gmax > 0.0) || !std::isfinite(gmax)) break;
        if (alpha < 0.0) alpha = 0.5 / gmax;
        bool improved = false;
        for (int ls = 0; ls < 40; ++ls) {
            const Eigen::VectorXd yn = project_budget(a.y + alpha * g, budget);
            if ((yn - a.y).lpNorm<Eigen::Infinity>() < 1e-12) break;
            AttackEval en = eval_attack(c, ybus, h, yn, cap);
            ++a.evaluations;
            if (en.j2 > a.eval.j2 + 1e-12) {
                a.y = yn;
                a.eval = std::move(en);
                improved = true;
                alpha *= 2.0;
                break;
            }
            alpha *= 0.5;
        }
        if (!improved) break;
    }
    return a;
}

}  // namespace

std::vector<AttackSlice> worst_attack_sweep(const NetworkCase& c, const AdmittanceMatrix& ybus, const HourData& h,
                                            std::size_t budget, const AttackOptions& opt, Exec exec) {
    const std::size_t n = c.attackable.size();
    budget = std::min(budget, n);
    std::vector<Candidate> cands = enumerate_binary(n, budget);
    const double inf = std::numeric_limits<double>::infinity();
    parallel_for(exec, cands.size(), [&](std::size_t i) { cands[i].eval = eval_attack(c, ybus, h, cands[i].y, inf); });

    double largest = 0.0;
    for (const auto& cand : cands)
        if (!cand.eval.blackout) largest = std::max(largest, cand.eval.j2);
    const double cap = opt.blackout_factor * largest;
    for (auto& cand : cands)
        if (cand.eval.blackout) cand.eval.j2 = cap;

    std::vector<AttackSlice> out;
    for (std::size_t k = 0; k <= budget; ++k) {
        // Enumeration order makes the lowest mask win ties.
        const Candidate* seed = nullptr;
        for (const auto& cand : cands)
            if (cand.ones <= k && (!seed || cand.eval.j2 > seed->eval.j2)) seed = &cand;
        AttackSlice s;
        s.t = h.t;
        s.blackout_j2 = cap;
        s.binary_j2 = seed->eval.j2;
        s.evaluations = cands.size();
        Ascent a = ascend(c, ybus, h, seed->y, seed->eval, static_cast<double>(k), cap, opt);
        s.evaluations += a.evaluations;
        s.y = std::move(a.y);
        s.eval = std::move(a.eval);
        if (!out.empty() && out.back().eval.j2 > s.eval.j2) {
            s.y = out.back().y;
            s.eval = out.back().eval;
        }
        out.push_back(std::move(s));
    }
    return out;
}

AttackSlice worst_attack(const NetworkCase& c, const AdmittanceMatrix& y, const HourData& h, std::size_t budget,
                         const AttackOptions& opt, Exec exec) {
    return worst_attack_sweep(c, y, h, budget, opt, exec).back();
}

double AttackPlan::total_j2() const {
    double s = 0.0;
    for (const auto& sl : slices) s += sl.eval.j2;
    return s;
}

AttackPlan worst_attack_horizon(const NetworkCase& c, const std::vector<HourData>& hours, std::size_t budget,
                                const AttackOptions& opt, Exec exec) {
    const AdmittanceMatrix ybus(c);
    AttackPlan plan;
    plan.budget = budget;
    plan.slices.resize(hours.size());
    parallel_for(exec, hours.size(), [&](std::size_t t) { plan.slices[t] = worst_attack(c, ybus, hours[t], budget, opt, Exec::serial); });
    return plan;
}

std::string to_string(AttackScenario::Kind k) {
    switch (k) {
        case AttackScenario::Kind::worst: return "worst";
        case AttackScenario::Kind::random: return "random";
        case AttackScenario::Kind::partial: return "partial";
    }
    return "unknown";
}

AttackScenario sample_attack(const NetworkCase& c, const AttackPlan& worst, const ScenarioMixture& mix,
                             std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t n = c.attackable.size();
    const auto hours = static_cast<Eigen::Index>(worst.slices.size());
    AttackScenario s;
    s.seed = seed;
    s.y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), hours);
    auto fill_worst = [&](double factor) {
        for (Eigen::Index t = 0; t < hours; ++t) s.y.col(t) = factor * worst.slices[static_cast<std::size_t>(t)].y;
    };

    const double total = mix.worst + mix.random + mix.partial;
    const double u = unit(rng) * total;
    const std::size_t budget = std::min(worst.budget, n);
    if (u < mix.worst || budget == 0) {
        s.kind = AttackScenario::Kind::worst;
        fill_worst(1.0);
    } else if (u < mix.worst + mix.random) {
        s.kind = AttackScenario::Kind::random;
        const std::size_t size = 1 + static_cast<std::size_t>(unit(rng) * static_cast<double>(budget)) % budget;
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        // Partial Fisher-Yates with our own draws keeps the sequence library-independent.
        for (std::size_t i = 0; i < size; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(unit(rng) * static_cast<double>(n - i)) % (n - i);
            std::swap(idx[i], idx[j]);
        }
        for (std::size_t i = 0; i < size; ++i) s.y.row(static_cast<Eigen::Index>(idx[i])).setOnes();
    } else {
        s.kind = AttackScenario::Kind::partial;
        fill_worst(0.25 + 0.75 * unit(rng));
    }
    return s;
}

}  // namespace gridguard
