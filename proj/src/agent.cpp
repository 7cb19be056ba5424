#include "gridguard/agent.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

namespace gridguard {

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

}  // namespace

RowShape row_shape(const NetworkCase& c, const ConstraintShaping& s) {
    const std::size_t n = c.n_bus(), nb = c.n_bess(), nl = c.n_branch();
    RowShape r;
    r.h_scale = Eigen::VectorXd::Constant(idx(residual_h_size(c)), s.mismatch_scale);
    for (std::size_t b = 0; b < nb; ++b) r.h_scale[idx(2 * (n - 1) + b)] = s.soc_scale * c.bess[b].e_max_mwh;
    const auto m = idx(residual_g_size(c));
    r.g_margin = Eigen::VectorXd::Zero(m);
    r.g_scale = Eigen::VectorXd::Constant(m, s.unit_scale);
    Eigen::Index k = 0;
    for (std::size_t i = 0; i < 2 * n; ++i, ++k) {
        r.g_margin[k] = s.voltage_margin;
        r.g_scale[k] = s.voltage_scale;
    }
    for (std::size_t l = 0; l < nl; ++l, ++k) {
        r.g_margin[k] = s.thermal_margin;
        r.g_scale[k] = s.thermal_scale;
    }
    for (std::size_t b = 0; b < 2 * nb; ++b, ++k) {
        r.g_margin[k] = s.soc_margin;
        r.g_scale[k] = s.soc_scale;
    }
    for (int j = 0; j < 4; ++j, ++k) {
        r.g_margin[k] = s.slack_margin;
        r.g_scale[k] = s.slack_scale;
    }
    return r;
}

Eigen::VectorXd assemble_state(const OperatingPoint& op, const Eigen::VectorXd& soc) {
    const Eigen::Index n = op.vm.size();
    Eigen::VectorXd s(3 * n + soc.size());
    s << op.vm, op.va, op.p_inj, soc.cwiseMax(0.0).cwiseMin(1.0);
    return s;
}

// ---------------------------------------------------------------------------

Environment::Environment(const NetworkCase& c, std::vector<HourData> hours, EnvConfig cfg)
    : c_(&c), ybus_(c), hours_(std::move(hours)), cfg_(cfg), shape_(row_shape(c, cfg.shaping)) {
    if (hours_.empty()) throw std::invalid_argument("environment needs at least one hour");
}

void Environment::enter_hour() {
    ctx_ = make_step_context(*c_, ybus_, hours_[t_], attack_.col(idx(t_)), soc_);
    state_ = assemble_state(ctx_.idle.converged ? ctx_.idle : hours_[t_].x.op, soc_);
}

Eigen::VectorXd Environment::reset(const Eigen::MatrixXd& attack) {
    if (attack.rows() != idx(c_->attackable.size()) || attack.cols() < idx(hours_.size()))
        throw std::invalid_argument("attack scenario does not cover the horizon");
    attack_ = attack;
    t_ = 0;
    soc_ = Eigen::VectorXd::Constant(idx(c_->n_bess()), cfg_.soc0);
    enter_hour();
    if (!ctx_.idle.converged) throw ResetError("post-attack power flow failed at reset");
    return state_;
}

StepResult Environment::step(const Eigen::VectorXd& a_final) {
    if (t_ >= hours_.size()) throw std::logic_error("step after episode end");
    if (static_cast<std::size_t>(a_final.size()) != action_dim()) throw std::invalid_argument("action dimension");
    StepResult r;
    r.outcome = evaluate_action(ctx_, a_final, cfg_.tol);
    const StepOutcome& o = r.outcome;
    r.cost = o.cost;
    r.pf_ok = o.pf_ok;
    r.member = o.member;
    r.h_inf = o.h.lpNorm<Eigen::Infinity>();
    r.g_pos = std::max(0.0, o.g.maxCoeff());
    r.r_lambda = o.h.cwiseQuotient(shape_.h_scale);
    r.r_mu = (o.g + shape_.g_margin).cwiseQuotient(shape_.g_scale);

    r.surrogate.soc = soc_;
    if (o.pf_ok) {
        r.surrogate.model = linearize(ctx_, o.phys.p_net(), o.phys.q, o.op);
        r.surrogate.valid = true;
    } else if (ctx_.idle.converged) {
        const Eigen::VectorXd z = Eigen::VectorXd::Zero(idx(c_->n_bess()));
        r.surrogate.model = linearize(ctx_, z, z, ctx_.idle);
        r.surrogate.valid = true;
    }
    r.surrogate.model.dva.resize(0, 0);  // unused by the residuals; keeps transitions small
    r.surrogate.model.va0.resize(0);

    soc_ = o.soc_next;
    ++t_;
    r.done = t_ == hours_.size();
    if (!r.done) {
        enter_hour();
        r.next_state = state_;
    } else {
        r.next_state = assemble_state(o.pf_ok ? o.op : ctx_.idle, soc_);
        state_ = r.next_state;
    }
    return r;
}

SurrogateEval surrogate_residuals(const NetworkCase& c, const RowShape& shape, const Surrogate& s,
                                  const Eigen::VectorXd& a, double dt, double cap) {
    const std::size_t n = c.n_bus(), nb = c.n_bess(), nl = c.n_branch();
    const Eigen::Index na = idx(3 * nb);
    const double base = c.base_mva;
    SurrogateEval e;
    e.h = Eigen::VectorXd::Zero(idx(residual_h_size(c)));
    e.dh = Eigen::MatrixXd::Zero(e.h.size(), na);
    e.g = Eigen::VectorXd::Zero(idx(residual_g_size(c)));
    e.dg = Eigen::MatrixXd::Zero(e.g.size(), na);

    // u = T a + t0 with u = [p_net; q].
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(idx(2 * nb), na);
    Eigen::VectorXd u(idx(2 * nb));
    for (std::size_t b = 0; b < nb; ++b) {
        const auto& un = c.bess[b];
        T(idx(b), idx(b)) = -un.p_ch_max / 2.0;
        T(idx(b), idx(nb + b)) = un.p_dis_max / 2.0;
        T(idx(nb + b), idx(2 * nb + b)) = (un.q_max - un.q_min) / 2.0;
        u[idx(b)] = un.p_dis_max / 2.0 * (a[idx(nb + b)] + 1.0) - un.p_ch_max / 2.0 * (a[idx(b)] + 1.0);
        u[idx(nb + b)] = un.q_min + (un.q_max - un.q_min) / 2.0 * (a[idx(2 * nb + b)] + 1.0);
    }

    Eigen::Index k = 0;
    if (s.valid) {
        const LinearModel& m = s.model;
        const Eigen::VectorXd du = u - m.u0;
        const Eigen::VectorXd vm = m.vm0 + m.dvm * du;
        const Eigen::MatrixXd dvm = m.dvm * T;
        for (std::size_t i = 0; i < n; ++i, ++k) {
            e.g[k] = vm[idx(i)] - c.buses[i].vmax;
            e.dg.row(k) = dvm.row(idx(i));
        }
        for (std::size_t i = 0; i < n; ++i, ++k) {
            e.g[k] = c.buses[i].vmin - vm[idx(i)];
            e.dg.row(k) = -dvm.row(idx(i));
        }
        const Eigen::MatrixXd ds = m.ds * T;
        for (std::size_t l = 0; l < nl; ++l, ++k) {
            const double rate = c.branches[l].rate;
            if (!std::isfinite(rate)) {
                e.g[k] = -1.0;
                continue;
            }
            e.g[k] = m.s0[idx(l)] + m.ds.row(idx(l)).dot(du) - rate;
            e.dg.row(k) = ds.row(idx(l));
        }
    } else {
        for (std::size_t i = 0; i < 2 * n + nl; ++i, ++k) e.g[k] = cap;
        for (std::size_t i = 0; i < 2 * (n - 1); ++i) e.h[idx(i)] = cap;
    }

    // SOC rows are exact functions of the action.
    Eigen::VectorXd soc_next(idx(nb));
    Eigen::MatrixXd dsoc = Eigen::MatrixXd::Zero(idx(nb), na);
    for (std::size_t b = 0; b < nb; ++b) {
        const auto& un = c.bess[b];
        const double p = u[idx(b)];
        const double f = p >= 0.0 ? base * dt / (un.eta_dis * un.e_max_mwh) : un.eta_ch * base * dt / un.e_max_mwh;
        soc_next[idx(b)] = s.soc[idx(b)] - f * p;
        dsoc.row(idx(b)) = -f * T.row(idx(b));
    }
    for (std::size_t b = 0; b < nb; ++b, ++k) {
        e.g[k] = soc_next[idx(b)] - c.bess[b].soc_max;
        e.dg.row(k) = dsoc.row(idx(b));
    }
    for (std::size_t b = 0; b < nb; ++b, ++k) {
        e.g[k] = c.bess[b].soc_min - soc_next[idx(b)];
        e.dg.row(k) = -dsoc.row(idx(b));
    }

    const auto& sl = c.slack_limits;
    if (s.valid) {
        const LinearModel& m = s.model;
        const Eigen::VectorXd du = u - m.u0;
        const double ps = m.ps0 + m.dps.dot(du), qs = m.qs0 + m.dqs.dot(du);
        const Eigen::RowVectorXd dps = m.dps * T, dqs = m.dqs * T;
        auto row = [&](double lim, double v, const Eigen::RowVectorXd& d, double sign) {
            if (!std::isfinite(lim)) {
                e.g[k++] = -1.0;
                return;
            }
            e.g[k] = sign * (v - lim);
            e.dg.row(k++) = sign * d;
        };
        row(sl.p_max, ps, dps, 1.0);
        row(sl.p_min, ps, dps, -1.0);
        row(sl.q_max, qs, dqs, 1.0);
        row(sl.q_min, qs, dqs, -1.0);
    } else {
        for (int j = 0; j < 4; ++j) e.g[k++] = cap;
    }

    // Unit bounds after arbitration.
    for (std::size_t b = 0; b < nb; ++b) {
        const auto& un = c.bess[b];
        const double p = u[idx(b)];
        const Eigen::RowVectorXd dp = T.row(idx(b));
        const double p_ch = std::max(-p, 0.0), p_dis = std::max(p, 0.0);
        const Eigen::RowVectorXd dch = p < 0.0 ? Eigen::RowVectorXd(-dp) : Eigen::RowVectorXd::Zero(na);
        const Eigen::RowVectorXd ddis = p > 0.0 ? dp : Eigen::RowVectorXd::Zero(na);
        const Eigen::RowVectorXd dq = T.row(idx(nb + b));
        e.g[k] = p_ch - un.p_ch_max;
        e.dg.row(k++) = dch;
        e.g[k] = -p_ch;
        e.dg.row(k++) = -dch;
        e.g[k] = p_dis - un.p_dis_max;
        e.dg.row(k++) = ddis;
        e.g[k] = -p_dis;
        e.dg.row(k++) = -ddis;
        e.g[k] = u[idx(nb + b)] - un.q_max;
        e.dg.row(k++) = dq;
        e.g[k] = un.q_min - u[idx(nb + b)];
        e.dg.row(k++) = -dq;
    }

    e.g = (e.g + shape.g_margin).cwiseQuotient(shape.g_scale);
    e.dg = shape.g_scale.cwiseInverse().asDiagonal() * e.dg;
    e.h = e.h.cwiseQuotient(shape.h_scale);
    return e;
}

// ---------------------------------------------------------------------------

double BlendSchedule::beta(std::size_t step) const {
    if (step < hold) return 0.0;
    if (ramp == 0) return 1.0;
    return std::min(static_cast<double>(step - hold) / static_cast<double>(ramp), 1.0);
}

Eigen::VectorXd blend(double beta, const Eigen::VectorXd& a_expl, const Eigen::VectorXd& a_proj) {
    return beta * a_expl + (1.0 - beta) * a_proj;
}

void DualState::update(const Eigen::VectorXd& r_lambda, const Eigen::VectorXd& r_mu) {
    lambda = (lambda + alpha_lambda * r_lambda).cwiseMax(-lambda_max).cwiseMin(lambda_max);
    mu = (mu + alpha_mu * r_mu).cwiseMax(0.0).cwiseMin(mu_max);
}

bool DualState::bounded() const {
    return lambda.allFinite() && mu.allFinite() && (lambda.size() == 0 || lambda.lpNorm<Eigen::Infinity>() <= lambda_max) &&
           (mu.size() == 0 || (mu.minCoeff() >= 0.0 && mu.maxCoeff() <= mu_max));
}

void ReplayBuffer::push(Transition tr) {
    if (capacity_ == 0) return;
    if (data_.size() < capacity_) {
        data_.push_back(std::move(tr));
    } else {
        data_[next_] = std::move(tr);
    }
    next_ = (next_ + 1) % capacity_;
}

std::vector<const Transition*> ReplayBuffer::sample(std::mt19937_64& rng, std::size_t n) const {
    std::vector<const Transition*> out;
    if (data_.empty()) return out;
    std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(&data_[pick(rng)]);
    return out;
}

// ---------------------------------------------------------------------------

Agent::Agent(std::size_t n_bus_, std::size_t n_bess_, std::size_t h_dim, std::size_t g_dim, const AgentConfig& c,
             std::uint64_t seed)
    : n_bus(n_bus_), n_bess(n_bess_), cfg(c) {
    std::mt19937_64 seeder(seed);
    std::vector<std::size_t> a_dims{state_dim()}, q_dims{state_dim() + action_dim()};
    for (auto h : cfg.hidden) {
        a_dims.push_back(h);
        q_dims.push_back(h);
    }
    a_dims.push_back(action_dim());
    q_dims.push_back(1);
    actor = Mlp(a_dims, Activation::tanh, seeder());
    critic1 = Mlp(q_dims, Activation::linear, seeder());
    critic2 = Mlp(q_dims, Activation::linear, seeder());
    actor_target = actor;
    critic1_target = critic1;
    critic2_target = critic2;
    actor_opt.lr = cfg.lr_actor;
    critic1_opt.lr = critic2_opt.lr = cfg.lr_critic;
    duals.lambda = Eigen::VectorXd::Zero(idx(h_dim));
    duals.mu = Eigen::VectorXd::Zero(idx(g_dim));
    duals.lambda_max = cfg.lambda_max;
    duals.mu_max = cfg.mu_max;
    duals.alpha_lambda = cfg.alpha_lambda;
    duals.alpha_mu = cfg.alpha_mu;
    duals.rho = cfg.rho0;
    duals.kappa = cfg.kappa;
}

Eigen::MatrixXd Agent::features(const Eigen::MatrixXd& s) const {
    if (static_cast<std::size_t>(s.rows()) != state_dim()) throw std::invalid_argument("state dimension");
    const auto n = idx(n_bus), nb = idx(n_bess);
    Eigen::MatrixXd f(s.rows(), s.cols());
    f.topRows(n) = (s.topRows(n).array() - 1.0) / 0.05;
    f.middleRows(n, n) = s.middleRows(n, n) / 0.5;
    f.middleRows(2 * n, n) = s.middleRows(2 * n, n);
    f.bottomRows(nb) = 2.0 * s.bottomRows(nb).array() - 1.0;
    return f;
}

Eigen::VectorXd Agent::act(const Eigen::VectorXd& s) const { return actor.forward(features(s)).col(0); }

namespace {

Eigen::MatrixXd stack_states(const Batch& batch, bool next) {
    Eigen::MatrixXd m(batch.front()->s.size(), idx(batch.size()));
    for (std::size_t i = 0; i < batch.size(); ++i) m.col(idx(i)) = next ? batch[i]->s2 : batch[i]->s;
    return m;
}

Eigen::MatrixXd stack_actions(const Batch& batch) {
    Eigen::MatrixXd m(batch.front()->a.size(), idx(batch.size()));
    for (std::size_t i = 0; i < batch.size(); ++i) m.col(idx(i)) = batch[i]->a;
    return m;
}

Eigen::MatrixXd vstack(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd m(a.rows() + b.rows(), a.cols());
    m << a, b;
    return m;
}

}  // namespace

Eigen::VectorXd Agent::critic_targets(const Batch& batch, std::mt19937_64& rng) const {
    const Eigen::MatrixXd f2 = features(stack_states(batch, true));
    Eigen::MatrixXd a2 = actor_target.forward(f2);
    std::normal_distribution<double> noise(0.0, cfg.target_sigma);
    for (Eigen::Index j = 0; j < a2.cols(); ++j)
        for (Eigen::Index i = 0; i < a2.rows(); ++i)
            a2(i, j) = std::clamp(a2(i, j) + std::clamp(noise(rng), -cfg.target_clip, cfg.target_clip), -1.0, 1.0);
    const Eigen::MatrixXd x2 = vstack(f2, a2);
    const Eigen::RowVectorXd q1 = critic1_target.forward(x2), q2 = critic2_target.forward(x2);
    Eigen::VectorXd y(idx(batch.size()));
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double mask = batch[i]->done ? 0.0 : 1.0;
        y[idx(i)] = batch[i]->r + cfg.gamma * mask * std::min(q1[idx(i)], q2[idx(i)]);
    }
    return y;
}

double Agent::critic_update(const Batch& batch, std::mt19937_64& rng) {
    if (batch.empty()) return 0.0;
    const Eigen::VectorXd y = critic_targets(batch, rng);
    const Eigen::MatrixXd x = vstack(features(stack_states(batch, false)), stack_actions(batch));
    const double n = static_cast<double>(batch.size());
    double loss = 0.0;
    for (int k = 0; k < 2; ++k) {
        Mlp& net = k == 0 ? critic1 : critic2;
        Adam& opt = k == 0 ? critic1_opt : critic2_opt;
        Mlp::Tape tape;
        const Eigen::RowVectorXd q = net.forward(x, tape);
        const Eigen::RowVectorXd err = q - y.transpose();
        loss += err.squaredNorm() / n;
        Eigen::VectorXd grad;
        net.backward(tape, 2.0 * err / n, grad);
        opt.step(net, grad);
    }
    return loss / 2.0;
}

ActorLoss Agent::actor_loss(const Batch& batch, const NetworkCase& c, const RowShape& shape, Eigen::VectorXd* grad) const {
    ActorLoss L;
    if (batch.empty()) return L;
    const double n = static_cast<double>(batch.size());
    const Eigen::MatrixXd f = features(stack_states(batch, false));
    Mlp::Tape atape, qtape;
    const Eigen::MatrixXd a = actor.forward(f, atape);
    const Eigen::RowVectorXd q = critic1.forward(vstack(f, a), qtape);
    L.q_term = -q.mean();

    Eigen::VectorXd scratch;
    const Eigen::MatrixXd dx = critic1.backward(qtape, Eigen::RowVectorXd::Constant(q.size(), -1.0 / n), scratch);
    const Eigen::MatrixXd dq = dx.bottomRows(a.rows());
    Eigen::MatrixXd dc = Eigen::MatrixXd::Zero(a.rows(), a.cols());

    const DualState& d = duals;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const SurrogateEval e = surrogate_residuals(c, shape, batch[i]->surrogate, a.col(idx(i)));
        const Eigen::VectorXd gp = e.g.cwiseMax(0.0);
        L.lambda_term += d.lambda.dot(e.h) / n;
        L.mu_term += d.mu.dot(gp) / n;
        L.penalty_term += 0.5 * d.rho * (e.h.squaredNorm() + gp.squaredNorm()) / n;
        const Eigen::VectorXd wg = (gp.array() > 0.0).select(d.mu + d.rho * gp, 0.0);
        dc.col(idx(i)) = (e.dh.transpose() * (d.lambda + d.rho * e.h) + e.dg.transpose() * wg) / n;
    }
    L.total = L.q_term + L.lambda_term + L.mu_term + L.penalty_term;
    if (grad) {
        Eigen::VectorXd gq;
        actor.backward(atape, dq, gq);
        L.q_grad_norm = gq.norm();
        Eigen::VectorXd gc;
        actor.backward(atape, dc, gc);
        *grad = gq + gc;
    }
    return L;
}

ActorLoss Agent::actor_update(const Batch& batch, const NetworkCase& c, const RowShape& shape) {
    Eigen::VectorXd grad;
    const ActorLoss L = actor_loss(batch, c, shape, &grad);
    if (grad.size() == 0) return L;
    actor_opt.step(actor, grad);
    polyak(actor_target, actor, cfg.tau);
    polyak(critic1_target, critic1, cfg.tau);
    polyak(critic2_target, critic2, cfg.tau);
    return L;
}

bool Agent::finite() const {
    for (const Mlp* m : {&actor, &critic1, &critic2, &actor_target, &critic1_target, &critic2_target})
        if (!m->params().allFinite()) return false;
    return duals.lambda.allFinite() && duals.mu.allFinite();
}

namespace {

constexpr char kAgentMagic[8] = {'G', 'G', 'A', 'G', 'E', 'N', 'T', '1'};

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("agent checkpoint truncated");
    return v;
}

}  // namespace

void Agent::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot write " + path);
    os.write(kAgentMagic, sizeof kAgentMagic);
    put<std::uint64_t>(os, n_bus);
    put<std::uint64_t>(os, n_bess);
    put<std::uint64_t>(os, cfg.hidden.size());
    for (auto h : cfg.hidden) put<std::uint64_t>(os, h);
    for (double v : {cfg.lr_actor, cfg.lr_critic, cfg.gamma, cfg.tau, cfg.target_sigma, cfg.target_clip, cfg.lambda_max,
                     cfg.mu_max, cfg.alpha_lambda, cfg.alpha_mu, cfg.rho0})
        put<double>(os, v);
    put<std::int64_t>(os, cfg.policy_delay);
    put<std::int64_t>(os, cfg.kappa);
    put<std::uint64_t>(os, cfg.batch);
    for (const Mlp* m : {&actor, &critic1, &critic2, &actor_target, &critic1_target, &critic2_target}) write_mlp(os, *m);
    write_vector(os, duals.lambda);
    write_vector(os, duals.mu);
    put<double>(os, duals.rho);
    put<double>(os, r_cap);
    if (!os) throw CheckpointError("write failed: " + path);
}

Agent Agent::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot read " + path);
    char magic[sizeof kAgentMagic];
    if (!is.read(magic, sizeof magic) || !std::equal(magic, magic + sizeof magic, kAgentMagic))
        throw CheckpointError(path + " is not an agent checkpoint");
    Agent a;
    a.n_bus = get<std::uint64_t>(is);
    a.n_bess = get<std::uint64_t>(is);
    const auto nh = get<std::uint64_t>(is);
    if (nh > 16) throw CheckpointError("implausible hidden layer count");
    a.cfg.hidden.clear();
    for (std::uint64_t i = 0; i < nh; ++i) a.cfg.hidden.push_back(get<std::uint64_t>(is));
    for (double* v : {&a.cfg.lr_actor, &a.cfg.lr_critic, &a.cfg.gamma, &a.cfg.tau, &a.cfg.target_sigma, &a.cfg.target_clip,
                      &a.cfg.lambda_max, &a.cfg.mu_max, &a.cfg.alpha_lambda, &a.cfg.alpha_mu, &a.cfg.rho0})
        *v = get<double>(is);
    a.cfg.policy_delay = static_cast<int>(get<std::int64_t>(is));
    a.cfg.kappa = static_cast<int>(get<std::int64_t>(is));
    a.cfg.batch = get<std::uint64_t>(is);
    for (Mlp* m : {&a.actor, &a.critic1, &a.critic2, &a.actor_target, &a.critic1_target, &a.critic2_target}) *m = read_mlp(is);
    if (a.actor.input_dim() != a.state_dim() || a.actor.output_dim() != a.action_dim())
        throw CheckpointError("actor shape does not match the stored case dimensions");
    a.duals.lambda = read_vector(is);
    a.duals.mu = read_vector(is);
    a.duals.rho = get<double>(is);
    a.r_cap = get<double>(is);
    a.duals.lambda_max = a.cfg.lambda_max;
    a.duals.mu_max = a.cfg.mu_max;
    a.duals.alpha_lambda = a.cfg.alpha_lambda;
    a.duals.alpha_mu = a.cfg.alpha_mu;
    a.duals.kappa = a.cfg.kappa;
    a.actor_opt.lr = a.cfg.lr_actor;
    a.critic1_opt.lr = a.critic2_opt.lr = a.cfg.lr_critic;
    return a;
}

// ---------------------------------------------------------------------------

TrainResult train(const NetworkCase& c, const std::vector<HourData>& hours, const AttackPlan& worst,
                  const TrainConfig& cfg) {
    using clock = std::chrono::steady_clock;
    std::mt19937_64 rng(cfg.seed);
    Environment env(c, hours, cfg.env);
    TrainResult res{Agent(c.n_bus(), c.n_bess(), env.h_dim(), env.g_dim(), cfg.agent, rng()), {}};
    Agent& agent = res.agent;
    TrainingLog& log = res.log;
    ReplayBuffer buffer(cfg.buffer_capacity);

    const std::size_t T = env.horizon();
    const std::size_t total = cfg.episodes * T;
    BlendSchedule sched;
    sched.hold = static_cast<std::size_t>(std::llround(cfg.hold_fraction * static_cast<double>(total)));
    sched.ramp = static_cast<std::size_t>(std::llround(cfg.ramp_fraction * static_cast<double>(total)));
    log.hold_steps = sched.hold;
    log.ramp_steps = sched.ramp;

    std::normal_distribution<double> unit_normal(0.0, 1.0);
    double max_abs_r = 0.0;
    std::size_t step = 0, critic_updates = 0;
    Eigen::VectorXd sum_rl = Eigen::VectorXd::Zero(idx(env.h_dim())), sum_rm = Eigen::VectorXd::Zero(idx(env.g_dim()));
    int dual_count = 0;
    double window_sum = 0.0, prev_window = std::numeric_limits<double>::infinity(), q_grad_avg = 0.0;
    std::size_t window_n = 0;
    double last_critic = 0.0, last_actor = 0.0;

    for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
        EpisodeLog elog;
        elog.episode = ep;
        Eigen::VectorXd s;
        for (;;) {
            const std::uint64_t sseed = rng();
            const AttackScenario sc = sample_attack(c, worst, cfg.mix, sseed);
            try {
                s = env.reset(sc.y);
                elog.scenario_seed = sseed;
                elog.kind = to_string(sc.kind);
                break;
            } catch (const ResetError&) {
                if (++elog.resamples > cfg.max_resample)
                    throw TrainingAborted("episode " + std::to_string(ep) + ": no scenario with a solvable reset");
            }
        }

        for (std::size_t t = 0; t < T; ++t, ++step) {
            const auto t0 = clock::now();
            StepLog sl;
            sl.step = step;
            sl.episode = ep;
            sl.t = t;
            sl.beta = sched.beta(step);
            sl.sigma = total > 1 ? cfg.sigma_start + (cfg.sigma_end - cfg.sigma_start) * static_cast<double>(step) /
                                                         static_cast<double>(total - 1)
                                 : cfg.sigma_start;

            Eigen::VectorXd a_expl = agent.act(s);
            for (Eigen::Index i = 0; i < a_expl.size(); ++i)
                a_expl[i] = std::clamp(a_expl[i] + sl.sigma * unit_normal(rng), -1.0, 1.0);
            Eigen::VectorXd a_proj = a_expl;
            if (sl.beta < 1.0) {
                const ProjectionResult p = project_action(env.context(), a_expl, cfg.projection);
                a_proj = p.a;
                sl.projected = true;
                sl.projection_feasible = p.feasible;
                sl.projection_distance = p.distance;
            }
            const Eigen::VectorXd a_final = blend(sl.beta, a_expl, a_proj);
            sl.blend_error = (a_final - (sl.beta * a_expl + (1.0 - sl.beta) * a_proj)).lpNorm<Eigen::Infinity>();

            StepResult r = env.step(a_final);
            const bool warmup = buffer.size() < cfg.buffer_min;
            if (r.pf_ok) {
                if (warmup) max_abs_r = std::max(max_abs_r, std::abs(r.cost));
                sl.reward = -r.cost;
            } else {
                log.r_cap = cfg.r_cap_factor * std::max(max_abs_r, 1.0);
                sl.reward = -log.r_cap;
            }
            sl.pf_ok = r.pf_ok;
            sl.member = r.member;
            sl.h_inf = r.h_inf;
            sl.g_pos = r.g_pos;
            sl.r_lambda_norm = r.r_lambda.norm();
            sl.r_mu_norm = r.r_mu.cwiseMax(0.0).norm();
            elog.total_reward += sl.reward;
            elog.violations += r.member ? 0 : 1;

            buffer.push({s, a_final, r.next_state, sl.reward * cfg.reward_scale, r.done, std::move(r.surrogate)});
            s = r.next_state;

            sum_rl += r.r_lambda;
            sum_rm += r.r_mu;
            if (++dual_count == agent.duals.kappa) {
                agent.duals.update(sum_rl / dual_count, sum_rm / dual_count);
                sum_rl.setZero();
                sum_rm.setZero();
                dual_count = 0;
                sl.dual_update = true;
            }

            if (buffer.size() >= cfg.buffer_min) {
                const Batch batch = buffer.sample(rng, cfg.agent.batch);
                last_critic = agent.critic_update(batch, rng);
                ++critic_updates;
                if (critic_updates % static_cast<std::size_t>(std::max(1, cfg.agent.policy_delay)) == 0) {
                    const ActorLoss L = agent.actor_update(batch, c, env.shape());
                    last_actor = L.total;
                    q_grad_avg = q_grad_avg == 0.0 ? L.q_grad_norm : 0.99 * q_grad_avg + 0.01 * L.q_grad_norm;
                }
                if (!agent.finite() || !std::isfinite(last_critic) || !std::isfinite(last_actor)) {
                    std::ostringstream msg;
                    msg << "non-finite parameters at step " << step << " (episode " << ep << ", t " << t
                        << "): critic loss " << last_critic << ", actor loss " << last_actor << ", rho "
                        << agent.duals.rho << ", |lambda| " << agent.duals.lambda.lpNorm<Eigen::Infinity>()
                        << ", |mu| " << agent.duals.mu.lpNorm<Eigen::Infinity>();
                    throw TrainingAborted(msg.str());
                }
            }

            // Penalty growth when the inequality residual stops improving.
            window_sum += sl.r_mu_norm;
            if (cfg.adapt_rho && ++window_n == cfg.rho_window) {
                const double mean = window_sum / static_cast<double>(window_n);
                if (mean >= prev_window) {
                    const double cap = std::max((q_grad_avg + agent.duals.lambda_max) / cfg.rho_eps,
                                                agent.duals.mu_max / cfg.rho_eps);
                    agent.duals.rho = std::min(2.0 * agent.duals.rho, cap);
                }
                prev_window = mean;
                window_sum = 0.0;
                window_n = 0;
            }

            sl.lambda_inf = agent.duals.lambda.lpNorm<Eigen::Infinity>();
            sl.mu_inf = agent.duals.mu.lpNorm<Eigen::Infinity>();
            sl.rho = agent.duals.rho;
            sl.critic_loss = last_critic;
            sl.actor_loss = last_actor;
            log.steps.push_back(sl);
            log.step_seconds.push_back(std::chrono::duration<double>(clock::now() - t0).count());
        }
        log.episodes.push_back(elog);
    }
    if (log.r_cap == 0.0) log.r_cap = cfg.r_cap_factor * std::max(max_abs_r, 1.0);
    agent.r_cap = log.r_cap;
    return res;
}

}  // namespace gridguard
