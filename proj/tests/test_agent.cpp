#include "oracles.hpp"

#include <doctest.h>

#include <filesystem>
#include <random>

using namespace gridguard;
using namespace testing_support;

namespace {

std::vector<HourData> flat_day(const NetworkCase& c) { return std::vector<HourData>(24, base_hour(c)); }

// Low-voltage fixture under full attack: the idle storage action is infeasible there,
// so the constraint terms are active.
struct Fixture {
    NetworkCase c = case3_vlow();
    std::vector<HourData> hours = flat_day(c);
    AttackPlan plan = worst_attack_horizon(c, hours, 1);
    Eigen::MatrixXd attack = Eigen::MatrixXd::Ones(1, 24);
};

const Fixture& fixture3() {
    static const Fixture f;
    return f;
}

AgentConfig small_agent() {
    AgentConfig a;
    a.hidden = {32, 32};
    a.batch = 16;
    return a;
}

// Transitions from random actions on the fixture.
ReplayBuffer random_transitions(std::size_t n, std::uint64_t seed) {
    const Fixture& f = fixture3();
    Environment env(f.c, f.hours);
    ReplayBuffer buf(n);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Eigen::VectorXd s = env.reset(f.attack);
    while (buf.size() < n) {
        Eigen::VectorXd a(static_cast<Eigen::Index>(env.action_dim()));
        for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = u(rng);
        const StepResult r = env.step(a);
        buf.push({s, a, r.next_state, -1e-3 * r.cost, r.done, r.surrogate});
        s = r.done ? env.reset(f.attack) : r.next_state;
    }
    return buf;
}

Batch whole(const ReplayBuffer& buf) {
    Batch b;
    for (std::size_t i = 0; i < buf.size(); ++i) b.push_back(&buf[i]);
    return b;
}

Agent fixture_agent(std::uint64_t seed) {
    const Fixture& f = fixture3();
    return Agent(f.c.n_bus(), f.c.n_bess(), residual_h_size(f.c), residual_g_size(f.c), small_agent(), seed);
}

TrainConfig short_run(std::size_t episodes) {
    TrainConfig cfg;
    cfg.agent = small_agent();
    cfg.episodes = episodes;
    cfg.buffer_min = 48;
    cfg.rho_window = 200;
    cfg.seed = 4;
    return cfg;
}

}  // namespace

TEST_SUITE("rcrl-agent") {

TEST_CASE("state layout") {
    const NetworkCase c = load_case("case30");
    Environment env(c, {base_hour(c)});
    CHECK(env.state_dim() == 95);
    CHECK(env.action_dim() == 15);
    const Eigen::VectorXd s = env.reset(Eigen::MatrixXd::Zero(5, 1));
    CHECK(s.size() == 95);
    CHECK(s.tail(5).isApproxToConstant(0.9));
}

TEST_CASE("reset without attack sees the dispatched state") {
    const NetworkCase c = case3();
    const std::vector<HourData> hours = flat_day(c);
    Environment env(c, hours);
    const Eigen::VectorXd s = env.reset(Eigen::MatrixXd::Zero(1, 24));
    CHECK((s.head(3) - hours[0].x.op.vm).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((s.segment(3, 3) - hours[0].x.op.va).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(s[9] == doctest::Approx(0.9));
    CHECK_THROWS_AS(env.reset(Eigen::MatrixXd::Zero(1, 3)), std::invalid_argument);
}

TEST_CASE("discharge with lossless storage") {
    NetworkCase c = case3();
    c.bess[0].eta_ch = c.bess[0].eta_dis = 1.0;
    Environment env(c, flat_day(c));
    env.reset(Eigen::MatrixXd::Zero(1, 24));
    // Full discharge: 40 MW for an hour out of 100 MWh.
    const StepResult r = env.step(Eigen::Vector3d(-1.0, 1.0, 0.0));
    CHECK(env.soc()[0] == doctest::Approx(0.5));
    CHECK(r.next_state[9] == doctest::Approx(0.5));
    CHECK_FALSE(r.done);
    CHECK(env.t() == 1);
}

TEST_CASE("episode ends after the horizon") {
    const NetworkCase c = case3();
    Environment env(c, flat_day(c));
    env.reset(Eigen::MatrixXd::Zero(1, 24));
    const Eigen::VectorXd idle = idle_action(c, Eigen::VectorXd::Zero(3));
    int n = 0;
    StepResult r;
    do {
        r = env.step(idle);
        ++n;
    } while (!r.done);
    CHECK(n == 24);
    CHECK_THROWS(env.step(idle));
}

TEST_CASE("beta schedule and blend") {
    const BlendSchedule b{100, 50};
    CHECK(b.beta(0) == 0.0);
    CHECK(b.beta(99) == 0.0);
    CHECK(b.beta(125) == doctest::Approx(0.5));
    CHECK(b.beta(150) == 1.0);
    CHECK(b.beta(10000) == 1.0);

    const Eigen::VectorXd e = Eigen::Vector3d(1.0, -1.0, 0.5), p = Eigen::Vector3d(0.0, 0.2, -0.5);
    CHECK(blend(0.0, e, p) == p);
    CHECK(blend(1.0, e, p) == e);
    CHECK(blend(0.5, e, p).isApprox(Eigen::Vector3d(0.5, -0.4, 0.0)));
}

TEST_CASE("dual updates") {
    DualState d;
    d.lambda = Eigen::VectorXd::Zero(2);
    d.mu = Eigen::VectorXd::Zero(2);
    d.update(Eigen::Vector2d(0.1, -0.1), Eigen::Vector2d(-3.0, 0.4));
    CHECK(d.lambda[0] == doctest::Approx(0.05));
    CHECK(d.lambda[1] == doctest::Approx(-0.05));
    CHECK(d.mu[0] == 0.0);
    CHECK(d.mu[1] == doctest::Approx(0.2));
    d.lambda[0] = d.lambda_max;
    d.update(Eigen::Vector2d(5.0, 0.0), Eigen::Vector2d(1e9, 0.0));
    CHECK(d.lambda[0] == d.lambda_max);
    CHECK(d.mu[0] == d.mu_max);
    CHECK(d.bounded());
}

TEST_CASE("critic target") {
    Agent a = fixture_agent(3);
    a.cfg.gamma = 0.0;
    const ReplayBuffer buf = random_transitions(8, 1);
    std::mt19937_64 rng(0);
    const Eigen::VectorXd y = a.critic_targets(whole(buf), rng);
    for (std::size_t i = 0; i < buf.size(); ++i) CHECK(y[static_cast<Eigen::Index>(i)] == buf[i].r);

    // A terminal transition ignores the bootstrap whatever gamma is.
    a.cfg.gamma = 0.99;
    Transition t = buf[0];
    t.done = true;
    const Eigen::VectorXd yt = a.critic_targets({&t}, rng);
    CHECK(yt[0] == t.r);
}

TEST_CASE("actor loss") {
    const Fixture& f = fixture3();
    const RowShape shape = row_shape(f.c, ConstraintShaping{});
    const ReplayBuffer buf = random_transitions(32, 2);
    const Batch batch = whole(buf);
    Agent a = fixture_agent(5);

    SUBCASE("without duals it is the critic value") {
        a.duals.rho = 0.0;
        std::mt19937_64 rng(1);
        const ActorLoss L = a.actor_loss(batch, f.c, shape, nullptr);
        CHECK(L.total == L.q_term);
        CHECK(L.lambda_term == 0.0);
        CHECK(L.penalty_term == 0.0);
        Eigen::MatrixXd s(10, 32), x(13, 32);
        for (std::size_t i = 0; i < 32; ++i) s.col(static_cast<Eigen::Index>(i)) = buf[i].s;
        const Eigen::MatrixXd feat = a.features(s);
        x << feat, a.actor.forward(feat);
        CHECK(L.q_term == doctest::Approx(-a.critic1.forward(x).mean()).epsilon(1e-12));
    }

    SUBCASE("gradient matches finite differences") {
        std::mt19937_64 rng(9);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (Eigen::Index i = 0; i < a.duals.lambda.size(); ++i) a.duals.lambda[i] = u(rng) - 0.5;
        for (Eigen::Index i = 0; i < a.duals.mu.size(); ++i) a.duals.mu[i] = u(rng);
        a.duals.rho = 10.0;
        Eigen::VectorXd grad;
        const ActorLoss L = a.actor_loss(batch, f.c, shape, &grad);
        CHECK(L.mu_term > 0.0);
        const Eigen::VectorXd p0 = a.actor.params();
        std::uniform_int_distribution<Eigen::Index> pick(0, p0.size() - 1);
        const double h = 1e-6;
        for (int probe = 0; probe < 40; ++probe) {
            const Eigen::Index k = pick(rng);
            Eigen::VectorXd p = p0;
            p[k] += h;
            a.actor.set_params(p);
            const double up = a.actor_loss(batch, f.c, shape, nullptr).total;
            p[k] -= 2 * h;
            a.actor.set_params(p);
            const double dn = a.actor_loss(batch, f.c, shape, nullptr).total;
            const double fd = (up - dn) / (2 * h);
            CHECK(std::abs(fd - grad[k]) <= 1e-5 * std::max(1.0, std::abs(grad[k])));
        }
        a.actor.set_params(p0);
    }
}

TEST_CASE("frozen duals give monotone descent") {
    const Fixture& f = fixture3();
    const RowShape shape = row_shape(f.c, ConstraintShaping{});
    const ReplayBuffer buf = random_transitions(64, 3);
    const Batch batch = whole(buf);
    Agent base = fixture_agent(6);
    base.duals.mu.setConstant(0.5);
    base.duals.rho = 10.0;
    bool found = false;
    double eta = 1e-2;
    for (int halving = 0; halving < 20 && !found; ++halving, eta /= 2) {
        Agent a = base;
        double prev = a.actor_loss(batch, f.c, shape, nullptr).total;
        bool mono = true;
        for (int k = 0; k < 50 && mono; ++k) {
            Eigen::VectorXd g;
            a.actor_loss(batch, f.c, shape, &g);
            a.actor.set_params(a.actor.params() - eta * g);
            const double cur = a.actor_loss(batch, f.c, shape, nullptr).total;
            mono = cur <= prev;
            prev = cur;
        }
        found = mono;
    }
    CHECK(found);
}

TEST_CASE("one episode stores one transition per hour") {
    const Fixture& f = fixture3();
    const TrainResult r = train(f.c, f.hours, f.plan, short_run(1));
    CHECK(r.log.steps.size() == 24);
    CHECK(r.log.episodes.size() == 1);
}

TEST_CASE("training invariants and determinism") {
    const Fixture& f = fixture3();
    const TrainConfig cfg = short_run(20);
    const TrainResult a = train(f.c, f.hours, f.plan, cfg);
    const TrainResult b = train(f.c, f.hours, f.plan, cfg);
    REQUIRE(a.log.steps.size() == b.log.steps.size());
    for (std::size_t i = 0; i < a.log.steps.size(); ++i) {
        const StepLog &x = a.log.steps[i], &y = b.log.steps[i];
        CHECK(x.reward == y.reward);
        CHECK(x.beta == y.beta);
        CHECK(x.h_inf == y.h_inf);
        CHECK(x.g_pos == y.g_pos);
        CHECK(x.critic_loss == y.critic_loss);
        CHECK(x.actor_loss == y.actor_loss);
        CHECK(x.lambda_inf == y.lambda_inf);
        CHECK(x.mu_inf == y.mu_inf);
    }
    CHECK(a.agent.actor == b.agent.actor);

    std::size_t hold_members = 0, hold = 0;
    for (const StepLog& s : a.log.steps) {
        CHECK(s.blend_error <= 1e-15);
        CHECK(s.lambda_inf <= cfg.agent.lambda_max);
        CHECK(s.mu_inf <= cfg.agent.mu_max);
        if (s.beta == 1.0) CHECK_FALSE(s.projected);
        if (s.beta == 0.0) {
            ++hold;
            hold_members += s.member;
            if (s.projection_feasible) CHECK(s.member);
        }
    }
    CHECK(hold >= a.log.hold_steps);
    CHECK(hold_members == hold);
    CHECK(a.agent.finite());
    CHECK(a.agent.duals.bounded());
}

TEST_CASE("checkpoint round trip") {
    Agent a = fixture_agent(8);
    a.duals.mu.setConstant(0.25);
    a.duals.rho = 40.0;
    a.r_cap = 1234.5;
    const std::string path = (std::filesystem::temp_directory_path() / "gridguard_agent_test.bin").string();
    a.save(path);
    const Agent b = Agent::load(path);
    std::filesystem::remove(path);
    CHECK(b.actor == a.actor);
    CHECK(b.critic2_target == a.critic2_target);
    CHECK(b.duals.mu == a.duals.mu);
    CHECK(b.duals.rho == a.duals.rho);
    CHECK(b.r_cap == a.r_cap);
    const Eigen::VectorXd s = random_transitions(1, 4)[0].s;
    CHECK(b.act(s) == a.act(s));
    CHECK_THROWS_AS(Agent::load("/nonexistent/agent.bin"), CheckpointError);
}

TEST_CASE("larger penalty, smaller violation") {
    const Fixture& f = fixture3();
    std::vector<double> final_violation;
    for (double rho : {1.0, 10.0, 100.0}) {
        TrainConfig cfg = short_run(40);
        cfg.agent.rho0 = rho;
        cfg.adapt_rho = false;
        const TrainResult r = train(f.c, f.hours, f.plan, cfg);
        double sum = 0.0;
        for (std::size_t i = r.log.steps.size() - 24; i < r.log.steps.size(); ++i) sum += r.log.steps[i].r_mu_norm;
        final_violation.push_back(sum / 24.0);
        MESSAGE("rho " << rho << ": final-epoch mean ||r_mu||_+ " << final_violation.back());
    }
    CHECK(final_violation[1] <= final_violation[0]);
    CHECK(final_violation[2] <= final_violation[1]);
}

}  // TEST_SUITE
