#include "oracles.hpp"

#include <doctest.h>

#include <random>

using namespace gridguard;
using namespace testing_support;

namespace {

struct Case30 {
    NetworkCase c = load_case("case30");
    LoadProfile prof = load_profile_file(data_dir() + "/profile_24h.csv", c);
    std::vector<HourData> hours;
    Case30() {
        // Three evening hours are enough here and keep this fixture cheap.
        for (std::size_t t = 0; t < 3; ++t) {
            const Demand d = demand_at(c, prof, 17 + t);
            hours.push_back({t, d, solve_stage1(c, d)});
        }
    }
};

const Case30& case30() {
    static const Case30 k;
    return k;
}

}  // namespace

TEST_SUITE("adversary") {

TEST_CASE("no attack reproduces the dispatch") {
    const NetworkCase c = case3();
    const HourData h = base_hour(c);
    const AttackEval e = eval_attack(c, AdmittanceMatrix(c), h, Eigen::VectorXd::Zero(1), 1e9);
    CHECK((e.op.vm - h.x.vm).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(e.line_term == 0.0);
    CHECK(e.voltage_term == 0.0);
    CHECK(e.j2 == doctest::Approx(h.x.cost).epsilon(1e-8));
}

TEST_CASE("full attack moves the whole output to the slack") {
    const NetworkCase c = case3();
    const HourData h = base_hour(c);
    const AdmittanceMatrix y(c);
    const AttackEval none = eval_attack(c, y, h, Eigen::VectorXd::Zero(1), 1e9);
    const AttackEval full = eval_attack(c, y, h, Eigen::VectorXd::Ones(1), 1e9);
    REQUIRE(full.op.converged);
    // The slack now covers generator 2 plus the change in losses.
    const double losses_before = none.op.p_inj.sum(), losses_after = full.op.p_inj.sum();
    CHECK(full.op.p_slack - none.op.p_slack ==
          doctest::Approx(h.x.pg[1] + losses_after - losses_before).epsilon(1e-8));
    CHECK(full.gen_cost == doctest::Approx(c.generators[1].cost(0.0)));
    CHECK(full.j2 >= none.j2);
}

TEST_CASE("budget projection") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n(0.4, 0.8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 200; ++k) {
        Eigen::VectorXd y(5);
        for (int i = 0; i < 5; ++i) y[i] = n(rng);
        const double K = 1 + k % 4;
        const Eigen::VectorXd p = project_budget(y, K);
        CHECK(p.sum() <= K + 1e-12);
        CHECK(p.minCoeff() >= 0.0);
        CHECK(p.maxCoeff() <= 1.0);
        // No random feasible point is closer.
        for (int s = 0; s < 50; ++s) {
            Eigen::VectorXd q(5);
            for (int i = 0; i < 5; ++i) q[i] = u(rng);
            if (q.sum() > K) q *= K / q.sum();
            CHECK((y - p).norm() <= (y - q).norm() + 1e-12);
        }
    }
}

TEST_CASE("empty budget returns the baseline") {
    const NetworkCase c = case3();
    const HourData h = base_hour(c);
    const AttackSlice s = worst_attack(c, AdmittanceMatrix(c), h, 0);
    CHECK(s.y.isZero());
    CHECK(s.eval.j2 == doctest::Approx(h.x.cost).epsilon(1e-8));
}

TEST_CASE("3-bus worst attack agrees with the grid") {
    const NetworkCase c = case3();
    const HourData h = base_hour(c);
    const AttackSlice s = worst_attack(c, AdmittanceMatrix(c), h, 1);
    const oracles::AttackGrid g = oracles::attack_grid(c, h);
    CHECK(s.eval.j2 >= g.j2 - 1e-9);
    CHECK(s.eval.j2 <= g.j2 + g.max_step);
    // J2 rises with y on this fixture, so the full budget is spent.
    CHECK(s.y[0] == doctest::Approx(1.0));
    CHECK(s.eval.j2 >= s.binary_j2 - 1e-9);
}

TEST_CASE("30-bus worst attacks") {
    const Case30& k = case30();
    const AdmittanceMatrix y(k.c);
    const HourData& h = k.hours[1];
    const auto sweep = worst_attack_sweep(k.c, y, h, k.c.attackable.size());
    REQUIRE(sweep.size() == k.c.attackable.size() + 1);
    for (std::size_t K = 0; K + 1 < sweep.size(); ++K) CHECK(sweep[K + 1].eval.j2 >= sweep[K].eval.j2 - 1e-9);
    for (std::size_t K = 0; K < sweep.size(); ++K) {
        CHECK(sweep[K].y.sum() <= static_cast<double>(K) + 1e-12);
        CHECK(sweep[K].y.minCoeff() >= 0.0);
        CHECK(sweep[K].y.maxCoeff() <= 1.0);
        CHECK(sweep[K].eval.j2 >= sweep[K].binary_j2 - 1e-9);
    }
    const AttackSlice& s4 = sweep[4];
    CHECK((s4.eval.op.max_psi() > 0.0 || s4.eval.op.max_omega() > 0.0 || s4.eval.blackout));

    const AttackSlice serial = worst_attack(k.c, y, h, 2, {}, Exec::serial);
    const AttackSlice parallel = worst_attack(k.c, y, h, 2, {}, Exec::parallel);
    CHECK(serial.y == parallel.y);
    CHECK(serial.eval.j2 == parallel.eval.j2);
}

TEST_CASE("scenario sampler") {
    const Case30& k = case30();
    const AttackPlan plan = worst_attack_horizon(k.c, k.hours, 4);
    SUBCASE("all weight on worst reproduces the plan") {
        const AttackScenario s = sample_attack(k.c, plan, {1.0, 0.0, 0.0}, 5);
        CHECK(s.kind == AttackScenario::Kind::worst);
        for (std::size_t t = 0; t < plan.slices.size(); ++t)
            CHECK(s.y.col(static_cast<Eigen::Index>(t)) == plan.slices[t].y);
    }
    SUBCASE("same seed, same scenario") {
        for (std::uint64_t seed : {1u, 2u, 99u}) {
            const AttackScenario a = sample_attack(k.c, plan, {}, seed);
            const AttackScenario b = sample_attack(k.c, plan, {}, seed);
            CHECK(a.kind == b.kind);
            CHECK(a.y == b.y);
        }
    }
    SUBCASE("mixture frequencies") {
        int worst = 0;
        for (std::uint64_t seed = 0; seed < 1000; ++seed)
            worst += sample_attack(k.c, plan, {0.5, 0.5, 0.0}, seed).kind == AttackScenario::Kind::worst;
        CHECK(std::abs(worst / 1000.0 - 0.5) <= 0.05);
    }
    SUBCASE("every sample respects the budget") {
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            const AttackScenario s = sample_attack(k.c, plan, {}, seed);
            CHECK(s.y.minCoeff() >= 0.0);
            CHECK(s.y.maxCoeff() <= 1.0);
            CHECK(s.y.colwise().sum().maxCoeff() <= 4.0 + 1e-12);
        }
    }
}

}  // TEST_SUITE
