#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>

using namespace gridguard;
using namespace testing_support;

namespace {

const char* kOneBus = R"(
function mpc = onebus
mpc.baseMVA = 100;
mpc.bus = [
	1	3	60	10	0	0	1	1	0	135	1	1.05	0.95;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	200	0;
];
mpc.branch = [
];
mpc.gencost = [
	2	0	0	3	0.01	2	5;
];
)";

const char* kTwinGen = R"(
function mpc = twin
mpc.baseMVA = 100;
mpc.bus = [
	1	3	80	10	0	0	1	1	0	135	1	1.05	0.95;
	2	1	0	0	0	0	1	1	0	135	1	1.05	0.95;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	200	0;
	1	0	0	100	-100	1	100	1	200	0;
];
mpc.branch = [
	1	2	0.01	0.1	0	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.02	3	0;
	2	0	0	3	0.02	3	0;
];
)";

}  // namespace

TEST_SUITE("dispatch-opf") {

TEST_CASE("single generator serves the whole demand") {
    const NetworkCase c = parse_case(kOneBus);
    const DispatchSlice x = solve_stage1(c, base_demand(c));
    REQUIRE(x.feasible);
    CHECK(c.to_mw(x.pg[0]) == doctest::Approx(60.0).epsilon(1e-8));
    CHECK(x.cost == doctest::Approx(0.01 * 3600 + 2 * 60 + 5).epsilon(1e-8));
}

TEST_CASE("identical generators split evenly") {
    const NetworkCase c = parse_case(kTwinGen);
    const DispatchSlice x = solve_stage1(c, base_demand(c));
    REQUIRE(x.feasible);
    CHECK(x.pg[0] == doctest::Approx(0.4).epsilon(1e-5));
    CHECK(x.pg[1] == doctest::Approx(0.4).epsilon(1e-5));
}

TEST_CASE("3-bus dispatch is within 0.1% of the grid search") {
    const NetworkCase c = case3();
    const DispatchSlice x = solve_stage1(c, base_demand(c));
    REQUIRE(x.feasible);
    const oracles::Stage1Grid g = oracles::stage1_grid(c);
    REQUIRE(std::isfinite(g.cost));
    CHECK(std::abs(x.cost - g.cost) <= 1e-3 * g.cost);
    CHECK(x.cost <= g.cost * (1 + 1e-9));
}

TEST_CASE("returned point is stationary and feasible") {
    const NetworkCase c = load_case("case30");
    const DispatchSlice x = solve_stage1(c, base_demand(c));
    REQUIRE(x.feasible);
    CHECK(x.stationarity <= 1e-5);
    CHECK(x.max_violation <= 1e-6);
    CHECK(x.op.mismatch <= 1e-6);
    CHECK(x.op.max_omega() <= 1e-6);
    CHECK(x.op.max_psi() <= 1e-6);
}

TEST_CASE("adjoint gradient matches finite differences") {
    const NetworkCase c = case3();
    const Stage1GradientCheck g = stage1_gradient_check(c, base_demand(c), 1000.0);
    const double scale = std::max(1.0, g.finite_difference.cwiseAbs().maxCoeff());
    CHECK((g.adjoint - g.finite_difference).cwiseAbs().maxCoeff() <= 1e-5 * scale);
}

TEST_CASE("constant profile gives identical hours") {
    const NetworkCase c = case3();
    const DispatchSolution s = solve_horizon(c, LoadProfile::constant(c.n_bus(), 0.9));
    REQUIRE(s.slices.size() == 24);
    for (const auto& sl : s.slices) {
        CHECK(sl.pg == s.slices.front().pg);
        CHECK(sl.cost == s.slices.front().cost);
    }
}

TEST_CASE("zero demand dispatches nothing") {
    const NetworkCase c = case3();
    Demand d = base_demand(c);
    d.pd.setZero();
    d.qd.setZero();
    const DispatchSlice x = solve_stage1(c, d);
    REQUIRE(x.feasible);
    CHECK(x.pg.cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("cost is monotone in demand") {
    const NetworkCase c = case3();
    double prev = 0.0;
    for (double f : {0.6, 0.8, 1.0, 1.1}) {
        Demand d = base_demand(c);
        d.pd *= f;
        d.qd *= f;
        const DispatchSlice x = solve_stage1(c, d);
        REQUIRE(x.feasible);
        CHECK(x.cost >= prev);
        prev = x.cost;
    }
}

TEST_CASE("30-bus daily horizon") {
    const NetworkCase c = load_case("case30");
    const LoadProfile p = load_profile_file(data_dir() + "/profile_24h.csv", c);
    const DispatchSolution serial = solve_horizon(c, p, {}, Exec::serial);
    const DispatchSolution parallel = solve_horizon(c, p, {}, Exec::parallel);
    REQUIRE(serial.slices.size() == 24);
    CHECK(serial.feasible);
    for (std::size_t t = 0; t < 24; ++t) {
        CHECK(serial.slices[t].pg == parallel.slices[t].pg);
        CHECK(serial.slices[t].cost == parallel.slices[t].cost);
    }
    // Cost ordered like total demand.
    std::vector<std::size_t> order(24);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return p.factor(a, 0) < p.factor(b, 0); });
    for (std::size_t k = 1; k < 24; ++k)
        CHECK(serial.slices[order[k]].cost >= serial.slices[order[k - 1]].cost - 1e-6);
}

}  // TEST_SUITE
