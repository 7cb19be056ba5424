#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <complex>
#include <sstream>

using namespace gridguard;
using namespace testing_support;

using oracles::cd;

TEST_SUITE("powerflow") {

TEST_CASE("zero injections give the flat solution") {
    // No line charging on this fixture, so nothing flows.
    const NetworkCase c = case2();
    const InjectionSpec inj = InjectionSpec::zeros(c.n_bus(), c.slack_bus());
    const OperatingPoint op = solve_pf(c, inj);
    REQUIRE(op.converged);
    CHECK(op.vm.isApprox(Eigen::VectorXd::Ones(2), 1e-10));
    CHECK(op.va.cwiseAbs().maxCoeff() < 1e-10);
    CHECK(std::abs(op.p_slack) < 1e-10);
    CHECK(op.s_from.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("two-bus case matches the bisection oracle") {
    const NetworkCase c = case2();
    InjectionSpec inj = InjectionSpec::zeros(2, 0);
    inj.p[1] = -0.5;
    inj.q[1] = -0.2;
    const OperatingPoint op = solve_pf(c, inj);
    REQUIRE(op.converged);
    const auto [v, th] = oracles::two_bus(0.5, 0.2, 0.1);
    CHECK(std::abs(op.vm[1] - v) < 1e-8);
    CHECK(std::abs(op.va[1] - th) < 1e-8);

    // The lossless line delivers the load; the reactive difference is I^2 x.
    const cd s_from = op.s_branch[0];
    const double i2 = (0.5 * 0.5 + 0.2 * 0.2) / (v * v);
    CHECK(std::abs(s_from.real() - 0.5) < 1e-8);
    CHECK(std::abs(s_from.imag() - (0.2 + i2 * 0.1)) < 1e-8);
    CHECK(std::abs(op.p_slack - 0.5) < 1e-8);
}

TEST_CASE("3-bus case matches Gauss-Seidel") {
    const NetworkCase c = case3();
    const AdmittanceMatrix y(c);
    InjectionSpec inj = InjectionSpec::zeros(3, 0);
    inj.vm_set << 1.05, 1.04, 1.0;
    inj.pv[1] = true;
    inj.p << 0.0, 1.0 - 0.2, -1.1;
    inj.q << 0.0, 0.0, -0.4;
    const OperatingPoint op = solve_pf(c, y, inj);
    REQUIRE(op.converged);
    const Eigen::VectorXcd v = oracles::gauss_seidel(y, inj);
    for (Eigen::Index i = 0; i < 3; ++i) {
        CHECK(std::abs(op.vm[i] - std::abs(v[i])) < 1e-8);
        CHECK(std::abs(op.va[i] - std::arg(v[i])) < 1e-8);
    }
}

TEST_CASE("30-bus dispatch converges and reproduces its injections") {
    const NetworkCase c = load_case("case30");
    const AdmittanceMatrix y(c);
    const LoadProfile prof = load_profile_file(data_dir() + "/profile_24h.csv", c);
    const Demand d = demand_at(c, prof, 0);
    const DispatchSlice x = solve_stage1(c, d);
    const InjectionSpec inj = dispatch_injection(c, d, x, Eigen::VectorXd::Ones(static_cast<Eigen::Index>(c.n_gen())));
    const OperatingPoint op = solve_pf(c, y, inj);
    REQUIRE(op.converged);
    CHECK(op.iterations <= 10);
    const Eigen::VectorXcd s = bus_injections(y, op.vm, op.va);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        if (static_cast<std::size_t>(i) == c.slack_bus()) continue;
        worst = std::max({worst, std::abs(s[i].real() - inj.p[i]), std::abs(s[i].imag() - inj.q[i])});
    }
    CHECK(worst <= 1e-8);
}

TEST_CASE("violation measures") {
    NetworkCase c = case3();
    Eigen::VectorXd vm = Eigen::VectorXd::Ones(3);
    Eigen::VectorXd s = Eigen::VectorXd::Zero(3);
    vm[1] = 1.06;
    vm[2] = 0.93;
    c.branches[0].rate = 0.8;
    s[0] = 1.0;
    s[1] = 5.0;
    c.branches[1].rate = std::numeric_limits<double>::infinity();
    const Violations v = violations(c, vm, s);
    CHECK(v.omega[0] == 0.0);
    CHECK(v.omega[1] == doctest::Approx(0.01));
    CHECK(v.omega[2] == doctest::Approx(0.02));
    CHECK(v.psi[0] == doctest::Approx(20.0 / c.base_mva));
    CHECK(v.psi[1] == 0.0);
    CHECK((v.psi.array() >= 0).all());
}

TEST_CASE("singular Jacobian names the bus") {
    NetworkCase c = case3();
    Bus extra = c.buses[2];
    extra.id = 7;
    c.buses.push_back(extra);
    InjectionSpec inj = InjectionSpec::zeros(4, 0);
    inj.p[3] = -0.1;
    try {
        solve_pf(c, inj);
        FAIL("expected PowerFlowError");
    } catch (const PowerFlowError& e) {
        CHECK(e.bus() == 3);
    }
    const OperatingPoint op = try_solve_pf(c, AdmittanceMatrix(c), inj);
    CHECK(op.status == PfStatus::singular);
    CHECK_FALSE(op.converged);
}

TEST_CASE("non-convergence is a result state") {
    const NetworkCase c = case2();
    InjectionSpec inj = InjectionSpec::zeros(2, 0);
    inj.p[1] = -20.0;  // far past the nose of the PV curve
    const OperatingPoint op = solve_pf(c, inj);
    CHECK_FALSE(op.converged);
}

TEST_CASE("sensitivities agree with re-solved power flows") {
    const NetworkCase c = case3();
    const AdmittanceMatrix y(c);
    InjectionSpec inj = InjectionSpec::zeros(3, 0);
    inj.vm_set[0] = 1.05;
    inj.p << 0.0, 0.8, -1.1;
    inj.q << 0.0, 0.1, -0.4;
    const OperatingPoint op = solve_pf(c, y, inj, nullptr, {1e-13, 30, true});
    const Sensitivity sens = sensitivities(c, y, inj, op, {{2, false}, {2, true}});
    const double h = 1e-6;
    for (int k = 0; k < 2; ++k) {
        InjectionSpec up = inj, dn = inj;
        (k ? up.q : up.p)[2] += h;
        (k ? dn.q : dn.p)[2] -= h;
        const OperatingPoint a = solve_pf(c, y, up, &op, {1e-13, 30, true});
        const OperatingPoint b = solve_pf(c, y, dn, &op, {1e-13, 30, true});
        const Eigen::VectorXd fd = (a.vm - b.vm) / (2 * h);
        CHECK((fd - sens.dvm.col(k)).cwiseAbs().maxCoeff() < 1e-6);
        CHECK(std::abs((a.p_slack - b.p_slack) / (2 * h) - sens.dp_slack[k]) < 1e-6);
    }
}

TEST_CASE("debug dump has one row per bus and branch") {
    const NetworkCase c = case3();
    InjectionSpec inj = InjectionSpec::zeros(3, 0);
    inj.p[2] = -0.5;
    const OperatingPoint op = solve_pf(c, inj);
    std::ostringstream os;
    write_operating_point_csv(os, c, op);
    const std::string s = os.str();
    CHECK(std::count(s.begin(), s.end(), '\n') >= static_cast<long>(c.n_bus() + c.n_branch()));
}

}  // TEST_SUITE
