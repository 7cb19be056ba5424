#pragma once

#include "gridguard/case_model.hpp"
#include "gridguard/parallel.hpp"
#include "gridguard/powerflow.hpp"

#include <string>
#include <vector>

namespace gridguard {

/// Stage-1 result at one hour.
struct DispatchSlice {
    std::size_t t = 0;
    Eigen::VectorXd pg, qg;  // per generator, p.u.
    Eigen::VectorXd vm, va;  // per bus
    OperatingPoint op;
    double cost = 0.0;  // $/h
    bool feasible = false;
    double max_violation = 0.0;  // p.u.
    std::vector<std::string> report;
    double stationarity = 0.0;  // projected-gradient inf-norm of the augmented objective
    double penalty = 0.0;
    int outer_iterations = 0;
    int pf_solves = 0;
};

struct DispatchSolution {
    std::vector<DispatchSlice> slices;
    double total_cost = 0.0;
    bool feasible = true;
};

struct Stage1Options {
    double feas_tol = 1e-6;
    double stationarity_tol = 1e-5;
    double fd_step = 1e-6;
    double pf_tol = 1e-12;
    double rho0 = 1000.0;
    double rho_max = 1e6;
    int max_outer = 40;
    int max_inner = 400;
};

/// Reduced-space augmented-Lagrangian OPF. Controls are non-slack generator outputs and
/// generator-bus voltage setpoints; the power flow eliminates the network equations.
DispatchSlice solve_stage1(const NetworkCase& c, const Demand& demand, const Stage1Options& opt = {});
DispatchSlice solve_stage1(const NetworkCase& c, const LoadProfile& profile, std::size_t t,
                           const Stage1Options& opt = {});

/// Augmented-objective gradient at the bound midpoint, adjoint vs central differences.
struct Stage1GradientCheck {
    Eigen::VectorXd adjoint, finite_difference;
};
Stage1GradientCheck stage1_gradient_check(const NetworkCase& c, const Demand& demand, double rho, double fd_step = 1e-6);

DispatchSolution solve_horizon(const NetworkCase& c, const LoadProfile& profile, const Stage1Options& opt = {},
                               Exec exec = Exec::parallel);

/// Generator-bus reactive output split across the generators of that bus, proportional to range.
Eigen::VectorXd split_reactive(const NetworkCase& c, const Eigen::VectorXd& q_bus);

/// Network injections after Stage 1 with every non-slack bus treated as PQ. Generator g
/// contributes gen_scale[g] * (pg, qg); the slack generator absorbs the imbalance.
InjectionSpec dispatch_injection(const NetworkCase& c, const Demand& demand, const DispatchSlice& x,
                                 const Eigen::VectorXd& gen_scale);

}  // namespace gridguard
