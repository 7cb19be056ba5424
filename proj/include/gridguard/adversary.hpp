#pragma once

#include "gridguard/dispatch.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace gridguard {

/// Everything Stage 2 and Stage 3 hold fixed at one hour.
struct HourData {
    std::size_t t = 0;
    Demand demand;
    DispatchSlice x;
};

std::vector<HourData> hours_of(const NetworkCase& c, const LoadProfile& profile, const DispatchSolution& sol);

/// Generator scaling (1 - y) for an attack vector indexed like NetworkCase::attackable.
Eigen::VectorXd attack_scale(const NetworkCase& c, const Eigen::VectorXd& y);

struct AttackEval {
    double j2 = 0.0;
    double gen_cost = 0.0;    // residual cost of attacked generators
    double slack_cost = 0.0;
    double line_term = 0.0;   // xi_line * max psi
    double voltage_term = 0.0;
    double slack_excess = 0.0;  // p.u. beyond the slack limits, reported only
    bool blackout = false;
    OperatingPoint op;
};

/// J2 contribution at one hour. `blackout_j2` is charged when the power flow diverges.
AttackEval eval_attack(const NetworkCase& c, const AdmittanceMatrix& y, const HourData& h, const Eigen::VectorXd& attack,
                       double blackout_j2);

/// Euclidean projection onto {0 <= y <= 1, sum(y) <= K}; the budget holds exactly.
Eigen::VectorXd project_budget(const Eigen::VectorXd& y, double budget);

struct AttackOptions {
    double fd_step = 1e-4;
    int max_ascent = 60;
    double blackout_factor = 10.0;
};

struct AttackSlice {
    std::size_t t = 0;
    Eigen::VectorXd y;       // per attackable generator
    AttackEval eval;
    double binary_j2 = 0.0;  // best enumerated binary attack at the final budget
    double blackout_j2 = 0.0;
    std::size_t evaluations = 0;
};

/// Exhaustive binary enumeration followed by projected finite-difference ascent.
/// Budgets 0..K are swept so that the result is monotone in K.
AttackSlice worst_attack(const NetworkCase& c, const AdmittanceMatrix& y, const HourData& h, std::size_t budget,
                         const AttackOptions& opt = {}, Exec exec = Exec::parallel);

/// Worst attacks for budgets 0..K at one hour; element k is worst_attack(..., k).
std::vector<AttackSlice> worst_attack_sweep(const NetworkCase& c, const AdmittanceMatrix& y, const HourData& h,
                                            std::size_t budget, const AttackOptions& opt = {},
                                            Exec exec = Exec::parallel);

struct AttackPlan {
    std::size_t budget = 0;
    std::vector<AttackSlice> slices;  // per hour
    double total_j2() const;
};

AttackPlan worst_attack_horizon(const NetworkCase& c, const std::vector<HourData>& hours, std::size_t budget,
                                const AttackOptions& opt = {}, Exec exec = Exec::parallel);

/// Attack intensities over the horizon, |G_a| x T.
struct AttackScenario {
    enum class Kind { worst, random, partial };
    Kind kind = Kind::worst;
    Eigen::MatrixXd y;
    std::uint64_t seed = 0;
};

std::string to_string(AttackScenario::Kind k);

struct ScenarioMixture {
    double worst = 1.0 / 3.0;
    double random = 1.0 / 3.0;
    double partial = 1.0 / 3.0;
};

/// Deterministic per seed. Random attacks pick 1..K generators fully compromised for the
/// whole horizon; partial attacks scale the worst plan by a factor drawn from [0.25, 1].
AttackScenario sample_attack(const NetworkCase& c, const AttackPlan& worst, const ScenarioMixture& mix,
                             std::uint64_t seed);

}  // namespace gridguard
