#pragma once

#include "gridguard/adversary.hpp"
#include "gridguard/qp.hpp"

#include <string>
#include <vector>

namespace gridguard {

/// Per-unit BESS setpoints (p.u.). Actions are laid out [a_ch(B), a_dis(B), a_q(B)].
struct BessPhysical {
    Eigen::VectorXd p_ch, p_dis, q;
    Eigen::VectorXd p_net() const { return p_dis - p_ch; }
};

/// Affine map of [-1,1] actions onto the unit ranges; both directions may be nonzero.
BessPhysical action_to_physical(const NetworkCase& c, const Eigen::VectorXd& a);
/// Keeps the net direction only: p_net > 0 discharges, p_net < 0 charges.
BessPhysical arbitrate(const BessPhysical& raw);
BessPhysical from_net(const Eigen::VectorXd& p_net, const Eigen::VectorXd& q);

/// Action closest to `near` that realizes (p_net, q) after arbitration, within the box.
Eigen::VectorXd physical_to_action(const NetworkCase& c, const Eigen::VectorXd& p_net, const Eigen::VectorXd& q,
                                   const Eigen::VectorXd& near);
/// Closest action with zero net power and zero reactive output.
Eigen::VectorXd idle_action(const NetworkCase& c, const Eigen::VectorXd& near);

double soc_step(const BessUnit& u, double soc, double p_ch, double p_dis, double base_mva, double dt);

/// Exact p_net interval keeping the next SOC inside [soc_min, soc_max] and power inside limits.
struct NetInterval {
    double lo, hi;
};
NetInterval p_net_interval(const BessUnit& u, double soc, double base_mva, double dt);

struct FeasibilityTol {
    double h = 1e-6;
    double g = 1e-6;
    double pf_cap = 10.0;  // residual reported when the power flow fails
};

/// Everything fixed at one (scenario, hour) before the storage acts.
struct StepContext {
    const NetworkCase* c = nullptr;
    const AdmittanceMatrix* y = nullptr;
    InjectionSpec base;   // post-attack injections, storage idle
    OperatingPoint idle;  // power flow of `base`
    Eigen::VectorXd soc;
    double dt = LoadProfile::kStepHours;
};

StepContext make_step_context(const NetworkCase& c, const AdmittanceMatrix& y, const HourData& h,
                              const Eigen::VectorXd& attack, const Eigen::VectorXd& soc);

InjectionSpec with_storage(const StepContext& ctx, const Eigen::VectorXd& p_net, const Eigen::VectorXd& q);

struct StepOutcome {
    BessPhysical phys;
    OperatingPoint op;
    Eigen::VectorXd soc_next;
    double bess_cost = 0.0;
    double slack_cost = 0.0;
    double line_term = 0.0;
    double voltage_term = 0.0;
    double cost = 0.0;        // stage cost, $
    double slack_excess = 0.0;
    Eigen::VectorXd h, g;     // equality / inequality residuals
    bool pf_ok = false;
    bool member = false;
};

/// h: power mismatch at non-slack buses (P then Q), then SOC dynamics.
/// g: V upper, V lower, thermal, SOC upper, SOC lower, slack p/q upper/lower, unit bounds.
StepOutcome evaluate_step(const StepContext& ctx, const Eigen::VectorXd& p_net, const Eigen::VectorXd& q,
                          const FeasibilityTol& tol = {});
StepOutcome evaluate_action(const StepContext& ctx, const Eigen::VectorXd& a, const FeasibilityTol& tol = {});

std::size_t residual_h_size(const NetworkCase& c);
std::size_t residual_g_size(const NetworkCase& c);

/// First-order network response around u = [p_net; q] (2B columns).
struct LinearModel {
    Eigen::VectorXd u0;
    Eigen::VectorXd vm0, va0, s0;
    Eigen::MatrixXd dvm, dva, ds;
    double ps0 = 0.0, qs0 = 0.0;
    Eigen::RowVectorXd dps, dqs;
};
LinearModel linearize(const StepContext& ctx, const Eigen::VectorXd& p_net, const Eigen::VectorXd& q,
                      const OperatingPoint& op);

struct ProjectionOptions {
    FeasibilityTol tol;
    // Offset of the linearized limits; negative values spend half the membership tolerance
    // so that projections reach the boundary instead of stopping just inside it.
    double margin = -5e-7;
    int max_iter = 40;
    double step_tol = 1e-10;
};

struct ProjectionResult {
    Eigen::VectorXd a;
    bool feasible = false;
    double distance = 0.0;
    int iterations = 0;
    std::string path;  // identity / sqp / idle-seed / oracle-seed / least-violating
};

/// Closest action passing the membership test. Feasible inputs come back unchanged.
ProjectionResult project_action(const StepContext& ctx, const Eigen::VectorXd& a_expl, const ProjectionOptions& opt = {});

/// Number of project_action calls since start-up (deployment purity check).
std::size_t projection_call_count();

// ---------------------------------------------------------------------------

struct OracleOptions {
    int refine = 6;         // modes refined against the full power flow
    int max_prox = 25;
    double prox0 = 10.0;
    double prox_min = 1e-4;
    double step_tol = 1e-8;
    // When set, voltage and thermal limits are hard rows instead of priced terms.
    bool hard_limits = false;
    FeasibilityTol tol;
};

enum class Mode : int { idle = 0, charge = 1, discharge = 2 };

struct StepSolution {
    Eigen::VectorXd p_net, q;
    std::vector<Mode> modes;
    StepOutcome outcome;
    bool feasible = false;  // slack limits and unit limits hold
    std::size_t modes_scanned = 0;
};

/// Enumerates the 3^B mode combinations, each with a prox-linear subsolve.
StepSolution solve_step(const StepContext& ctx, const OracleOptions& opt = {}, Exec exec = Exec::parallel);

struct BessSchedule {
    Eigen::MatrixXd p_ch, p_dis, q;  // B x T
    Eigen::MatrixXd soc;             // B x (T+1)
    std::vector<std::vector<Mode>> modes;
    Eigen::VectorXd stage_cost;      // per hour
    std::vector<StepOutcome> outcomes;
    double j3 = 0.0;
    bool feasible = true;
};

/// Greedy in time with SOC carried forward. `attack` is |G_a| x T.
BessSchedule solve_stage3(const NetworkCase& c, const std::vector<HourData>& hours, const Eigen::MatrixXd& attack,
                          const Eigen::VectorXd& soc0, const OracleOptions& opt = {}, Exec exec = Exec::parallel);

}  // namespace gridguard
