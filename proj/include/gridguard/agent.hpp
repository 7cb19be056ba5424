#pragma once

#include "gridguard/bess.hpp"
#include "gridguard/neuro.hpp"

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridguard {

/// Limit tightening and residual units used by the actor loss and the dual updates.
/// The membership test itself never sees these.
struct ConstraintShaping {
    double voltage_margin = 0.00125;  // p.u.
    double thermal_margin = 0.0025;
    double slack_margin = 0.0025;
    double soc_margin = 0.0005;
    double voltage_scale = 0.01;
    double thermal_scale = 0.01;
    double slack_scale = 0.1;
    double soc_scale = 0.01;
    double unit_scale = 0.1;
    double mismatch_scale = 0.01;
};

/// Per-row affine shaping: shaped = (raw + margin) / scale.
struct RowShape {
    Eigen::VectorXd h_scale;
    Eigen::VectorXd g_margin, g_scale;
};
RowShape row_shape(const NetworkCase& c, const ConstraintShaping& s);

struct EnvConfig {
    double soc0 = 0.9;
    FeasibilityTol tol;
    ConstraintShaping shaping;
};

/// First-order constraint model around the executed action, kept with each transition.
struct Surrogate {
    bool valid = false;
    Eigen::VectorXd soc;  // SOC before the step
    LinearModel model;
};

struct StepResult {
    Eigen::VectorXd next_state;
    double cost = 0.0;  // $, +inf when the power flow fails
    bool done = false;
    bool pf_ok = false;
    bool member = false;
    Eigen::VectorXd r_lambda, r_mu;  // shaped residuals; r_mu is signed
    double h_inf = 0.0;              // raw ||h||_inf
    double g_pos = 0.0;              // raw max [g]_+
    Surrogate surrogate;
    StepOutcome outcome;
};

struct ResetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// s = [V; theta; P_inj; soc] from the post-attack power flow with storage idle.
Eigen::VectorXd assemble_state(const OperatingPoint& op, const Eigen::VectorXd& soc);

class Environment {
public:
    Environment(const NetworkCase& c, std::vector<HourData> hours, EnvConfig cfg = {});
    Environment(const Environment&) = delete;  // the step context points into this object
    Environment& operator=(const Environment&) = delete;

    std::size_t state_dim() const { return 3 * c_->n_bus() + c_->n_bess(); }
    std::size_t action_dim() const { return 3 * c_->n_bess(); }
    std::size_t h_dim() const { return residual_h_size(*c_); }
    std::size_t g_dim() const { return residual_g_size(*c_); }
    std::size_t horizon() const { return hours_.size(); }
    std::size_t t() const { return t_; }
    const NetworkCase& network() const { return *c_; }
    const EnvConfig& config() const { return cfg_; }
    const RowShape& shape() const { return shape_; }

    /// `attack` is |G_a| x T. Throws ResetError when the first post-attack power flow fails.
    Eigen::VectorXd reset(const Eigen::MatrixXd& attack);
    StepResult step(const Eigen::VectorXd& a_final);

    const StepContext& context() const { return ctx_; }
    const Eigen::VectorXd& state() const { return state_; }
    const Eigen::VectorXd& soc() const { return soc_; }

private:
    void enter_hour();

    const NetworkCase* c_;
    AdmittanceMatrix ybus_;
    std::vector<HourData> hours_;
    EnvConfig cfg_;
    RowShape shape_;
    Eigen::MatrixXd attack_;
    std::size_t t_ = 0;
    Eigen::VectorXd soc_;
    StepContext ctx_;
    Eigen::VectorXd state_;
};

/// Shaped surrogate residuals at action `a` with their action Jacobians.
struct SurrogateEval {
    Eigen::VectorXd h, g;
    Eigen::MatrixXd dh, dg;  // rows x 3B
};
SurrogateEval surrogate_residuals(const NetworkCase& c, const RowShape& shape, const Surrogate& s,
                                  const Eigen::VectorXd& a, double dt = LoadProfile::kStepHours, double cap = 10.0);

// ---------------------------------------------------------------------------

/// beta = 0 during `hold` steps, then a linear ramp over `ramp` steps.
struct BlendSchedule {
    std::size_t hold = 0;
    std::size_t ramp = 100000;
    double beta(std::size_t step) const;
};

Eigen::VectorXd blend(double beta, const Eigen::VectorXd& a_expl, const Eigen::VectorXd& a_proj);

struct DualState {
    Eigen::VectorXd lambda, mu;
    double lambda_max = 100.0;
    double mu_max = 100.0;
    double alpha_lambda = 0.5;
    double alpha_mu = 0.5;
    double rho = 10.0;
    int kappa = 10;

    void update(const Eigen::VectorXd& r_lambda, const Eigen::VectorXd& r_mu);
    bool bounded() const;
};

struct AgentConfig {
    std::vector<std::size_t> hidden{256, 256};
    double lr_actor = 3e-4;
    double lr_critic = 3e-4;
    double gamma = 0.99;
    double tau = 0.005;
    int policy_delay = 2;
    double target_sigma = 0.2;
    double target_clip = 0.5;
    std::size_t batch = 64;
    double lambda_max = 100.0;
    double mu_max = 100.0;
    double alpha_lambda = 0.5;
    double alpha_mu = 0.5;
    double rho0 = 10.0;
    int kappa = 10;
};

struct Transition {
    Eigen::VectorXd s, a, s2;
    double r = 0.0;  // scaled reward
    bool done = false;
    Surrogate surrogate;
};

/// Fixed-capacity ring.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity = 100000) : capacity_(capacity) {}
    void push(Transition tr);
    std::size_t size() const { return data_.size(); }
    std::size_t capacity() const { return capacity_; }
    const Transition& operator[](std::size_t i) const { return data_[i]; }
    std::vector<const Transition*> sample(std::mt19937_64& rng, std::size_t n) const;

private:
    std::size_t capacity_;
    std::size_t next_ = 0;
    std::vector<Transition> data_;
};

using Batch = std::vector<const Transition*>;

struct ActorLoss {
    double total = 0.0;
    double q_term = 0.0;
    double lambda_term = 0.0;
    double mu_term = 0.0;
    double penalty_term = 0.0;
    double q_grad_norm = 0.0;  // ||d(-Q)/d phi||, feeds the penalty cap
};

class Agent {
public:
    Agent() = default;
    Agent(std::size_t n_bus, std::size_t n_bess, std::size_t h_dim, std::size_t g_dim, const AgentConfig& cfg,
          std::uint64_t seed);

    std::size_t state_dim() const { return 3 * n_bus + n_bess; }
    std::size_t action_dim() const { return 3 * n_bess; }

    /// Fixed input normalization of the raw state.
    Eigen::MatrixXd features(const Eigen::MatrixXd& states) const;
    /// Deterministic policy output in (-1, 1)^{3B}.
    Eigen::VectorXd act(const Eigen::VectorXd& s) const;

    /// Clipped double-Q targets with target policy smoothing.
    Eigen::VectorXd critic_targets(const Batch& batch, std::mt19937_64& rng) const;
    /// One Adam step on both critics; returns the mean of the two MSBE losses.
    double critic_update(const Batch& batch, std::mt19937_64& rng);

    /// L_A over the batch through the surrogate. `grad` (actor parameters) is filled when given.
    ActorLoss actor_loss(const Batch& batch, const NetworkCase& c, const RowShape& shape, Eigen::VectorXd* grad) const;
    /// One Adam step on the actor followed by Polyak updates of all targets.
    ActorLoss actor_update(const Batch& batch, const NetworkCase& c, const RowShape& shape);

    void save(const std::string& path) const;
    static Agent load(const std::string& path);
    bool finite() const;

    std::size_t n_bus = 0, n_bess = 0;
    AgentConfig cfg;
    double r_cap = 0.0;  // reward charged when the power flow fails, $
    Mlp actor, actor_target, critic1, critic2, critic1_target, critic2_target;
    Adam actor_opt, critic1_opt, critic2_opt;
    DualState duals;
};

// ---------------------------------------------------------------------------

struct TrainConfig {
    AgentConfig agent;
    EnvConfig env;
    std::size_t episodes = 300;
    double hold_fraction = 0.3;  // share of steps with beta = 0
    double ramp_fraction = 0.3;  // share of steps spent ramping beta to 1
    std::size_t buffer_min = 1000;
    std::size_t buffer_capacity = 100000;
    double sigma_start = 0.1;
    double sigma_end = 0.02;
    double reward_scale = 1e-3;   // $ -> reward units for the critics
    double r_cap_factor = 10.0;
    std::size_t rho_window = 2000;
    double rho_eps = 0.05;        // tolerance in the penalty threshold cap
    bool adapt_rho = true;
    int max_resample = 20;
    ScenarioMixture mix;
    std::uint64_t seed = 1;
    ProjectionOptions projection;
};

struct StepLog {
    std::size_t step = 0, episode = 0, t = 0;
    double reward = 0.0;  // -cost in $, capped on power-flow failure
    double beta = 0.0;
    double sigma = 0.0;
    double h_inf = 0.0;
    double g_pos = 0.0;
    double r_lambda_norm = 0.0;
    double r_mu_norm = 0.0;  // ||[r_mu]_+||_2, shaped
    bool member = false;
    bool pf_ok = false;
    bool projected = false;
    bool projection_feasible = false;
    double projection_distance = 0.0;
    double blend_error = 0.0;  // ||a_final - (beta a_expl + (1-beta) a_proj)||_inf
    double lambda_inf = 0.0;
    double mu_inf = 0.0;
    double rho = 0.0;
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    bool dual_update = false;
};

struct EpisodeLog {
    std::size_t episode = 0;
    std::uint64_t scenario_seed = 0;
    std::string kind;
    int resamples = 0;
    double total_reward = 0.0;
    std::size_t violations = 0;
};

struct TrainingLog {
    std::vector<StepLog> steps;
    std::vector<EpisodeLog> episodes;
    std::vector<double> step_seconds;  // wall clock, kept apart from the deterministic columns
    double r_cap = 0.0;
    std::size_t hold_steps = 0, ramp_steps = 0;
};

struct TrainingAborted : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainResult {
    Agent agent;
    TrainingLog log;
};

/// Training loop. `worst` feeds the scenario sampler.
TrainResult train(const NetworkCase& c, const std::vector<HourData>& hours, const AttackPlan& worst,
                  const TrainConfig& cfg);

}  // namespace gridguard
