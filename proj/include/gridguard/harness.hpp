#pragma once

#include "gridguard/agent.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace gridguard {

struct ExperimentConfig {
    std::string case_name = "case30";
    std::string profile;  // CSV path; empty means data/profile_24h.csv
    std::size_t budget = 4;
    std::vector<std::uint64_t> seeds{1};
    std::size_t eval_scenarios = 100;
    std::string out_dir = "out";
    TrainConfig train;
    OracleOptions oracle;
    Stage1Options stage1;
    AttackOptions attack;
};

/// Reads the structured config; unknown keys are rejected.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_json(const ExperimentConfig& cfg);
/// The budget check is skipped for stages that do not attack.
void validate(const ExperimentConfig& cfg, const NetworkCase& c, bool check_budget = true);

/// A failure inside one pipeline stage, tagged with the stage name.
struct StageError : std::runtime_error {
    StageError(const std::string& stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), stage(stage) {}
    std::string stage;
};

/// Stage 1 and Stage 2 results shared by every later step.
struct Pipeline {
    NetworkCase c;
    LoadProfile profile = LoadProfile::constant(0);
    DispatchSolution stage1;
    std::vector<HourData> hours;
    AttackPlan worst;
};

Pipeline prepare_stage1(const ExperimentConfig& cfg, Exec exec = Exec::parallel);
void prepare_stage2(Pipeline& p, const ExperimentConfig& cfg, Exec exec = Exec::parallel);
Pipeline prepare(const ExperimentConfig& cfg, Exec exec = Exec::parallel);

/// Held-out scenarios; their seeds come from a stream separate from training.
std::vector<AttackScenario> held_out_scenarios(const Pipeline& p, const ExperimentConfig& cfg);
std::uint64_t held_out_seed(std::uint64_t run_seed, std::size_t i);

/// |policy cost - oracle cost| / |oracle cost| x 100, with policy cost = -reward.
double gap_percent(double policy_reward, double oracle_cost);

using Policy = std::function<Eigen::VectorXd(const Eigen::VectorXd& state, const StepContext& ctx)>;

struct RolloutStep {
    std::size_t t = 0;
    double cost = 0.0;
    double reward = 0.0;
    bool member = false;
    bool pf_ok = false;
    double max_psi = 0.0;
    double max_omega = 0.0;
    double latency_s = 0.0;  // policy call only
};

struct Rollout {
    std::vector<RolloutStep> steps;
    Eigen::MatrixXd psi;    // branch x hour
    Eigen::MatrixXd omega;  // bus x hour
    double total_reward = 0.0;
    std::size_t violations = 0;
};

Rollout rollout(const Pipeline& p, const EnvConfig& env_cfg, const AttackScenario& sc, const Policy& policy, double r_cap);

struct GapRow {
    std::size_t scenario = 0;
    std::uint64_t seed = 0;
    std::string kind;
    double policy_reward = 0.0;
    double oracle_cost = 0.0;
    double gap = 0.0;
    std::size_t violations = 0;
    std::size_t steps = 0;
};

struct GapReport {
    std::vector<GapRow> rows;
    double mean_gap = 0.0;
    double max_gap = 0.0;
    std::size_t violation_steps = 0;
    std::size_t total_steps = 0;
    std::vector<double> latency_s;  // per state
    std::size_t projection_calls = 0;
    std::vector<Rollout> rollouts;
};

struct LatencyStats {
    double mean_ms = 0.0, p50_ms = 0.0, p95_ms = 0.0, p99_ms = 0.0, max_ms = 0.0;
};
LatencyStats latency_stats(std::vector<double> seconds);

/// Oracle schedules for each scenario (greedy Stage 3 with SOC carried forward).
std::vector<BessSchedule> oracle_schedules(const Pipeline& p, const std::vector<AttackScenario>& scenarios,
                                           const OracleOptions& opt, double soc0, Exec exec = Exec::parallel);

/// Deploys the policy with beta = 1 and no projection.
GapReport evaluate(const Pipeline& p, const Agent& agent, const EnvConfig& env_cfg,
                   const std::vector<AttackScenario>& scenarios, const std::vector<double>& oracle_costs,
                   Exec exec = Exec::parallel);
GapReport evaluate_policy(const Pipeline& p, const Policy& policy, double r_cap, const EnvConfig& env_cfg,
                          const std::vector<AttackScenario>& scenarios, const std::vector<double>& oracle_costs,
                          Exec exec = Exec::parallel);

struct TimingRow {
    std::size_t t = 0;
    double oracle_ms = 0.0;
    double policy_ms = 0.0;
};

struct TimingReport {
    std::vector<TimingRow> rows;
    double oracle_mean_ms = 0.0;
    double policy_mean_ms = 0.0;
    double factor = 0.0;  // oracle / policy
};

double complexity_factor(double reference_ms, double candidate_ms);
TimingReport timing_report(const Pipeline& p, const Agent& agent, const EnvConfig& env_cfg, const AttackScenario& sc,
                           const OracleOptions& opt, int policy_repeats = 200);

// CSV writers. Everything written here is deterministic except the files under wallclock/.
void write_stage1_csv(const std::filesystem::path& path, const Pipeline& p);
void write_attack_csv(const std::filesystem::path& path, const Pipeline& p);
void write_schedule_csv(const std::filesystem::path& path, const NetworkCase& c, const BessSchedule& s);
void write_training_csv(const std::filesystem::path& dir, const TrainingLog& log);
void write_gap_csv(const std::filesystem::path& dir, const std::string& prefix, const GapReport& r);
void write_heatmaps(const std::filesystem::path& dir, const std::string& prefix, const GapReport& r);
void write_timing_csv(const std::filesystem::path& path, const TimingReport& r);
void write_latency_csv(const std::filesystem::path& path, const GapReport& r);

struct RunSummary {
    double trained_mean_gap = 0.0;
    double untrained_mean_gap = 0.0;
    double hold_violation_rate = 0.0;
    double final_violation_rate = 0.0;
    std::size_t eval_violation_steps = 0;
    std::size_t projection_calls_in_eval = 0;
    LatencyStats latency;
    double timing_factor = 0.0;
};

/// Stage 1 -> Stage 2 -> train -> evaluate, writing every artifact under cfg.out_dir.
RunSummary run_pipeline(const ExperimentConfig& cfg, Exec exec = Exec::parallel);

}  // namespace gridguard
