#include "gridguard/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace gridguard {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : j.items())
        if (!ok.count(k)) throw std::invalid_argument("unknown config key '" + where + "." + k + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

std::string num(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os << std::setprecision(12) << v;
    return os.str();
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    return os;
}

template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }
    check_keys(j, "config", {"case", "profile", "budget", "seeds", "eval_scenarios", "out", "train", "oracle"});
    read(j, "case", cfg.case_name);
    read(j, "profile", cfg.profile);
    read(j, "budget", cfg.budget);
    read(j, "seeds", cfg.seeds);
    read(j, "eval_scenarios", cfg.eval_scenarios);
    read(j, "out", cfg.out_dir);
    if (j.contains("train")) {
        const json& t = j.at("train");
        check_keys(t, "train",
                   {"episodes", "hold_fraction", "ramp_fraction", "buffer_min", "buffer_capacity", "sigma_start",
                    "sigma_end", "reward_scale", "r_cap_factor", "rho_window", "rho_eps", "adapt_rho", "soc0", "hidden",
                    "batch", "lr_actor", "lr_critic", "gamma", "tau", "policy_delay", "target_sigma", "target_clip",
                    "lambda_max", "mu_max", "alpha_lambda", "alpha_mu", "rho0", "kappa", "mix", "shaping"});
        TrainConfig& tc = cfg.train;
        read(t, "episodes", tc.episodes);
        read(t, "hold_fraction", tc.hold_fraction);
        read(t, "ramp_fraction", tc.ramp_fraction);
        read(t, "buffer_min", tc.buffer_min);
        read(t, "buffer_capacity", tc.buffer_capacity);
        read(t, "sigma_start", tc.sigma_start);
        read(t, "sigma_end", tc.sigma_end);
        read(t, "reward_scale", tc.reward_scale);
        read(t, "r_cap_factor", tc.r_cap_factor);
        read(t, "rho_window", tc.rho_window);
        read(t, "rho_eps", tc.rho_eps);
        read(t, "adapt_rho", tc.adapt_rho);
        read(t, "soc0", tc.env.soc0);
        AgentConfig& a = tc.agent;
        read(t, "hidden", a.hidden);
        read(t, "batch", a.batch);
        read(t, "lr_actor", a.lr_actor);
        read(t, "lr_critic", a.lr_critic);
        read(t, "gamma", a.gamma);
        read(t, "tau", a.tau);
        read(t, "policy_delay", a.policy_delay);
        read(t, "target_sigma", a.target_sigma);
        read(t, "target_clip", a.target_clip);
        read(t, "lambda_max", a.lambda_max);
        read(t, "mu_max", a.mu_max);
        read(t, "alpha_lambda", a.alpha_lambda);
        read(t, "alpha_mu", a.alpha_mu);
        read(t, "rho0", a.rho0);
        read(t, "kappa", a.kappa);
        if (t.contains("mix")) {
            const json& m = t.at("mix");
            check_keys(m, "train.mix", {"worst", "random", "partial"});
            read(m, "worst", tc.mix.worst);
            read(m, "random", tc.mix.random);
            read(m, "partial", tc.mix.partial);
        }
        if (t.contains("shaping")) {
            const json& s = t.at("shaping");
            check_keys(s, "train.shaping",
                       {"voltage_margin", "thermal_margin", "slack_margin", "soc_margin", "voltage_scale",
                        "thermal_scale", "slack_scale", "soc_scale", "unit_scale", "mismatch_scale"});
            ConstraintShaping& cs = tc.env.shaping;
            read(s, "voltage_margin", cs.voltage_margin);
            read(s, "thermal_margin", cs.thermal_margin);
            read(s, "slack_margin", cs.slack_margin);
            read(s, "soc_margin", cs.soc_margin);
            read(s, "voltage_scale", cs.voltage_scale);
            read(s, "thermal_scale", cs.thermal_scale);
            read(s, "slack_scale", cs.slack_scale);
            read(s, "soc_scale", cs.soc_scale);
            read(s, "unit_scale", cs.unit_scale);
            read(s, "mismatch_scale", cs.mismatch_scale);
        }
    }
    if (j.contains("oracle")) {
        const json& o = j.at("oracle");
        check_keys(o, "oracle", {"refine", "max_prox"});
        read(o, "refine", cfg.oracle.refine);
        read(o, "max_prox", cfg.oracle.max_prox);
    }
    if (cfg.seeds.empty()) throw std::invalid_argument("config: seed list must not be empty");
    cfg.train.seed = cfg.seeds.front();
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& cfg) {
    const TrainConfig& t = cfg.train;
    const AgentConfig& a = t.agent;
    const ConstraintShaping& s = t.env.shaping;
    json j = {
        {"case", cfg.case_name},
        {"profile", cfg.profile},
        {"budget", cfg.budget},
        {"seeds", cfg.seeds},
        {"eval_scenarios", cfg.eval_scenarios},
        {"out", cfg.out_dir},
        {"train",
         {{"episodes", t.episodes},
          {"hold_fraction", t.hold_fraction},
          {"ramp_fraction", t.ramp_fraction},
          {"buffer_min", t.buffer_min},
          {"buffer_capacity", t.buffer_capacity},
          {"sigma_start", t.sigma_start},
          {"sigma_end", t.sigma_end},
          {"reward_scale", t.reward_scale},
          {"r_cap_factor", t.r_cap_factor},
          {"rho_window", t.rho_window},
          {"rho_eps", t.rho_eps},
          {"adapt_rho", t.adapt_rho},
          {"soc0", t.env.soc0},
          {"hidden", a.hidden},
          {"batch", a.batch},
          {"lr_actor", a.lr_actor},
          {"lr_critic", a.lr_critic},
          {"gamma", a.gamma},
          {"tau", a.tau},
          {"policy_delay", a.policy_delay},
          {"target_sigma", a.target_sigma},
          {"target_clip", a.target_clip},
          {"lambda_max", a.lambda_max},
          {"mu_max", a.mu_max},
          {"alpha_lambda", a.alpha_lambda},
          {"alpha_mu", a.alpha_mu},
          {"rho0", a.rho0},
          {"kappa", a.kappa},
          {"mix", {{"worst", t.mix.worst}, {"random", t.mix.random}, {"partial", t.mix.partial}}},
          {"shaping",
           {{"voltage_margin", s.voltage_margin},
            {"thermal_margin", s.thermal_margin},
            {"slack_margin", s.slack_margin},
            {"soc_margin", s.soc_margin},
            {"voltage_scale", s.voltage_scale},
            {"thermal_scale", s.thermal_scale},
            {"slack_scale", s.slack_scale},
            {"soc_scale", s.soc_scale},
            {"unit_scale", s.unit_scale},
            {"mismatch_scale", s.mismatch_scale}}}}},
        {"oracle", {{"refine", cfg.oracle.refine}, {"max_prox", cfg.oracle.max_prox}}},
    };
    return j.dump(2) + "\n";
}

void validate(const ExperimentConfig& cfg, const NetworkCase& c, bool check_budget) {
    if (cfg.seeds.empty()) throw std::invalid_argument("seed list must not be empty");
    if (check_budget && cfg.budget > c.attackable.size())
        throw std::invalid_argument("budget K=" + std::to_string(cfg.budget) + " exceeds the " +
                                    std::to_string(c.attackable.size()) + " attackable generators");
    if (cfg.train.episodes == 0) throw std::invalid_argument("episodes must be positive");
    if (cfg.train.hold_fraction < 0 || cfg.train.ramp_fraction < 0 || cfg.train.hold_fraction + cfg.train.ramp_fraction > 1)
        throw std::invalid_argument("hold and ramp fractions must be non-negative and sum to at most 1");
}

// ---------------------------------------------------------------------------
// Stages

Pipeline prepare_stage1(const ExperimentConfig& cfg, Exec exec) {
    Pipeline p;
    stage("case", [&] {
        p.c = load_case(cfg.case_name);
        validate(cfg, p.c, false);
        const std::string prof = cfg.profile.empty() ? (fs::path(data_dir()) / "profile_24h.csv").string() : cfg.profile;
        p.profile = load_profile_file(prof, p.c);
        return 0;
    });
    stage("stage1", [&] {
        p.stage1 = solve_horizon(p.c, p.profile, cfg.stage1, exec);
        if (!p.stage1.feasible) throw std::runtime_error("dispatch infeasible at some hour");
        p.hours = hours_of(p.c, p.profile, p.stage1);
        return 0;
    });
    return p;
}

void prepare_stage2(Pipeline& p, const ExperimentConfig& cfg, Exec exec) {
    stage("stage2", [&] {
        validate(cfg, p.c);
        p.worst = worst_attack_horizon(p.c, p.hours, cfg.budget, cfg.attack, exec);
        return 0;
    });
}

Pipeline prepare(const ExperimentConfig& cfg, Exec exec) {
    Pipeline p = prepare_stage1(cfg, exec);
    prepare_stage2(p, cfg, exec);
    return p;
}

std::uint64_t held_out_seed(std::uint64_t run_seed, std::size_t i) {
    // splitmix64 on a stream tagged apart from the training generator
    std::uint64_t z = run_seed * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull + static_cast<std::uint64_t>(i) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::vector<AttackScenario> held_out_scenarios(const Pipeline& p, const ExperimentConfig& cfg) {
    const AdmittanceMatrix ybus(p.c);
    std::vector<AttackScenario> out;
    for (std::size_t j = 0; out.size() < cfg.eval_scenarios; ++j) {
        if (j > 20 * cfg.eval_scenarios + 100) throw std::runtime_error("cannot draw enough solvable held-out scenarios");
        AttackScenario sc = sample_attack(p.c, p.worst, cfg.train.mix, held_out_seed(cfg.seeds.front(), j));
        bool solvable = true;
        for (std::size_t t = 0; t < p.hours.size() && solvable; ++t) {
            const InjectionSpec inj = dispatch_injection(p.c, p.hours[t].demand, p.hours[t].x, attack_scale(p.c, sc.y.col(idx(t))));
            solvable = try_solve_pf(p.c, ybus, inj, &p.hours[t].x.op).converged;
        }
        if (solvable) out.push_back(std::move(sc));
    }
    return out;
}

double gap_percent(double policy_reward, double oracle_cost) {
    return std::abs(-policy_reward - oracle_cost) / std::abs(oracle_cost) * 100.0;
}

// ---------------------------------------------------------------------------
// Evaluation

Rollout rollout(const Pipeline& p, const EnvConfig& env_cfg, const AttackScenario& sc, const Policy& policy, double r_cap) {
    using clock = std::chrono::steady_clock;
    Environment env(p.c, p.hours, env_cfg);
    Eigen::VectorXd s = env.reset(sc.y);
    Rollout ro;
    ro.psi = Eigen::MatrixXd::Zero(idx(p.c.n_branch()), idx(env.horizon()));
    ro.omega = Eigen::MatrixXd::Zero(idx(p.c.n_bus()), idx(env.horizon()));
    for (std::size_t t = 0; t < env.horizon(); ++t) {
        RolloutStep rs;
        rs.t = t;
        const auto t0 = clock::now();
        const Eigen::VectorXd a = policy(s, env.context());
        rs.latency_s = std::chrono::duration<double>(clock::now() - t0).count();
        const StepResult r = env.step(a.cwiseMax(-1.0).cwiseMin(1.0));
        rs.cost = r.cost;
        rs.pf_ok = r.pf_ok;
        rs.member = r.member;
        rs.reward = r.pf_ok ? -r.cost : -r_cap;
        if (r.pf_ok) {
            rs.max_psi = r.outcome.op.max_psi();
            rs.max_omega = r.outcome.op.max_omega();
            ro.psi.col(idx(t)) = r.outcome.op.psi;
            ro.omega.col(idx(t)) = r.outcome.op.omega;
        }
        ro.total_reward += rs.reward;
        ro.violations += r.member ? 0 : 1;
        ro.steps.push_back(rs);
        s = r.next_state;
    }
    return ro;
}

std::vector<BessSchedule> oracle_schedules(const Pipeline& p, const std::vector<AttackScenario>& scenarios,
                                           const OracleOptions& opt, double soc0, Exec exec) {
    std::vector<BessSchedule> out(scenarios.size());
    const Eigen::VectorXd s0 = Eigen::VectorXd::Constant(idx(p.c.n_bess()), soc0);
    // Scenario-level parallelism; the inner mode scan stays serial.
    parallel_for(exec, scenarios.size(), [&](std::size_t i) {
        out[i] = solve_stage3(p.c, p.hours, scenarios[i].y, s0, opt, Exec::serial);
    });
    return out;
}

GapReport evaluate_policy(const Pipeline& p, const Policy& policy, double r_cap, const EnvConfig& env_cfg,
                          const std::vector<AttackScenario>& scenarios, const std::vector<double>& oracle_costs,
                          Exec exec) {
    if (oracle_costs.size() != scenarios.size()) throw std::invalid_argument("one oracle cost per scenario expected");
    GapReport rep;
    const std::size_t calls0 = projection_call_count();
    rep.rollouts.resize(scenarios.size());
    parallel_for(exec, scenarios.size(), [&](std::size_t i) { rep.rollouts[i] = rollout(p, env_cfg, scenarios[i], policy, r_cap); });
    rep.projection_calls = projection_call_count() - calls0;

    double sum = 0.0;
    for (std::size_t i = 0; i < scenarios.size(); ++i) {
        const Rollout& ro = rep.rollouts[i];
        GapRow row;
        row.scenario = i;
        row.seed = scenarios[i].seed;
        row.kind = to_string(scenarios[i].kind);
        row.policy_reward = ro.total_reward;
        row.oracle_cost = oracle_costs[i];
        row.gap = gap_percent(row.policy_reward, row.oracle_cost);
        row.violations = ro.violations;
        row.steps = ro.steps.size();
        sum += row.gap;
        rep.max_gap = std::max(rep.max_gap, row.gap);
        rep.violation_steps += ro.violations;
        rep.total_steps += ro.steps.size();
        for (const auto& st : ro.steps) rep.latency_s.push_back(st.latency_s);
        rep.rows.push_back(row);
    }
    rep.mean_gap = scenarios.empty() ? 0.0 : sum / static_cast<double>(scenarios.size());
    return rep;
}

GapReport evaluate(const Pipeline& p, const Agent& agent, const EnvConfig& env_cfg,
                   const std::vector<AttackScenario>& scenarios, const std::vector<double>& oracle_costs, Exec exec) {
    const Policy policy = [&agent](const Eigen::VectorXd& s, const StepContext&) { return agent.act(s); };
    return evaluate_policy(p, policy, agent.r_cap, env_cfg, scenarios, oracle_costs, exec);
}

LatencyStats latency_stats(std::vector<double> sec) {
    LatencyStats st;
    if (sec.empty()) return st;
    std::sort(sec.begin(), sec.end());
    auto q = [&](double f) {
        const auto k = static_cast<std::size_t>(std::ceil(f * static_cast<double>(sec.size()))) ;
        return sec[std::min(sec.size() - 1, k == 0 ? 0 : k - 1)] * 1e3;
    };
    double sum = 0.0;
    for (double v : sec) sum += v;
    st.mean_ms = sum / static_cast<double>(sec.size()) * 1e3;
    st.p50_ms = q(0.50);
    st.p95_ms = q(0.95);
    st.p99_ms = q(0.99);
    st.max_ms = sec.back() * 1e3;
    return st;
}

double complexity_factor(double reference_ms, double candidate_ms) { return reference_ms / candidate_ms; }

TimingReport timing_report(const Pipeline& p, const Agent& agent, const EnvConfig& env_cfg, const AttackScenario& sc,
                           const OracleOptions& opt, int policy_repeats) {
    using clock = std::chrono::steady_clock;
    Environment env(p.c, p.hours, env_cfg);
    Eigen::VectorXd s = env.reset(sc.y);
    TimingReport rep;
    for (std::size_t t = 0; t < env.horizon(); ++t) {
        TimingRow row;
        row.t = t;
        auto t0 = clock::now();
        const StepSolution sol = solve_step(env.context(), opt, Exec::serial);
        row.oracle_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        (void)sol;
        Eigen::VectorXd a;
        t0 = clock::now();
        for (int k = 0; k < policy_repeats; ++k) a = agent.act(s);
        row.policy_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count() / std::max(1, policy_repeats);
        rep.rows.push_back(row);
        s = env.step(a).next_state;
    }
    for (const auto& r : rep.rows) {
        rep.oracle_mean_ms += r.oracle_ms / static_cast<double>(rep.rows.size());
        rep.policy_mean_ms += r.policy_ms / static_cast<double>(rep.rows.size());
    }
    rep.factor = complexity_factor(rep.oracle_mean_ms, rep.policy_mean_ms);
    return rep;
}

// ---------------------------------------------------------------------------
// Writers

void write_stage1_csv(const fs::path& path, const Pipeline& p) {
    auto os = open_out(path);
    os << "hour,generator,bus,pg_mw,qg_mvar,vm_pu,hour_cost,feasible\n";
    for (const auto& s : p.stage1.slices)
        for (std::size_t g = 0; g < p.c.n_gen(); ++g) {
            const std::size_t bus = p.c.generators[g].bus;
            os << s.t + 1 << ',' << g << ',' << p.c.buses[bus].id << ',' << num(p.c.to_mw(s.pg[idx(g)])) << ','
               << num(p.c.to_mw(s.qg[idx(g)])) << ',' << num(s.vm[idx(bus)]) << ',' << num(s.cost) << ','
               << (s.feasible ? 1 : 0) << '\n';
        }
}

void write_attack_csv(const fs::path& path, const Pipeline& p) {
    auto os = open_out(path);
    os << "hour,budget,j2,gen_cost,slack_cost,line_term,voltage_term,slack_excess,blackout";
    for (std::size_t k = 0; k < p.c.attackable.size(); ++k)
        os << ",y_bus" << p.c.buses[p.c.generators[p.c.attackable[k]].bus].id;
    os << '\n';
    for (const auto& s : p.worst.slices) {
        const AttackEval& e = s.eval;
        os << s.t + 1 << ',' << p.worst.budget << ',' << num(e.j2) << ',' << num(e.gen_cost) << ',' << num(e.slack_cost)
           << ',' << num(e.line_term) << ',' << num(e.voltage_term) << ',' << num(e.slack_excess) << ','
           << (e.blackout ? 1 : 0);
        for (Eigen::Index k = 0; k < s.y.size(); ++k) os << ',' << num(s.y[k]);
        os << '\n';
    }
}

void write_schedule_csv(const fs::path& path, const NetworkCase& c, const BessSchedule& s) {
    auto os = open_out(path);
    os << "hour,unit,bus,mode,p_ch_mw,p_dis_mw,q_mvar,soc_start,soc_end,stage_cost\n";
    static const char* names[] = {"idle", "charge", "discharge"};
    for (Eigen::Index t = 0; t < s.p_ch.cols(); ++t)
        for (std::size_t b = 0; b < c.n_bess(); ++b) {
            const Mode m = s.modes[static_cast<std::size_t>(t)][b];
            os << t + 1 << ',' << b << ',' << c.buses[c.bess[b].bus].id << ',' << names[static_cast<int>(m)] << ','
               << num(c.to_mw(s.p_ch(idx(b), t))) << ',' << num(c.to_mw(s.p_dis(idx(b), t))) << ','
               << num(c.to_mw(s.q(idx(b), t))) << ',' << num(s.soc(idx(b), t)) << ',' << num(s.soc(idx(b), t + 1)) << ','
               << num(s.stage_cost[t]) << '\n';
        }
}

void write_training_csv(const fs::path& dir, const TrainingLog& log) {
    {
        auto os = open_out(dir / "training_steps.csv");
        os << "step,episode,t,reward,beta,sigma,h_inf,g_pos,r_lambda_norm,r_mu_norm,member,pf_ok,projected,"
              "projection_feasible,projection_distance,blend_error,lambda_inf,mu_inf,rho,critic_loss,actor_loss,"
              "dual_update\n";
        for (const auto& s : log.steps)
            os << s.step << ',' << s.episode << ',' << s.t << ',' << num(s.reward) << ',' << num(s.beta) << ','
               << num(s.sigma) << ',' << num(s.h_inf) << ',' << num(s.g_pos) << ',' << num(s.r_lambda_norm) << ','
               << num(s.r_mu_norm) << ',' << s.member << ',' << s.pf_ok << ',' << s.projected << ','
               << s.projection_feasible << ',' << num(s.projection_distance) << ',' << num(s.blend_error) << ','
               << num(s.lambda_inf) << ',' << num(s.mu_inf) << ',' << num(s.rho) << ',' << num(s.critic_loss) << ','
               << num(s.actor_loss) << ',' << s.dual_update << '\n';
    }
    {
        auto os = open_out(dir / "training_episodes.csv");
        os << "episode,scenario_seed,kind,resamples,total_reward,violations\n";
        for (const auto& e : log.episodes)
            os << e.episode << ',' << e.scenario_seed << ',' << e.kind << ',' << e.resamples << ','
               << num(e.total_reward) << ',' << e.violations << '\n';
    }
    {
        auto os = open_out(dir / "wallclock" / "training_step_seconds.csv");
        os << "step,seconds\n";
        for (std::size_t i = 0; i < log.step_seconds.size(); ++i) os << i << ',' << num(log.step_seconds[i]) << '\n';
    }
}

void write_gap_csv(const fs::path& dir, const std::string& prefix, const GapReport& r) {
    {
        auto os = open_out(dir / (prefix + "_gap.csv"));
        os << "scenario,seed,kind,policy_reward,oracle_cost,gap_pct,violations,steps\n";
        for (const auto& g : r.rows)
            os << g.scenario << ',' << g.seed << ',' << g.kind << ',' << num(g.policy_reward) << ','
               << num(g.oracle_cost) << ',' << num(g.gap) << ',' << g.violations << ',' << g.steps << '\n';
    }
    {
        auto os = open_out(dir / (prefix + "_steps.csv"));
        os << "scenario,t,cost,reward,member,pf_ok,max_psi,max_omega\n";
        for (std::size_t i = 0; i < r.rollouts.size(); ++i)
            for (const auto& s : r.rollouts[i].steps)
                os << i << ',' << s.t << ',' << num(s.cost) << ',' << num(s.reward) << ',' << s.member << ',' << s.pf_ok
                   << ',' << num(s.max_psi) << ',' << num(s.max_omega) << '\n';
    }
    {
        auto os = open_out(dir / (prefix + "_summary.csv"));
        os << "scenarios,mean_gap_pct,max_gap_pct,violation_steps,total_steps,projection_calls\n";
        os << r.rows.size() << ',' << num(r.mean_gap) << ',' << num(r.max_gap) << ',' << r.violation_steps << ','
           << r.total_steps << ',' << r.projection_calls << '\n';
    }
}

void write_heatmaps(const fs::path& dir, const std::string& prefix, const GapReport& r) {
    if (r.rollouts.empty()) return;
    const Eigen::Index hours = r.rollouts.front().psi.cols();
    Eigen::MatrixXd psi = Eigen::MatrixXd::Zero(r.rollouts.front().psi.rows(), hours);
    Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(r.rollouts.front().omega.rows(), hours);
    for (const auto& ro : r.rollouts) {
        psi += ro.psi / static_cast<double>(r.rollouts.size());
        omega += ro.omega / static_cast<double>(r.rollouts.size());
    }
    auto dump = [&](const fs::path& path, const char* label, const Eigen::MatrixXd& m) {
        auto os = open_out(path);
        os << label;
        for (Eigen::Index t = 0; t < hours; ++t) os << ",h" << t + 1;
        os << '\n';
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            os << i;
            for (Eigen::Index t = 0; t < hours; ++t) os << ',' << num(m(i, t));
            os << '\n';
        }
    };
    dump(dir / (prefix + "_heatmap_line.csv"), "branch", psi);
    dump(dir / (prefix + "_heatmap_voltage.csv"), "bus", omega);
}

void write_timing_csv(const fs::path& path, const TimingReport& r) {
    auto os = open_out(path);
    os << "hour,oracle_ms,policy_ms,factor\n";
    for (const auto& row : r.rows)
        os << row.t + 1 << ',' << num(row.oracle_ms) << ',' << num(row.policy_ms) << ','
           << num(complexity_factor(row.oracle_ms, row.policy_ms)) << '\n';
    os << "mean," << num(r.oracle_mean_ms) << ',' << num(r.policy_mean_ms) << ',' << num(r.factor) << '\n';
}

void write_latency_csv(const fs::path& path, const GapReport& r) {
    auto os = open_out(path);
    const LatencyStats st = latency_stats(r.latency_s);
    os << "states,mean_ms,p50_ms,p95_ms,p99_ms,max_ms\n";
    os << r.latency_s.size() << ',' << num(st.mean_ms) << ',' << num(st.p50_ms) << ',' << num(st.p95_ms) << ','
       << num(st.p99_ms) << ',' << num(st.max_ms) << '\n';
}

// ---------------------------------------------------------------------------

RunSummary run_pipeline(const ExperimentConfig& cfg, Exec exec) {
    const fs::path out(cfg.out_dir);
    fs::create_directories(out / "wallclock");
    open_out(out / "config.json") << config_to_json(cfg);

    Pipeline p = prepare(cfg, exec);
    stage("report", [&] {
        write_stage1_csv(out / "stage1.csv", p);
        write_attack_csv(out / "attack.csv", p);
        return 0;
    });

    TrainResult tr = stage("train", [&] { return train(p.c, p.hours, p.worst, cfg.train); });
    stage("report", [&] {
        write_training_csv(out, tr.log);
        tr.agent.save((out / "agent.bin").string());
        return 0;
    });

    RunSummary sum;
    stage("evaluate", [&] {
        const std::vector<AttackScenario> scenarios = held_out_scenarios(p, cfg);
        std::set<std::uint64_t> train_seeds;
        for (const auto& e : tr.log.episodes) train_seeds.insert(e.scenario_seed);
        for (const auto& sc : scenarios)
            if (train_seeds.count(sc.seed)) throw std::runtime_error("held-out seed collides with a training seed");

        const std::vector<BessSchedule> oracle = oracle_schedules(p, scenarios, cfg.oracle, cfg.train.env.soc0, exec);
        std::vector<double> j3;
        {
            auto os = open_out(out / "oracle.csv");
            os << "scenario,seed,kind,j3,feasible\n";
            for (std::size_t i = 0; i < oracle.size(); ++i) {
                j3.push_back(oracle[i].j3);
                os << i << ',' << scenarios[i].seed << ',' << to_string(scenarios[i].kind) << ',' << num(oracle[i].j3)
                   << ',' << oracle[i].feasible << '\n';
            }
        }
        if (!oracle.empty()) write_schedule_csv(out / "oracle_schedule_0.csv", p.c, oracle.front());

        const GapReport trained = evaluate(p, tr.agent, cfg.train.env, scenarios, j3, exec);
        // Same initialization as the trained agent, before any update.
        std::mt19937_64 seed_rng(cfg.train.seed);
        Agent untrained(p.c.n_bus(), p.c.n_bess(), residual_h_size(p.c), residual_g_size(p.c), cfg.train.agent, seed_rng());
        untrained.r_cap = tr.agent.r_cap;
        const GapReport fresh = evaluate(p, untrained, cfg.train.env, scenarios, j3, exec);
        const Policy idle = [&p](const Eigen::VectorXd&, const StepContext&) {
            return idle_action(p.c, Eigen::VectorXd::Constant(idx(3 * p.c.n_bess()), -1.0));
        };
        const GapReport undefended = evaluate_policy(p, idle, tr.agent.r_cap, cfg.train.env, scenarios, j3, exec);

        write_gap_csv(out, "trained", trained);
        write_gap_csv(out, "untrained", fresh);
        write_gap_csv(out, "idle", undefended);
        write_heatmaps(out, "trained", trained);
        write_heatmaps(out, "idle", undefended);
        write_latency_csv(out / "wallclock" / "latency.csv", trained);

        sum.trained_mean_gap = trained.mean_gap;
        sum.untrained_mean_gap = fresh.mean_gap;
        sum.eval_violation_steps = trained.violation_steps;
        sum.projection_calls_in_eval = trained.projection_calls + fresh.projection_calls + undefended.projection_calls;
        sum.latency = latency_stats(trained.latency_s);

        if (!scenarios.empty()) {
            const TimingReport tm = timing_report(p, tr.agent, cfg.train.env, scenarios.front(), cfg.oracle);
            write_timing_csv(out / "wallclock" / "timing.csv", tm);
            sum.timing_factor = tm.factor;
        }
        return 0;
    });

    std::size_t hold_n = 0, hold_v = 0, fin_n = 0, fin_v = 0;
    const std::size_t n = tr.log.steps.size(), first_final = n - n / 10;
    for (std::size_t i = 0; i < n; ++i) {
        const StepLog& s = tr.log.steps[i];
        if (s.beta == 0.0) {
            ++hold_n;
            hold_v += s.member ? 0 : 1;
        }
        if (i >= first_final) {
            ++fin_n;
            fin_v += s.member ? 0 : 1;
        }
    }
    sum.hold_violation_rate = hold_n ? static_cast<double>(hold_v) / static_cast<double>(hold_n) : 0.0;
    sum.final_violation_rate = fin_n ? static_cast<double>(fin_v) / static_cast<double>(fin_n) : 0.0;
    {
        auto os = open_out(out / "summary.csv");
        os << "trained_mean_gap_pct,untrained_mean_gap_pct,hold_violation_rate,final_violation_rate,"
              "eval_violation_steps,projection_calls_in_eval\n";
        os << num(sum.trained_mean_gap) << ',' << num(sum.untrained_mean_gap) << ',' << num(sum.hold_violation_rate) << ','
           << num(sum.final_violation_rate) << ',' << sum.eval_violation_steps << ',' << sum.projection_calls_in_eval
           << '\n';
    }
    {
        auto os = open_out(out / "wallclock" / "summary.csv");
        os << "latency_mean_ms,latency_p50_ms,latency_p95_ms,latency_p99_ms,latency_max_ms,oracle_policy_factor\n";
        os << num(sum.latency.mean_ms) << ',' << num(sum.latency.p50_ms) << ',' << num(sum.latency.p95_ms) << ','
           << num(sum.latency.p99_ms) << ',' << num(sum.latency.max_ms) << ',' << num(sum.timing_factor) << '\n';
    }
    return sum;
}

}  // namespace gridguard
