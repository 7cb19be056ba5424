#include "gridguard/harness.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

using namespace gridguard;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config_path;
    std::string case_name;
    std::int64_t seed = -1;
    std::string out;
    bool serial = false;
};

void add_common(CLI::App* app, Common& o) {
    app->add_option("--config", o.config_path, "JSON experiment config")->check(CLI::ExistingFile);
    app->add_option("--case", o.case_name, "bundled case name or path to a .m case");
    app->add_option("--seed", o.seed, "run seed (replaces the config seed list)");
    app->add_option("--out", o.out, "output directory");
    app->add_flag("--serial", o.serial, "disable the OpenMP kernels");
}

ExperimentConfig resolve(const Common& o) {
    ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
    if (!o.case_name.empty()) cfg.case_name = o.case_name;
    if (o.seed >= 0) {
        cfg.seeds = {static_cast<std::uint64_t>(o.seed)};
        cfg.train.seed = cfg.seeds.front();
    }
    if (!o.out.empty()) cfg.out_dir = o.out;
    fs::create_directories(cfg.out_dir);
    return cfg;
}

Exec exec_of(const Common& o) { return o.serial ? Exec::serial : Exec::parallel; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> oracle_costs(const std::vector<BessSchedule>& s) {
    std::vector<double> j3;
    for (const auto& x : s) j3.push_back(x.j3);
    return j3;
}

Agent load_agent(const std::string& path, const ExperimentConfig& cfg) {
    const std::string p = path.empty() ? (fs::path(cfg.out_dir) / "agent.bin").string() : path;
    return Agent::load(p);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gridguard: attack-aware storage dispatch experiments"};
    app.require_subcommand(1);

    Common o;
    std::string agent_path;
    std::size_t budget = 0;
    std::size_t scenarios = 0;

    auto* stage1 = app.add_subcommand("stage1", "economic dispatch over the horizon");
    auto* attack = app.add_subcommand("attack", "worst-case attack per hour (runs stage1 first)");
    auto* oracle = app.add_subcommand("stage3-oracle", "storage oracle on held-out attack scenarios");
    auto* train_cmd = app.add_subcommand("train", "train the storage policy");
    auto* eval_cmd = app.add_subcommand("evaluate", "gap of a trained policy against the oracle");
    auto* timing = app.add_subcommand("timing", "oracle vs policy wall clock per decision");
    auto* run = app.add_subcommand("run", "full pipeline");
    for (auto* sub : {stage1, attack, oracle, train_cmd, eval_cmd, timing, run}) add_common(sub, o);
    for (auto* sub : {attack, oracle, train_cmd, eval_cmd, timing, run})
        sub->add_option("--budget", budget, "attack budget K (overrides config)");
    for (auto* sub : {oracle, eval_cmd, run}) sub->add_option("--scenarios", scenarios, "held-out scenario count");
    for (auto* sub : {eval_cmd, timing}) sub->add_option("--agent", agent_path, "checkpoint (default <out>/agent.bin)");

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = resolve(o);
        if (budget) cfg.budget = budget;
        if (scenarios) cfg.eval_scenarios = scenarios;
        const Exec exec = exec_of(o);
        const fs::path out(cfg.out_dir);
        const auto t0 = std::chrono::steady_clock::now();

        if (*stage1) {
            const Pipeline p = prepare_stage1(cfg, exec);
            write_stage1_csv(out / "stage1.csv", p);
            std::printf("stage1: cost %.2f $ over %zu hours (%.2f s)\n", p.stage1.total_cost, p.hours.size(),
                        seconds_since(t0));
        } else if (*attack) {
            const Pipeline p = prepare(cfg, exec);
            write_stage1_csv(out / "stage1.csv", p);
            write_attack_csv(out / "attack.csv", p);
            std::printf("attack: K=%zu J2 %.2f $ (%.2f s)\n", cfg.budget, p.worst.total_j2(), seconds_since(t0));
        } else if (*oracle) {
            const Pipeline p = prepare(cfg, exec);
            const auto sc = held_out_scenarios(p, cfg);
            const auto sched = oracle_schedules(p, sc, cfg.oracle, cfg.train.env.soc0, exec);
            std::ofstream os(out / "oracle.csv");
            os << "scenario,seed,kind,j3,feasible\n";
            double mean = 0.0;
            for (std::size_t i = 0; i < sched.size(); ++i) {
                os << i << ',' << sc[i].seed << ',' << to_string(sc[i].kind) << ',' << sched[i].j3 << ','
                   << sched[i].feasible << '\n';
                mean += sched[i].j3 / static_cast<double>(sched.size());
            }
            if (!sched.empty()) write_schedule_csv(out / "oracle_schedule_0.csv", p.c, sched.front());
            std::printf("stage3-oracle: %zu scenarios, mean J3 %.2f $ (%.2f s)\n", sched.size(), mean, seconds_since(t0));
        } else if (*train_cmd) {
            const Pipeline p = prepare(cfg, exec);
            const TrainResult tr = train(p.c, p.hours, p.worst, cfg.train);
            write_training_csv(out, tr.log);
            tr.agent.save((out / "agent.bin").string());
            std::printf("train: %zu steps, rho %.3g (%.2f s)\n", tr.log.steps.size(), tr.agent.duals.rho,
                        seconds_since(t0));
        } else if (*eval_cmd) {
            const Agent agent = load_agent(agent_path, cfg);
            const Pipeline p = prepare(cfg, exec);
            const auto sc = held_out_scenarios(p, cfg);
            const auto sched = oracle_schedules(p, sc, cfg.oracle, cfg.train.env.soc0, exec);
            const GapReport rep = evaluate(p, agent, cfg.train.env, sc, oracle_costs(sched), exec);
            write_gap_csv(out, "trained", rep);
            write_heatmaps(out, "trained", rep);
            write_latency_csv(out / "wallclock" / "latency.csv", rep);
            const LatencyStats lat = latency_stats(rep.latency_s);
            std::printf("evaluate: mean gap %.2f%%, max %.2f%%, violating steps %zu/%zu, p99 latency %.3f ms\n",
                        rep.mean_gap, rep.max_gap, rep.violation_steps, rep.total_steps, lat.p99_ms);
        } else if (*timing) {
            const Agent agent = load_agent(agent_path, cfg);
            const Pipeline p = prepare(cfg, exec);
            const auto sc = held_out_scenarios(p, cfg);
            const TimingReport rep = timing_report(p, agent, cfg.train.env, sc.front(), cfg.oracle);
            write_timing_csv(out / "wallclock" / "timing.csv", rep);
            std::printf("timing: oracle %.3f ms, policy %.4f ms, factor %.1f\n", rep.oracle_mean_ms, rep.policy_mean_ms,
                        rep.factor);
        } else if (*run) {
            const RunSummary s = run_pipeline(cfg, exec);
            std::printf("run: trained gap %.2f%%, untrained gap %.2f%%, final violation rate %.4f, "
                        "projection calls in evaluation %zu (%.1f s)\n",
                        s.trained_mean_gap, s.untrained_mean_gap, s.final_violation_rate, s.projection_calls_in_eval,
                        seconds_since(t0));
        }
    } catch (const StageError& e) {
        std::fprintf(stderr, "error in stage %s\n", e.what());
        return 1;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
