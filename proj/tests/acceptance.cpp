// One PASS/FAIL line per acceptance criterion. Arguments select a subset, e.g. `acceptance 1 4 9`.

#include "oracles.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

using namespace gridguard;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

// Column name -> values of a CSV written by the harness.
std::map<std::string, std::vector<std::string>> read_csv(const fs::path& path) {
    std::ifstream in(path);
    std::map<std::string, std::vector<std::string>> cols;
    std::vector<std::string> names;
    std::string line;
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ',')) out.push_back(tok);
        return out;
    };
    if (std::getline(in, line)) names = split(line);
    while (std::getline(in, line)) {
        const auto v = split(line);
        for (std::size_t i = 0; i < names.size() && i < v.size(); ++i) cols[names[i]].push_back(v[i]);
    }
    return cols;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------

Verdict powerflow() {
    double worst = 0.0;
    {
        const NetworkCase c = case2();
        InjectionSpec inj = InjectionSpec::zeros(2, 0);
        for (double p : {0.1, 0.5, 1.0, 2.0}) {
            inj.p[1] = -p;
            inj.q[1] = -0.4 * p;
            const OperatingPoint op = solve_pf(c, inj);
            const auto [v, th] = oracles::two_bus(p, 0.4 * p, 0.1);
            worst = std::max({worst, std::abs(op.vm[1] - v), std::abs(op.va[1] - th)});
        }
    }
    {
        const NetworkCase c = case3();
        const AdmittanceMatrix y(c);
        InjectionSpec inj = InjectionSpec::zeros(3, 0);
        inj.vm_set << 1.05, 1.04, 1.0;
        inj.pv[1] = true;
        for (double load : {0.5, 1.1, 1.6}) {
            inj.p << 0.0, 0.8, -load;
            inj.q << 0.0, 0.0, -0.35 * load;
            const OperatingPoint op = solve_pf(c, y, inj);
            const Eigen::VectorXcd v = oracles::gauss_seidel(y, inj);
            for (Eigen::Index i = 0; i < 3; ++i)
                worst = std::max({worst, std::abs(op.vm[i] - std::abs(v[i])), std::abs(op.va[i] - std::arg(v[i]))});
        }
    }
    double residual = 0.0;
    {
        const NetworkCase c = load_case("case30");
        const AdmittanceMatrix y(c);
        const Demand d = base_demand(c);
        const DispatchSlice x = solve_stage1(c, d);
        const InjectionSpec inj = dispatch_injection(c, d, x, Eigen::VectorXd::Ones(static_cast<Eigen::Index>(c.n_gen())));
        const OperatingPoint op = solve_pf(c, y, inj);
        const Eigen::VectorXcd s = bus_injections(y, op.vm, op.va);
        for (Eigen::Index i = 0; i < s.size(); ++i) {
            if (static_cast<std::size_t>(i) == c.slack_bus()) continue;
            residual = std::max({residual, std::abs(s[i].real() - inj.p[i]), std::abs(s[i].imag() - inj.q[i])});
        }
    }
    return {worst <= 1e-8 && residual <= 1e-8,
            "max oracle deviation " + fmt(worst) + " pu, 30-bus residual " + fmt(residual) + " pu"};
}

Verdict stage1() {
    const NetworkCase c = case3();
    const DispatchSlice x = solve_stage1(c, base_demand(c));
    const oracles::Stage1Grid g = oracles::stage1_grid(c);
    const double rel = std::abs(x.cost - g.cost) / g.cost;
    return {x.feasible && rel <= 1e-3,
            "solver $" + fmt(x.cost, 8) + " vs grid $" + fmt(g.cost, 8) + " (" + fmt(100 * rel) + "%, " +
                std::to_string(g.points) + " grid points)"};
}

Verdict stage2() {
    const NetworkCase c3 = case3();
    const HourData h = base_hour(c3);
    const AttackSlice s = worst_attack(c3, AdmittanceMatrix(c3), h, 1);
    const oracles::AttackGrid g = oracles::attack_grid(c3, h);
    const bool grid_ok = s.eval.j2 >= g.j2 - 1e-9 && s.eval.j2 <= g.j2 + g.max_step;

    const NetworkCase c = load_case("case30");
    const AdmittanceMatrix y(c);
    const LoadProfile prof = load_profile_file(data_dir() + "/profile_24h.csv", c);
    const std::vector<HourData> hours = hours_of(c, prof, solve_horizon(c, prof));
    std::size_t breaks = 0;
    for (const auto& hr : hours) {
        const auto sweep = worst_attack_sweep(c, y, hr, c.attackable.size());
        for (std::size_t k = 0; k + 1 < sweep.size(); ++k) breaks += sweep[k + 1].eval.j2 < sweep[k].eval.j2 - 1e-9;
    }
    return {grid_ok && breaks == 0, "3-bus J2 " + fmt(s.eval.j2, 8) + " vs grid " + fmt(g.j2, 8) + " (resolution " +
                                        fmt(g.max_step) + "); 30-bus monotonicity breaks " + std::to_string(breaks) +
                                        " over 24 hours x K=0.." + std::to_string(c.attackable.size())};
}

Verdict projection() {
    struct State {
        const NetworkCase* c;
        double attack, soc;
    };
    const NetworkCase c3 = case3(), cv = case3_vlow();
    const std::vector<State> states{{&c3, 0.0, 0.5}, {&c3, 1.0, 0.9}, {&cv, 1.0, 0.5}, {&cv, 1.0, 0.12}};
    const std::vector<Eigen::VectorXd> grid = oracles::action_grid(1);
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(-1.2, 1.2);
    std::size_t fails = 0, not_idem = 0, dominated = 0, identity = 0, n = 0;
    for (const State& st : states) {
        const AdmittanceMatrix y(*st.c);
        const HourData h = base_hour(*st.c);
        const StepContext ctx =
            make_step_context(*st.c, y, h, Eigen::VectorXd::Constant(1, st.attack), Eigen::VectorXd::Constant(1, st.soc));
        std::vector<Eigen::VectorXd> members;
        for (const auto& a : grid)
            if (evaluate_action(ctx, a).member) members.push_back(a);
        for (int k = 0; k < 250; ++k, ++n) {
            const Eigen::VectorXd a = Eigen::Vector3d(u(rng), u(rng), u(rng));
            const ProjectionResult r = project_action(ctx, a);
            identity += r.path == "identity";
            if (!r.feasible || !evaluate_action(ctx, r.a).member) ++fails;
            if ((project_action(ctx, r.a).a - r.a).norm() != 0.0) ++not_idem;
            double best = std::numeric_limits<double>::infinity();
            for (const auto& m : members) best = std::min(best, (m - a).norm());
            if (r.distance > best + 1e-9) ++dominated;
        }
    }
    return {fails == 0 && not_idem == 0 && dominated == 0,
            std::to_string(n) + " actions (" + std::to_string(identity) + " already feasible): " + std::to_string(fails) +
                " non-members, " + std::to_string(not_idem) + " not idempotent, " + std::to_string(dominated) +
                " farther than a feasible grid point"};
}

// The desk run feeds criteria 5, 6 and 7.
struct DeskRun {
    bool done = false;
    RunSummary sum;
    fs::path out = "acceptance_run";
    double seconds = 0.0;
    std::string error;
};

DeskRun& desk_run() {
    static DeskRun d;
    if (d.done) return d;
    d.done = true;
    ExperimentConfig cfg;
    cfg.out_dir = d.out.string();
    const auto t0 = std::chrono::steady_clock::now();
    try {
        d.sum = run_pipeline(cfg);
    } catch (const std::exception& e) {
        d.error = e.what();
    }
    d.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return d;
}

Verdict safety() {
    DeskRun& d = desk_run();
    if (!d.error.empty()) return {false, "desk run failed: " + d.error};
    const auto steps = read_csv(d.out / "training_steps.csv");
    std::size_t hold = 0, hold_bad = 0, hold_empty = 0;
    for (std::size_t i = 0; i < steps.at("beta").size(); ++i) {
        if (std::stod(steps.at("beta")[i]) != 0.0) continue;
        ++hold;
        if (steps.at("member")[i] == "0") {
            ++hold_bad;
            hold_empty += steps.at("projection_feasible")[i] == "0";
        }
    }
    return {d.sum.hold_violation_rate == 0.0 && d.sum.final_violation_rate < 0.01,
            "beta=0 window " + std::to_string(hold_bad) + "/" + std::to_string(hold) + " violations (" +
                std::to_string(hold_empty) + " where the projection found no member), final 10% rate " +
                fmt(100 * d.sum.final_violation_rate) + "% (run " + fmt(d.seconds, 5) + " s)"};
}

Verdict gap() {
    DeskRun& d = desk_run();
    if (!d.error.empty()) return {false, "desk run failed: " + d.error};
    return {d.sum.trained_mean_gap <= 15.0 && d.sum.trained_mean_gap < d.sum.untrained_mean_gap,
            "trained mean gap " + fmt(d.sum.trained_mean_gap) + "%, untrained " + fmt(d.sum.untrained_mean_gap) +
                "%, deployment projections " + std::to_string(d.sum.projection_calls_in_eval)};
}

Verdict latency() {
    DeskRun& d = desk_run();
    if (!d.error.empty()) return {false, "desk run failed: " + d.error};
    return {d.sum.latency.p99_ms < 1.0 && d.sum.timing_factor > 10.0,
            "policy p50 " + fmt(d.sum.latency.p50_ms) + " ms, p99 " + fmt(d.sum.latency.p99_ms) +
                " ms; oracle/policy factor " + fmt(d.sum.timing_factor, 5) + "x"};
}

Verdict invariants() {
    std::vector<std::string> notes;
    bool ok = true;

    // Dual bounds after every update of the desk run, when it has been run.
    if (desk_run().error.empty()) {
        const auto steps = read_csv(desk_run().out / "training_steps.csv");
        const TrainConfig tc;
        std::size_t bad = 0;
        for (std::size_t i = 0; i < steps.at("lambda_inf").size(); ++i)
            bad += std::stod(steps.at("lambda_inf")[i]) > tc.agent.lambda_max || std::stod(steps.at("mu_inf")[i]) > tc.agent.mu_max;
        ok &= bad == 0;
        notes.push_back("dual bound breaches " + std::to_string(bad));
    }

    const NetworkCase c = case3_vlow();
    const std::vector<HourData> hours(24, base_hour(c));
    const AttackPlan plan = worst_attack_horizon(c, hours, 1);
    AgentConfig ac;
    ac.hidden = {32, 32};
    ac.batch = 16;

    // Frozen-dual descent on a fixed batch.
    {
        Environment env(c, hours);
        ReplayBuffer buf(64);
        std::mt19937_64 rng(3);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        Eigen::VectorXd s = env.reset(Eigen::MatrixXd::Ones(1, 24));
        while (buf.size() < 64) {
            const Eigen::VectorXd a = Eigen::Vector3d(u(rng), u(rng), u(rng));
            const StepResult r = env.step(a);
            buf.push({s, a, r.next_state, -1e-3 * r.cost, r.done, r.surrogate});
            s = r.done ? env.reset(Eigen::MatrixXd::Ones(1, 24)) : r.next_state;
        }
        Batch batch;
        for (std::size_t i = 0; i < buf.size(); ++i) batch.push_back(&buf[i]);
        const RowShape shape = row_shape(c, ConstraintShaping{});
        Agent base(c.n_bus(), c.n_bess(), residual_h_size(c), residual_g_size(c), ac, 6);
        base.duals.mu.setConstant(0.5);
        base.duals.rho = 10.0;
        double eta = 1e-2;
        bool mono = false;
        for (int halving = 0; halving < 20 && !mono; ++halving, eta /= 2) {
            Agent a = base;
            double prev = a.actor_loss(batch, c, shape, nullptr).total;
            mono = true;
            for (int k = 0; k < 50 && mono; ++k) {
                Eigen::VectorXd g;
                a.actor_loss(batch, c, shape, &g);
                a.actor.set_params(a.actor.params() - eta * g);
                const double cur = a.actor_loss(batch, c, shape, nullptr).total;
                mono = cur <= prev;
                prev = cur;
            }
        }
        ok &= mono;
        notes.push_back(mono ? "descent monotone at step " + fmt(eta * 2) : "no monotone step size found");
    }

    // Larger penalty, smaller final-epoch violation.
    {
        std::vector<double> v;
        for (double rho : {1.0, 10.0, 100.0}) {
            TrainConfig cfg;
            cfg.agent = ac;
            cfg.episodes = 40;
            cfg.buffer_min = 48;
            cfg.rho_window = 200;
            cfg.seed = 4;
            cfg.agent.rho0 = rho;
            cfg.adapt_rho = false;
            const TrainResult r = train(c, hours, plan, cfg);
            double sum = 0.0;
            for (std::size_t i = r.log.steps.size() - 24; i < r.log.steps.size(); ++i) sum += r.log.steps[i].r_mu_norm;
            v.push_back(sum / 24.0);
        }
        ok &= v[1] <= v[0] && v[2] <= v[1];
        notes.push_back("||r_mu|| at rho 1/10/100: " + fmt(v[0]) + "/" + fmt(v[1]) + "/" + fmt(v[2]));
    }

    // Gradient checks on the network shapes the agent uses for the 30-bus case.
    {
        const NetworkCase c30 = load_case("case30");
        const std::size_t ns = 3 * c30.n_bus() + c30.n_bess(), na = 3 * c30.n_bess();
        std::mt19937_64 rng(8);
        std::normal_distribution<double> n(0.0, 1.0);
        double worst = 0.0;
        for (const auto& [dims, head] : std::vector<std::pair<std::vector<std::size_t>, Activation>>{
                 {{ns, 256, 256, na}, Activation::tanh}, {{ns + na, 256, 256, 1}, Activation::linear}}) {
            Mlp net(dims, head, 5);
            const Eigen::VectorXd p0 = net.params();
            Eigen::MatrixXd x(static_cast<Eigen::Index>(dims.front()), 1);
            for (Eigen::Index i = 0; i < x.rows(); ++i) x(i, 0) = n(rng);
            Mlp::Tape tape;
            const Eigen::MatrixXd y = net.forward(x, tape);
            const Eigen::MatrixXd w = Eigen::MatrixXd::Random(y.rows(), 1);
            Eigen::VectorXd grad = Eigen::VectorXd::Zero(p0.size());
            net.backward(tape, w, grad);
            std::uniform_int_distribution<Eigen::Index> pick(0, p0.size() - 1);
            for (int probe = 0; probe < 100; ++probe) {
                const Eigen::Index k = pick(rng);
                Eigen::VectorXd p = p0;
                p[k] += 1e-6;
                net.set_params(p);
                const double up = (w.transpose() * net.forward(x))(0, 0);
                p[k] -= 2e-6;
                net.set_params(p);
                const double dn = (w.transpose() * net.forward(x))(0, 0);
                const double fd = (up - dn) / 2e-6;
                worst = std::max(worst, std::abs(fd - grad[k]) / std::max(1.0, std::abs(grad[k])));
            }
        }
        ok &= worst <= 1e-6;
        notes.push_back("max relative gradient error " + fmt(worst));
    }

    std::string detail;
    for (const auto& s : notes) detail += (detail.empty() ? "" : "; ") + s;
    return {ok, detail};
}

Verdict determinism() {
    const fs::path base = "acceptance_determinism";
    fs::remove_all(base);
    fs::create_directories(base);
    {
        std::ofstream os(base / "smoke.json");
        os << R"({"case": "case30", "budget": 4, "eval_scenarios": 4,
                 "train": {"episodes": 6, "hidden": [64, 64], "buffer_min": 48, "batch": 32}})";
    }
    std::vector<fs::path> outs{base / "a", base / "b"};
    for (const auto& o : outs) {
        const std::string cmd = std::string(GRIDGUARD_CLI) + " run --config " + (base / "smoke.json").string() +
                                " --seed 7 --out " + o.string() + " > " + (o.string() + ".log") + " 2>&1";
        if (std::system(cmd.c_str()) != 0) return {false, "run failed, see " + o.string() + ".log"};
    }
    std::size_t files = 0, differ = 0;
    for (const auto& e : fs::recursive_directory_iterator(outs[0])) {
        const fs::path rel = fs::relative(e.path(), outs[0]);
        if (!e.is_regular_file() || e.path().extension() != ".csv" || *rel.begin() == "wallclock") continue;
        ++files;
        if (!fs::exists(outs[1] / rel) || slurp(e.path()) != slurp(outs[1] / rel)) ++differ;
    }
    return {files > 0 && differ == 0, std::to_string(files) + " CSV files compared, " + std::to_string(differ) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
        {"power flow vs oracles", powerflow},
        {"stage-1 optimality", stage1},
        {"stage-2 oracle agreement", stage2},
        {"projection guarantee", projection},
        {"training-phase safety", safety},
        {"gap trend", gap},
        {"inference latency", latency},
        {"invariant suite", invariants},
        {"determinism", determinism},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failed += !v.pass;
        std::cout << "criterion " << id << " [" << (v.pass ? "PASS" : "FAIL") << "] " << criteria[i].first << ": "
                  << v.detail << " (" << fmt(s, 4) << " s)" << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
