// Serial vs OpenMP timings of the parallel kernels on the 30-bus case.
// Argument 0 selects Exec::serial, 1 selects Exec::parallel.
#include "gridguard/bess.hpp"

#include <benchmark/benchmark.h>

using namespace gridguard;

namespace {

struct Setup {
    NetworkCase c = load_case("case30");
    AdmittanceMatrix y{c};
    LoadProfile prof = load_profile_file(std::string(GRIDGUARD_DATA_DIR) + "/profile_24h.csv", c);
    DispatchSolution sol = solve_horizon(c, prof, {}, Exec::serial);
    std::vector<HourData> hours = hours_of(c, prof, sol);
    static constexpr std::size_t hour = 18;
    AttackSlice worst = worst_attack(c, y, hours[hour], 4, {}, Exec::serial);
};

const Setup& setup() {
    static const Setup s;
    return s;
}

Exec exec_of(const benchmark::State& st) { return st.range(0) ? Exec::parallel : Exec::serial; }

void BM_SolveHorizon(benchmark::State& st) {
    const auto& s = setup();
    for (auto _ : st) benchmark::DoNotOptimize(solve_horizon(s.c, s.prof, {}, exec_of(st)).total_cost);
}

void BM_WorstAttack(benchmark::State& st) {
    const auto& s = setup();
    for (auto _ : st)
        benchmark::DoNotOptimize(worst_attack(s.c, s.y, s.hours[Setup::hour], 4, {}, exec_of(st)).eval.j2);
}

void BM_SolveStep(benchmark::State& st) {
    const auto& s = setup();
    Eigen::VectorXd soc(s.c.bess.size());
    soc.setConstant(0.5);
    const auto ctx = make_step_context(s.c, s.y, s.hours[Setup::hour], s.worst.y, soc);
    for (auto _ : st) benchmark::DoNotOptimize(solve_step(ctx, {}, exec_of(st)).outcome.cost);
}

}  // namespace

BENCHMARK(BM_SolveHorizon)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->Iterations(3);
BENCHMARK(BM_WorstAttack)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->Iterations(3);
BENCHMARK(BM_SolveStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->Iterations(5);

BENCHMARK_MAIN();
