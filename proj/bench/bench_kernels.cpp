#include <benchmark/benchmark.h>

#include "fwdperf/contract.hpp"
#include "fwdperf/spde.hpp"
#include "fwdperf/verification.hpp"

#include <cmath>

using namespace fwdperf;

namespace {

const MarketModel kBS = MarketModel::black_scholes(BlackScholes2{});

Exec exec_of(const benchmark::State& st) { return st.range(0) ? Exec::parallel : Exec::serial; }

// one Heun step of the log-density equation on M nodes
void BM_step_Y(benchmark::State& st) {
    const std::size_t M = static_cast<std::size_t>(st.range(1));
    const LogGrid g = LogGrid::around(1.0, M);
    const BrownianPath path = simulate_brownian(2, 1.0, 1e-3, 1, 0);
    const LogCoefficients co = build_log_coefficients(merton_strategy(kBS, 0.5), kBS, PathView{&path, 0}, g);
    std::vector<double> Y(M);
    for (std::size_t i = 0; i < M; ++i) Y[i] = -1.3 * g.z(i);
    const double dt = 0.5 * co.stable_dt(g.dz());
    const double dW[2] = {0.01, -0.02};
    YStepper stepper(M);
    const Exec ex = exec_of(st);
    for (auto _ : st) {
        stepper.step(Y, co, dt, dW, g.dz(), ex);
        benchmark::DoNotOptimize(Y.data());
    }
    st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(M));
}

// a full SPDE solve along one path
void BM_solve_R(benchmark::State& st) {
    const std::size_t M = static_cast<std::size_t>(st.range(1));
    const LogGrid g = LogGrid::around(1.0, M);
    const BrownianPath path = simulate_brownian(2, 0.25, 1e-3, 1, 0);
    SolveOptions o;
    o.exec = exec_of(st);
    o.snapshot_steps = {path.steps()};
    for (auto _ : st) {
        auto sol = solve_R(merton_strategy(kBS, 0.5), kBS, [](double x) { return std::pow(x, -1.5); }, path, g, o);
        benchmark::DoNotOptimize(sol.Y.data());
    }
}

// Monte Carlo ensemble: wealth paths plus sup statistics
void BM_admissibility(benchmark::State& st) {
    EnsembleSpec ens;
    ens.paths = static_cast<std::size_t>(st.range(1));
    ens.dt = 1e-2;
    ens.exec = exec_of(st);
    for (auto _ : st) benchmark::DoNotOptimize(check_admissibility(merton_strategy(kBS, 0.5), kBS, 0.5, ens));
}

void BM_deviation_test(benchmark::State& st) {
    const BSClosedForm cf = bs_closed_form(BlackScholes2{}, 0.5, 0.5, 1.0, 1.0);
    const DeviationFamily fam = DeviationFamily::standard(kBS, 0.5);
    VerifySpec v;
    v.dt = 1e-2;
    v.paths = static_cast<std::size_t>(st.range(1));
    v.exec = exec_of(st);
    for (auto _ : st) benchmark::DoNotOptimize(deviation_test(cf.contract(), fam, kBS, v));
}

}  // namespace

BENCHMARK(BM_step_Y)->ArgsProduct({{0, 1}, {512, 4096, 32768}});
BENCHMARK(BM_solve_R)->ArgsProduct({{0, 1}, {512}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_admissibility)->ArgsProduct({{0, 1}, {10000}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_deviation_test)->ArgsProduct({{0, 1}, {10000}})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
