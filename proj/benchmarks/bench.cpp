#include <benchmark/benchmark.h>

#include <cmath>

#include "batchreuse/dmft.hpp"
#include "batchreuse/gdsim.hpp"
#include "batchreuse/hardness.hpp"
#include "batchreuse/hermite.hpp"
#include "batchreuse/targets.hpp"

using namespace batchreuse;

static void BM_HermiteEval(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  double x = 0.3;
  for (auto _ : state) {
    benchmark::DoNotOptimize(hermite::hermite_eval(n, x));
    x += 1e-9;
  }
}
BENCHMARK(BM_HermiteEval)->Arg(3)->Arg(10)->Arg(20);

static void BM_GaussHermiteRule(benchmark::State& state) {
  for (auto _ : state) {
    auto rule = hermite::QuadratureRule::gauss_hermite(static_cast<int>(state.range(0)));
    benchmark::DoNotOptimize(rule.weights().data());
  }
}
BENCHMARK(BM_GaussHermiteRule)->Arg(20)->Arg(80)->Arg(200);

static void BM_MomentFunctional(benchmark::State& state) {
  auto t = targets::parse_target("staircase:3");
  auto dir = hardness::Direction::from_coefficients({1, 1, 1});
  for (auto _ : state) benchmark::DoNotOptimize(hardness::moment_functionals(t, dir, 5));
}
BENCHMARK(BM_MomentFunctional);

static void BM_BatchGradient(benchmark::State& state) {
  gdsim::TrainConfig cfg;
  cfg.d = static_cast<int>(state.range(0));
  cfg.p = 2;
  cfg.threads = 1;
  auto target = targets::parse_target("single:he3");
  auto teacher = targets::make_teacher(cfg.d, 1, 1);
  auto data = gdsim::generate_dataset(cfg, teacher, target, 2);
  auto s = gdsim::init_student(cfg, 3);
  gdsim::Batch all;
  all.data = &data;
  all.count = data.size();
  for (auto _ : state) benchmark::DoNotOptimize(gdsim::batch_gradient(s, all, nullptr));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(data.size()));
}
BENCHMARK(BM_BatchGradient)->Arg(500)->Arg(2000)->Unit(benchmark::kMillisecond);

static void BM_DmftIntegrate(benchmark::State& state) {
  dmft::DmftConfig cfg;
  cfg.T = static_cast<int>(state.range(0));
  cfg.n_samples = 20000;
  auto target = targets::parse_target("single:he3");
  Readout r;
  r.a = make_second_layer(2, SecondLayer::PlusMinus, 0);
  r.sigma = ScalarFunction::tanh();
  r.residual = Residual::Network;
  for (auto _ : state) benchmark::DoNotOptimize(dmft::dmft_integrate(cfg, target, r));
}
BENCHMARK(BM_DmftIntegrate)->Arg(2)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
