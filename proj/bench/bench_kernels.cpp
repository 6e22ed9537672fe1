// Serial reference vs OpenMP kernels. The argument is the worker count; 1 runs
// the serial path. Results are bit-identical across counts (see the unit tests),
// so only time differs.
#include "jdp/jointfit.hpp"
#include "jdp/parallel.hpp"
#include "jdp/random.hpp"
#include "jdp/simgen.hpp"
#include "jdp/tuner.hpp"

#include <benchmark/benchmark.h>
#include <spdlog/spdlog.h>

#include <random>

using namespace jdp;

namespace {

struct LikelihoodFixture {
    BSplineBasis basis;
    std::vector<joint::SubjectData> subjects;
    std::vector<Eigen::Vector2d> b;
    joint::Theta theta;

    LikelihoodFixture() : basis(0.0, 1.0, {}, 3)
    {
        auto cfg = simgen::scenario_preset(1);
        cfg.n = 2000;
        const auto cohort = simgen::generate_scenario(cfg, 1, simgen::GeneratorMode::closed_form);
        basis = joint::baseline_basis(cohort, 5, 3);
        const std::vector<std::size_t> columns{0, 1};
        for (std::size_t i = 0; i < cohort.size(); ++i)
            subjects.push_back(joint::make_subject_data(cohort.subject(i), cohort.measurements_of(i), basis, columns));

        theta.beta << -1.35, 0.3;
        theta.gamma = {0.5, 1.5};
        theta.alpha = 4.5;
        theta.D << 0.0729, 0.00432, 0.00432, 0.0064;
        theta.sigma = 0.25;
        theta.baseline.assign(basis.size(), -1.0);

        std::mt19937_64 rng(2);
        std::normal_distribution<double> z0(0.0, 0.27), z1(0.0, 0.08);
        for (std::size_t i = 0; i < subjects.size(); ++i) b.emplace_back(z0(rng), z1(rng));
    }
};

const LikelihoodFixture& likelihood_fixture()
{
    static const LikelihoodFixture f;
    return f;
}

void BM_TotalLogLikelihood(benchmark::State& state)
{
    const auto& f = likelihood_fixture();
    const int workers = static_cast<int>(state.range(0));
    for (auto _ : state) {
        const double ll = workers == 1 ? joint::total_log_likelihood_serial(f.theta, f.b, f.subjects)
                                       : joint::total_log_likelihood(f.theta, f.b, f.subjects, workers);
        benchmark::DoNotOptimize(ll);
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.subjects.size()));
}

void BM_EvaluateFold(benchmark::State& state)
{
    auto cfg = simgen::scenario_preset(1);
    cfg.n = 120;
    const auto cohort = simgen::generate_scenario(cfg, 3, simgen::GeneratorMode::closed_form);
    std::vector<std::string> train_ids, test_ids;
    for (std::size_t i = 0; i < cohort.size(); ++i)
        (i < 90 ? train_ids : test_ids).push_back(cohort.subject(i).subject_id);
    const auto train = cohort.subset(train_ids);
    const auto test = cohort.subset(test_ids);

    tuner::TuningConfig config;
    config.mp_grid = {0.5, 1.0};
    config.K = 2;
    config.W = 1;
    config.n_mc = 50;
    config.model.mcmc.n_chains = 2;
    config.model.mcmc.n_iterations = 300;
    config.model.mcmc.n_burnin = 100;
    config.workers = static_cast<int>(state.range(0));
    const auto factory = tuner::joint_model_factory(config);
    for (auto _ : state) benchmark::DoNotOptimize(tuner::evaluate_fold(train, test, config, factory));
}

void worker_counts(benchmark::internal::Benchmark* b)
{
    // 2 and 4 always run so the comparison exists; on fewer cores they oversubscribe
    for (int w : {1, 2, 4}) b->Arg(w);
    if (hardware_workers() > 4) b->Arg(hardware_workers());
}

} // namespace

BENCHMARK(BM_TotalLogLikelihood)->Apply(worker_counts)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_EvaluateFold)->Apply(worker_counts)->Unit(benchmark::kSecond)->Iterations(1);

int main(int argc, char** argv)
{
    spdlog::set_level(spdlog::level::warn);
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
