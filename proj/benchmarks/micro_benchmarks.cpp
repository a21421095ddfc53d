#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "cdpmil/cdp_pipeline.hpp"
#include "cdpmil/distributions.hpp"
#include "cdpmil/dp_mixture.hpp"
#include "cdpmil/evaluation.hpp"
#include "cdpmil/special_math.hpp"

using namespace cdpmil;

namespace {

Eigen::MatrixXd random_matrix(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd out(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) out(i, j) = normal(rng);
  }
  return out;
}

Eigen::MatrixXd random_spd(int dim, std::uint64_t seed) {
  const Eigen::MatrixXd b = random_matrix(dim, dim, seed);
  return b * b.transpose() + Eigen::MatrixXd::Identity(dim, dim);
}

NIWParams unit_prior(int dim) {
  return NIWParams{Eigen::VectorXd::Zero(dim), dim + 2.0,
                   SpdMatrix::identity(dim)};
}

}  // namespace

void bm_digamma(benchmark::State& state) {
  double x = 0.1;
  for ([[maybe_unused]] auto _ : state) {
    benchmark::DoNotOptimize(digamma(x));
    x += 0.1;
    if (x > 50.0) x = 0.1;
  }
}
BENCHMARK(bm_digamma);

void bm_spd_factorization(benchmark::State& state) {
  const int dim = static_cast<int>(state.range(0));
  const Eigen::MatrixXd dense = random_spd(dim, 1);
  for ([[maybe_unused]] auto _ : state) {
    benchmark::DoNotOptimize(SpdMatrix::from_dense(dense));
  }
}
BENCHMARK(bm_spd_factorization)->Arg(2)->Arg(8)->Arg(32);

void bm_mvn_logpdf(benchmark::State& state) {
  const int dim = static_cast<int>(state.range(0));
  const GaussianParams g{Eigen::VectorXd::Zero(dim),
                         SpdMatrix::from_dense(random_spd(dim, 2))};
  const Eigen::VectorXd x = random_matrix(dim, 1, 3);
  for ([[maybe_unused]] auto _ : state) {
    benchmark::DoNotOptimize(mvn_logpdf(x, g));
  }
}
BENCHMARK(bm_mvn_logpdf)->Arg(2)->Arg(8);

void bm_encode(benchmark::State& state) {
  const int dim = static_cast<int>(state.range(0));
  const EncoderParams params = EncoderParams::random(dim, 2 * dim, 4);
  const Eigen::VectorXd x = random_matrix(dim, 1, 5);
  for ([[maybe_unused]] auto _ : state) {
    benchmark::DoNotOptimize(encode(x, params));
  }
}
BENCHMARK(bm_encode)->Arg(2)->Arg(8);

void bm_batch_averaged_params(benchmark::State& state) {
  const int dim = 8;
  const EncoderParams params = EncoderParams::random(dim, 2 * dim, 6);
  const Eigen::MatrixXd x = random_matrix(static_cast<int>(state.range(0)),
                                          dim, 7);
  for ([[maybe_unused]] auto _ : state) {
    benchmark::DoNotOptimize(batch_averaged_params(x, params));
  }
}
BENCHMARK(bm_batch_averaged_params)->Arg(16)->Arg(64);

void bm_fit_dp_small(benchmark::State& state) {
  const int n = 80, p = 4, T = 8;
  Eigen::MatrixXd x = random_matrix(n, p, 8);
  x.topRows(n / 2).col(0).array() += 6.0;
  std::vector<EncoderParams> encoders;
  for (int t = 0; t < T; ++t) {
    encoders.push_back(EncoderParams::random(p, 2 * p, 9 + t));
  }
  FitConfig cfg;
  cfg.max_iters = 5;
  cfg.rel_tol = 0.0;
  for ([[maybe_unused]] auto _ : state) {
    benchmark::DoNotOptimize(fit_dp(x, initial_responsibilities(n, T, 10),
                                    encoders, unit_prior(p), 1.0, cfg));
  }
}
BENCHMARK(bm_fit_dp_small)->Unit(benchmark::kMillisecond);

void bm_aggregate_bag(benchmark::State& state) {
  const int n = 48, p = 8;
  Bag bag;
  bag.bag_id = "bench";
  bag.features = random_matrix(n, p, 11);
  bag.features.topRows(n / 2).col(0).array() += 8.0;
  PipelineConfig cfg;
  cfg.patch_fit.max_iters = 40;
  for ([[maybe_unused]] auto _ : state) {
    benchmark::DoNotOptimize(aggregate_bag(bag, cfg));
  }
}
BENCHMARK(bm_aggregate_bag)->Unit(benchmark::kMillisecond);

void bm_auroc(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::mt19937_64 rng(13);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> scores(static_cast<std::size_t>(n));
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = i % 2;
    scores[static_cast<std::size_t>(i)] =
        normal(rng) + (i % 2 ? 1.0 : 0.0);
  }
  for ([[maybe_unused]] auto _ : state) {
    benchmark::DoNotOptimize(auroc(scores, labels));
  }
}
BENCHMARK(bm_auroc)->Arg(256)->Arg(4096);

BENCHMARK_MAIN();
