#include <cmath>
#include <random>

#include "cdpmil/distributions.hpp"
#include "cdpmil/errors.hpp"
#include "doctest.h"
#include "test_helpers.hpp"

using namespace cdpmil;
namespace th = test_helpers;

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;

GaussianParams make_gaussian(const Eigen::VectorXd &mean,
                             const Eigen::MatrixXd &cov) {
  return GaussianParams{mean, SpdMatrix::from_dense(cov)};
}

double beta_logpdf(double x, const BetaParams &p) {
  const double log_norm =
      std::lgamma(p.a + p.b) - std::lgamma(p.a) - std::lgamma(p.b);
  return log_norm + (p.a - 1.0) * std::log(x) +
         (p.b - 1.0) * std::log1p(-x);
}

double sample_gamma(double shape, std::mt19937_64 &rng) {
  std::gamma_distribution<double> g(shape, 1.0);
  return g(rng);
}

// Bartlett draw from Wishart(kappa, v).
Eigen::MatrixXd sample_wishart(double kappa, const SpdMatrix &v,
                               std::mt19937_64 &rng) {
  const int p = v.dim();
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
  for (int i = 0; i < p; ++i) {
    std::chi_squared_distribution<double> chi(kappa - i);
    a(i, i) = std::sqrt(chi(rng));
    for (int j = 0; j < i; ++j) a(i, j) = normal(rng);
  }
  const Eigen::MatrixXd la = v.factor() * a;
  return la * la.transpose();
}

}  // namespace

TEST_CASE("gaussian density matches reference values") {
  // 1-D closed form
  const GaussianParams one =
      make_gaussian(Eigen::VectorXd::Constant(1, 0.7),
                    Eigen::MatrixXd::Constant(1, 1, 2.25));
  const double x = -0.4;
  const double expected =
      -0.5 * (kLogTwoPi + std::log(2.25) + (x - 0.7) * (x - 0.7) / 2.25);
  CHECK(mvn_logpdf(Eigen::VectorXd::Constant(1, x), one) ==
        doctest::Approx(expected).epsilon(1e-14));

  // Frozen 3-D reference
  Eigen::VectorXd point(3), mean(3);
  point << 0.3, -1.2, 2.0;
  mean << 0.5, 0.0, 1.0;
  Eigen::MatrixXd cov(3, 3);
  cov << 2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.1;
  CHECK(mvn_logpdf(point, make_gaussian(mean, cov)) ==
        doctest::Approx(-4.1315027268206759).epsilon(1e-13));
}

TEST_CASE("gaussian density integrates to one in 1-D") {
  const GaussianParams g =
      make_gaussian(Eigen::VectorXd::Constant(1, -1.3),
                    Eigen::MatrixXd::Constant(1, 1, 0.49));
  const double lo = -1.3 - 8.0 * 0.7;
  const double hi = -1.3 + 8.0 * 0.7;
  const int n = 20000;
  const double h = (hi - lo) / n;
  double sum = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double xi = lo + h * i;
    const double w = (i == 0 || i == n) ? 0.5 : 1.0;
    sum += w * std::exp(mvn_logpdf(Eigen::VectorXd::Constant(1, xi), g));
  }
  CHECK(sum * h == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("gaussian density rejects dimension mismatch") {
  const GaussianParams g = make_gaussian(Eigen::VectorXd::Zero(2),
                                         Eigen::MatrixXd::Identity(2, 2));
  CHECK_THROWS_AS((void)mvn_logpdf(Eigen::VectorXd::Zero(3), g), ShapeError);
}

TEST_CASE("wishart density matches reference values") {
  Eigen::MatrixXd lam2(2, 2), v2(2, 2);
  lam2 << 1.4, 0.2, 0.2, 2.2;
  v2 << 1.0, 0.1, 0.1, 0.8;
  CHECK(wishart_logpdf(SpdMatrix::from_dense(lam2), 4.5,
                       SpdMatrix::from_dense(v2)) ==
        doctest::Approx(-4.4436788294189675).epsilon(1e-13));

  Eigen::MatrixXd lam3(3, 3), v3(3, 3);
  lam3 << 2.0, 0.4, 0.0, 0.4, 1.8, -0.3, 0.0, -0.3, 2.5;
  v3 << 1.2, 0.0, 0.2, 0.0, 0.9, 0.1, 0.2, 0.1, 1.4;
  CHECK(wishart_logpdf(SpdMatrix::from_dense(lam3), 6.0,
                       SpdMatrix::from_dense(v3)) ==
        doctest::Approx(-10.760364573482819).epsilon(1e-13));
}

TEST_CASE("1-D wishart collapses to a gamma density") {
  // Wishart_1(lambda; kappa, v) = Gamma(lambda; shape kappa/2, scale 2v)
  const double kappa = 3.7;
  const double v = 0.6;
  const SpdMatrix vm =
      SpdMatrix::from_dense(Eigen::MatrixXd::Constant(1, 1, v));
  for (double lam : {0.2, 1.0, 4.5}) {
    const double shape = kappa / 2.0;
    const double scale = 2.0 * v;
    const double gamma_ref = (shape - 1.0) * std::log(lam) - lam / scale -
                             std::lgamma(shape) - shape * std::log(scale);
    const SpdMatrix lm =
        SpdMatrix::from_dense(Eigen::MatrixXd::Constant(1, 1, lam));
    CHECK(wishart_logpdf(lm, kappa, vm) ==
          doctest::Approx(gamma_ref).epsilon(1e-13));
  }
}

TEST_CASE("wishart density requires enough degrees of freedom") {
  const SpdMatrix eye = SpdMatrix::identity(3);
  CHECK_THROWS_AS((void)wishart_logpdf(eye, 1.5, eye), DomainError);
}

TEST_CASE("normal-inverse-wishart density matches reference value") {
  Eigen::VectorXd mu(2), m(2);
  mu << 0.4, -0.6;
  m << 0.0, 0.1;
  Eigen::MatrixXd sigma(2, 2), v(2, 2);
  sigma << 1.3, -0.2, -0.2, 0.9;
  v << 1.0, 0.1, 0.1, 0.8;
  const NIWParams prior{m, 5.0, SpdMatrix::from_dense(v)};
  CHECK(niw_logpdf(mu, SpdMatrix::from_dense(sigma), prior) ==
        doctest::Approx(-6.7343271641837461).epsilon(1e-13));
}

TEST_CASE("gaussian entropy matches reference values") {
  // 1-D: 0.5 (1 + ln 2 pi sigma^2)
  const double var = 0.81;
  CHECK(gaussian_entropy(
            SpdMatrix::from_dense(Eigen::MatrixXd::Constant(1, 1, var))) ==
        doctest::Approx(0.5 * (1.0 + kLogTwoPi + std::log(var)))
            .epsilon(1e-14));

  Eigen::MatrixXd sigma(2, 2);
  sigma << 1.3, -0.2, -0.2, 0.9;
  CHECK(gaussian_entropy(SpdMatrix::from_dense(sigma)) ==
        doctest::Approx(2.8989858827714698).epsilon(1e-13));
}

TEST_CASE("beta KL matches reference and Monte Carlo") {
  const BetaParams q{2.5, 1.5};
  const BetaParams p{1.0, 3.0};
  const double closed = kl_beta(q, p);
  CHECK(closed == doctest::Approx(1.5292465477222712).epsilon(1e-13));
  CHECK(kl_beta(q, q) == doctest::Approx(0.0));

  std::mt19937_64 rng(101);
  const int n = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double ga = sample_gamma(q.a, rng);
    const double gb = sample_gamma(q.b, rng);
    const double x = ga / (ga + gb);
    const double diff = beta_logpdf(x, q) - beta_logpdf(x, p);
    sum += diff;
    sq += diff * diff;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / n);
  CHECK(std::abs(mean - closed) < 4.0 * se + 1e-6);
}

TEST_CASE("beta KL rejects non-positive parameters") {
  CHECK_THROWS_AS((void)kl_beta({0.0, 1.0}, {1.0, 1.0}), DomainError);
  CHECK_THROWS_AS((void)kl_beta({1.0, 1.0}, {1.0, -2.0}), DomainError);
}

TEST_CASE("gaussian KL matches Monte Carlo") {
  std::mt19937_64 rng(211);
  const Eigen::MatrixXd cq = th::random_spd(3, rng);
  const Eigen::MatrixXd cp = th::random_spd(3, rng);
  const GaussianParams q = make_gaussian(th::random_vector(3, rng), cq);
  const GaussianParams p = make_gaussian(th::random_vector(3, rng), cp);
  const double closed = kl_gaussian(q, p);
  CHECK(closed >= 0.0);
  CHECK(kl_gaussian(q, q) == doctest::Approx(0.0));

  std::normal_distribution<double> normal(0.0, 1.0);
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd z(3);
    for (int d = 0; d < 3; ++d) z(d) = normal(rng);
    const Eigen::VectorXd x = q.mean + q.cov.factor() * z;
    const double diff = mvn_logpdf(x, q) - mvn_logpdf(x, p);
    sum += diff;
    sq += diff * diff;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / n);
  CHECK(std::abs(mean - closed) < 4.0 * se + 1e-6);
}

TEST_CASE("wishart KL matches Monte Carlo") {
  std::mt19937_64 rng(307);
  const SpdMatrix vq = SpdMatrix::from_dense(th::random_spd(2, rng));
  const SpdMatrix vp = SpdMatrix::from_dense(th::random_spd(2, rng));
  const double kq = 6.0;
  const double kp = 4.5;
  const double closed = kl_wishart(kq, vq, kp, vp);
  CHECK(closed >= 0.0);
  CHECK(kl_wishart(kq, vq, kq, vq) == doctest::Approx(0.0));

  const int n = 50000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const SpdMatrix lam = SpdMatrix::from_dense(sample_wishart(kq, vq, rng));
    const double diff =
        wishart_logpdf(lam, kq, vq) - wishart_logpdf(lam, kp, vp);
    sum += diff;
    sq += diff * diff;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / n);
  CHECK(std::abs(mean - closed) < 4.0 * se + 1e-5);
}

TEST_CASE("wishart KL rejects mismatched dimensions") {
  CHECK_THROWS_AS(
      (void)kl_wishart(5.0, SpdMatrix::identity(2), 5.0,
                       SpdMatrix::identity(3)),
      ShapeError);
}

TEST_CASE("categorical KL handles zeros and hand values") {
  Eigen::VectorXd q(3), p(3);
  q << 0.5, 0.5, 0.0;
  p << 0.25, 0.25, 0.5;
  // 0.5 ln 2 + 0.5 ln 2 + 0 = ln 2
  CHECK(kl_categorical(q, p) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(kl_categorical(p, p) == doctest::Approx(0.0));

  Eigen::VectorXd bad_support(3);
  bad_support << 0.5, 0.0, 0.5;
  Eigen::VectorXd no_third(3);
  no_third << 0.5, 0.5, 0.0;
  CHECK_THROWS_AS((void)kl_categorical(bad_support, no_third), DomainError);

  Eigen::VectorXd not_normalized(2);
  not_normalized << 0.5, 0.6;
  Eigen::VectorXd half(2);
  half << 0.5, 0.5;
  CHECK_THROWS_AS((void)kl_categorical(not_normalized, half), DomainError);
  CHECK_THROWS_AS((void)kl_categorical(half, Eigen::VectorXd::Zero(3)),
                  ShapeError);
}

TEST_CASE("smoothed one-hot targets stay on the simplex") {
  const Eigen::VectorXd t = smoothed_onehot(4, 2, 0.1);
  CHECK(t.size() == 4);
  CHECK(t.sum() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(t(2) == doctest::Approx(0.925).epsilon(1e-15));
  CHECK(t(0) == doctest::Approx(0.025).epsilon(1e-15));
  CHECK(t(2) > t(0));

  CHECK_THROWS_AS((void)smoothed_onehot(3, 5), DomainError);
  CHECK_THROWS_AS((void)smoothed_onehot(3, -1), DomainError);
}
