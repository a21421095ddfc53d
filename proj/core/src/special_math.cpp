#include "cdpmil/special_math.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace cdpmil {

namespace {

void throw_if(bool condition, const std::string &message) {
  if (condition) {
    throw ShapeError(message);
  }
}

}  // namespace

double digamma(double x) {
  if (!(x > 0.0)) {
    throw DomainError("digamma: argument must be positive, got " +
                      std::to_string(x));
  }
  // Shift the argument above 6 where the asymptotic series converges fast,
  // using Psi(x) = Psi(x + 1) - 1/x.
  double result = 0.0;
  while (x < 6.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  // Psi(x) ~ ln x - 1/(2x) - sum_k B_{2k} / (2k x^{2k}), seven series terms.
  const double u = 1.0 / (x * x);
  double series = 691.0 / 32760.0 - u / 12.0;
  series = 1.0 / 132.0 - u * series;
  series = 1.0 / 240.0 - u * series;
  series = 1.0 / 252.0 - u * series;
  series = 1.0 / 120.0 - u * series;
  series = 1.0 / 12.0 - u * series;
  return result + std::log(x) - 0.5 / x - u * series;
}

double multivariate_digamma(int p, double a) {
  throw_if(p < 1, "multivariate_digamma: p must be >= 1");
  double sum = 0.0;
  for (int j = 1; j <= p; ++j) {
    sum += digamma(a + 0.5 * (1.0 - j));
  }
  return sum;
}

double log_multivariate_gamma(int p, double a) {
  throw_if(p < 1, "log_multivariate_gamma: p must be >= 1");
  if (!(a > 0.5 * (p - 1))) {
    throw DomainError("log_multivariate_gamma: need a > (p-1)/2, got a = " +
                      std::to_string(a) + " with p = " + std::to_string(p));
  }
  double sum = 0.25 * p * (p - 1) * std::log(M_PI);
  for (int j = 1; j <= p; ++j) {
    sum += std::lgamma(a + 0.5 * (1.0 - j));
  }
  return sum;
}

SpdMatrix SpdMatrix::from_dense(const Eigen::MatrixXd &a, double sym_tol) {
  throw_if(a.rows() != a.cols(), "SpdMatrix: matrix must be square, got " +
                                     std::to_string(a.rows()) + "x" +
                                     std::to_string(a.cols()));
  throw_if(a.rows() == 0, "SpdMatrix: matrix must be non-empty");
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
  if (!(asym <= sym_tol * scale)) {
    throw ShapeError("SpdMatrix: matrix is not symmetric (max deviation " +
                     std::to_string(asym) + ")");
  }
  const Eigen::MatrixXd s = 0.5 * (a + a.transpose());
  const int n = static_cast<int>(s.rows());
  Eigen::MatrixXd lower = Eigen::MatrixXd::Zero(n, n);
  for (int j = 0; j < n; ++j) {
    double d = s(j, j) - lower.row(j).head(j).squaredNorm();
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw DecompositionError(
          "SpdMatrix: matrix is not positive definite (pivot " +
              std::to_string(j) + " = " + std::to_string(d) + ")",
          j);
    }
    lower(j, j) = std::sqrt(d);
    for (int i = j + 1; i < n; ++i) {
      lower(i, j) =
          (s(i, j) - lower.row(i).head(j).dot(lower.row(j).head(j))) /
          lower(j, j);
    }
  }
  return SpdMatrix(std::move(lower));
}

SpdMatrix SpdMatrix::from_cholesky(const Eigen::MatrixXd &lower) {
  throw_if(lower.rows() != lower.cols() || lower.rows() == 0,
           "SpdMatrix: factor must be square and non-empty");
  const int n = static_cast<int>(lower.rows());
  for (int j = 0; j < n; ++j) {
    if (!(lower(j, j) > 0.0) || !std::isfinite(lower(j, j))) {
      throw DomainError("SpdMatrix: factor diagonal must be positive at " +
                        std::to_string(j));
    }
    for (int i = 0; i < j; ++i) {
      if (lower(i, j) != 0.0) {
        throw ShapeError("SpdMatrix: factor must be lower triangular");
      }
    }
  }
  return SpdMatrix(lower);
}

SpdMatrix SpdMatrix::identity(int dim, double scale) {
  throw_if(dim < 1, "SpdMatrix: dimension must be >= 1");
  if (!(scale > 0.0)) {
    throw DomainError("SpdMatrix: identity scale must be positive");
  }
  Eigen::MatrixXd lower =
      std::sqrt(scale) * Eigen::MatrixXd::Identity(dim, dim);
  return SpdMatrix(std::move(lower));
}

double SpdMatrix::log_det() const {
  return 2.0 * lower_.diagonal().array().log().sum();
}

Eigen::VectorXd SpdMatrix::solve(const Eigen::VectorXd &b) const {
  throw_if(b.size() != lower_.rows(),
           "SpdMatrix::solve: size mismatch, matrix dim " +
               std::to_string(lower_.rows()) + " vs vector " +
               std::to_string(b.size()));
  Eigen::VectorXd y = lower_.triangularView<Eigen::Lower>().solve(b);
  return lower_.transpose().triangularView<Eigen::Upper>().solve(y);
}

Eigen::MatrixXd SpdMatrix::forward_solve(const Eigen::MatrixXd &b) const {
  throw_if(b.rows() != lower_.rows(),
           "SpdMatrix::forward_solve: row count mismatch");
  return lower_.triangularView<Eigen::Lower>().solve(b);
}

Eigen::MatrixXd SpdMatrix::reconstruct() const {
  return lower_ * lower_.transpose();
}

SpdMatrix SpdMatrix::scaled(double s) const {
  if (!(s > 0.0)) {
    throw DomainError("SpdMatrix::scaled: scale must be positive");
  }
  return SpdMatrix(std::sqrt(s) * lower_);
}

Eigen::MatrixXd SpdMatrix::inverse() const {
  const int n = dim();
  Eigen::MatrixXd linv = lower_.triangularView<Eigen::Lower>().solve(
      Eigen::MatrixXd::Identity(n, n));
  return linv.transpose() * linv;
}

double log_det(const Eigen::MatrixXd &a) {
  return SpdMatrix::from_dense(a).log_det();
}

Eigen::VectorXd spd_solve(const Eigen::MatrixXd &a, const Eigen::VectorXd &b) {
  return SpdMatrix::from_dense(a).solve(b);
}

double trace_spd_inverse_product(const SpdMatrix &v, const SpdMatrix &m) {
  throw_if(v.dim() != m.dim(),
           "trace_spd_inverse_product: dimension mismatch");
  return v.forward_solve(m.factor()).squaredNorm();
}

double log_sum_exp(const Eigen::VectorXd &x) {
  throw_if(x.size() == 0, "log_sum_exp: empty input");
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) {
    // All -inf stays -inf; +inf or NaN propagates.
    return m;
  }
  return m + std::log((x.array() - m).exp().sum());
}

}  // namespace cdpmil
