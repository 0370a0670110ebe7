#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "error.hpp"

namespace covadj {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Pairwise summation with a fixed split order, so the result does not depend
/// on how callers parallelize the work that produced the terms.
inline double pairwise_sum(std::span<const double> x) {
  if (x.size() <= 8) {
    double s = 0.0;
    for (double v : x) s += v;
    return s;
  }
  const std::size_t half = x.size() / 2;
  return pairwise_sum(x.first(half)) + pairwise_sum(x.subspan(half));
}

inline double pairwise_sum(const Vector& x) { return pairwise_sum(std::span<const double>(x.data(), x.size())); }

inline double mean(std::span<const double> x) {
  return x.empty() ? 0.0 : pairwise_sum(x) / static_cast<double>(x.size());
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_quantile(double p) {
  require(p > 0.0 && p < 1.0, ErrorCode::DomainError, "normal quantile needs p in (0,1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

inline double two_sided_p(double z) { return std::erfc(std::abs(z) / std::numbers::sqrt2); }

/// Sample covariance (denominator m - 1) of two equally long sequences.
inline double sample_cov(std::span<const double> x, std::span<const double> y) {
  const std::size_t m = x.size();
  if (m < 2) return 0.0;
  const double mx = mean(x);
  const double my = mean(y);
  std::vector<double> prod(m);
  for (std::size_t i = 0; i < m; ++i) prod[i] = (x[i] - mx) * (y[i] - my);
  return pairwise_sum(prod) / static_cast<double>(m - 1);
}

struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

namespace detail {
// Golub-Welsch: nodes are eigenvalues of the Jacobi matrix, weights come from
// the first eigenvector components.
inline QuadratureRule golub_welsch(const Vector& diag, const Vector& offdiag, double mu0) {
  const auto m = diag.size();
  Matrix jacobi = Matrix::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    jacobi(i, i) = diag(i);
    if (i + 1 < m) jacobi(i, i + 1) = jacobi(i + 1, i) = offdiag(i);
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(jacobi);
  QuadratureRule rule;
  for (Eigen::Index i = 0; i < m; ++i) {
    rule.nodes.push_back(eig.eigenvalues()(i));
    const double v = eig.eigenvectors()(0, i);
    rule.weights.push_back(mu0 * v * v);
  }
  return rule;
}
}  // namespace detail

/// Gauss-Hermite rule for E[f(Z)], Z ~ N(0,1) (probabilists' weight).
inline QuadratureRule gauss_hermite_normal(int points) {
  Vector diag = Vector::Zero(points);
  Vector off(points > 1 ? points - 1 : 0);
  for (int i = 0; i + 1 < points; ++i) off(i) = std::sqrt(static_cast<double>(i + 1));
  return detail::golub_welsch(diag, off, 1.0);
}

/// Gauss-Legendre rule for E[f(U)], U ~ Uniform(0,1).
inline QuadratureRule gauss_legendre_unit(int points) {
  Vector diag = Vector::Zero(points);
  Vector off(points > 1 ? points - 1 : 0);
  for (int i = 0; i + 1 < points; ++i) {
    const double k = i + 1.0;
    off(i) = k / std::sqrt(4.0 * k * k - 1.0);
  }
  auto rule = detail::golub_welsch(diag, off, 2.0);
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    rule.nodes[i] = 0.5 * (rule.nodes[i] + 1.0);
    rule.weights[i] *= 0.5;
  }
  return rule;
}

}  // namespace covadj
