#pragma once

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "error.hpp"
#include "numeric.hpp"
#include "trial_data.hpp"

namespace covadj::glm {

enum class FamilyKind { Gaussian, Binomial, Poisson, NegBin };

/// Response distribution and link. Gaussian/identity, binomial/logit and
/// Poisson/log are canonical; negative binomial/log is not.
struct Family {
  FamilyKind kind = FamilyKind::Gaussian;
  std::optional<double> fixed_dispersion;  // negbin size parameter; estimated when empty

  static Family gaussian() { return {FamilyKind::Gaussian, std::nullopt}; }
  static Family binomial() { return {FamilyKind::Binomial, std::nullopt}; }
  static Family poisson() { return {FamilyKind::Poisson, std::nullopt}; }
  static Family negbin(std::optional<double> size = std::nullopt) { return {FamilyKind::NegBin, size}; }

  bool canonical() const { return kind != FamilyKind::NegBin; }

  std::string name() const {
    switch (kind) {
      case FamilyKind::Gaussian: return "gaussian";
      case FamilyKind::Binomial: return "binomial";
      case FamilyKind::Poisson: return "poisson";
      case FamilyKind::NegBin: return "negbin";
    }
    return "?";
  }

  static Family parse(const std::string& s) {
    if (s == "gaussian") return gaussian();
    if (s == "binomial") return binomial();
    if (s == "poisson") return poisson();
    if (s == "negbin") return negbin();
    fail(ErrorCode::InvalidArgument, "unknown family '" + s + "'");
  }
};

struct FitResult {
  Family family;
  Vector coefficients;
  Vector fitted;
  bool converged = false;
  int iterations = 0;
  double deviance = 0.0;
  double dispersion = 0.0;  // negbin size parameter (variance mu + mu^2 / size)
  double max_score = 0.0;
};

struct FitOptions {
  double tol = 1e-8;  // on the max absolute score component
  int max_iter = 50;
};

namespace detail {

inline double inverse_link(FamilyKind kind, double eta) {
  switch (kind) {
    case FamilyKind::Gaussian: return eta;
    case FamilyKind::Binomial: {
      const double e = std::clamp(eta, -40.0, 40.0);
      return 1.0 / (1.0 + std::exp(-e));
    }
    case FamilyKind::Poisson:
    case FamilyKind::NegBin: return std::exp(std::min(eta, 700.0));
  }
  return eta;
}

inline double link(FamilyKind kind, double mu) {
  switch (kind) {
    case FamilyKind::Gaussian: return mu;
    case FamilyKind::Binomial: return std::log(mu / (1.0 - mu));
    default: return std::log(mu);
  }
}

// d mu / d eta
inline double mu_eta(FamilyKind kind, double mu) {
  switch (kind) {
    case FamilyKind::Gaussian: return 1.0;
    case FamilyKind::Binomial: return std::max(mu * (1.0 - mu), 1e-300);
    default: return std::max(mu, 1e-300);
  }
}

inline double variance(FamilyKind kind, double mu, double size) {
  switch (kind) {
    case FamilyKind::Gaussian: return 1.0;
    case FamilyKind::Binomial: return std::max(mu * (1.0 - mu), 1e-300);
    case FamilyKind::Poisson: return std::max(mu, 1e-300);
    case FamilyKind::NegBin: return std::max(mu + mu * mu / size, 1e-300);
  }
  return 1.0;
}

inline double xlogy(double x, double y) { return x == 0.0 ? 0.0 : x * std::log(y); }

inline double deviance(FamilyKind kind, const Vector& y, const Vector& mu, double size) {
  double dev = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double yi = y(i), mi = mu(i);
    switch (kind) {
      case FamilyKind::Gaussian: dev += (yi - mi) * (yi - mi); break;
      case FamilyKind::Binomial:
        dev += 2.0 * (xlogy(yi, yi / mi) + xlogy(1.0 - yi, (1.0 - yi) / (1.0 - mi)));
        break;
      case FamilyKind::Poisson: dev += 2.0 * (xlogy(yi, yi / mi) - (yi - mi)); break;
      case FamilyKind::NegBin:
        dev += 2.0 * (xlogy(yi, yi / mi) - (yi + size) * std::log((yi + size) / (mi + size)));
        break;
    }
  }
  return dev;
}

inline Vector mean_from_eta(FamilyKind kind, const Vector& eta) {
  return eta.unaryExpr([kind](double e) { return inverse_link(kind, e); });
}

inline Vector score(FamilyKind kind, const Matrix& x, const Vector& y, const Vector& mu, double size) {
  Vector r(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i)
    r(i) = (y(i) - mu(i)) * mu_eta(kind, mu(i)) / variance(kind, mu(i), size);
  return x.transpose() * r;
}

inline void check_rank(const Matrix& x) {
  Eigen::ColPivHouseholderQR<Matrix> qr(x);
  qr.setThreshold(1e-10);
  require(qr.rank() == x.cols(), ErrorCode::RankDeficient,
          "design has rank " + std::to_string(qr.rank()) + " < " + std::to_string(x.cols()) + " columns");
}

inline Vector weighted_ls(const Matrix& x, const Vector& z, const Vector& w) {
  const Vector sw = w.cwiseSqrt();
  Matrix xw = x.array().colwise() * sw.array();
  Vector zw = z.cwiseProduct(sw);
  Eigen::ColPivHouseholderQR<Matrix> qr(xw);
  qr.setThreshold(1e-12);
  require(qr.rank() == x.cols(), ErrorCode::RankDeficient, "weighted design lost rank during IRLS");
  return qr.solve(zw);
}

struct IrlsState {
  Vector beta;
  Vector mu;
  double deviance = 0.0;
  double max_score = 0.0;
  double last_step = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Fisher scoring for the mean model with the dispersion held at `size`.
inline IrlsState irls(FamilyKind kind, const Matrix& x, const Vector& y, double size, const FitOptions& opt,
                      const std::optional<Vector>& start) {
  IrlsState st;
  const auto n = y.size();
  Vector mu(n);
  Vector eta(n);
  if (start) {
    st.beta = *start;
    eta = x * st.beta;
    mu = mean_from_eta(kind, eta);
  } else {
    for (Eigen::Index i = 0; i < n; ++i)
      mu(i) = kind == FamilyKind::Binomial ? (y(i) + 0.5) / 2.0 : y(i) + 0.1;
    eta = mu.unaryExpr([kind](double m) { return link(kind, m); });
    st.beta = Vector::Zero(x.cols());
  }
  bool have_beta = start.has_value();
  double dev = have_beta ? deviance(kind, y, mu, size) : std::numeric_limits<double>::infinity();
  int polish = 0;

  for (int it = 0; it < opt.max_iter; ++it) {
    Vector w(n), z(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = mu_eta(kind, mu(i));
      w(i) = d * d / variance(kind, mu(i), size);
      z(i) = eta(i) + (y(i) - mu(i)) / d;
    }
    Vector beta_new = weighted_ls(x, z, w);
    Vector eta_new = x * beta_new;
    Vector mu_new = mean_from_eta(kind, eta_new);
    double dev_new = deviance(kind, y, mu_new, size);
    // Step halving when the deviance goes up or blows up.
    for (int half = 0; have_beta && (!std::isfinite(dev_new) || dev_new > dev + 1e-12 * (1.0 + std::abs(dev))) && half < 30;
         ++half) {
      beta_new = 0.5 * (beta_new + st.beta);
      eta_new = x * beta_new;
      mu_new = mean_from_eta(kind, eta_new);
      dev_new = deviance(kind, y, mu_new, size);
    }
    st.last_step = have_beta ? (beta_new - st.beta).norm() : beta_new.norm();
    st.beta = beta_new;
    eta = eta_new;
    mu = mu_new;
    dev = dev_new;
    have_beta = true;
    st.iterations = it + 1;
    st.max_score = score(kind, x, y, mu, size).cwiseAbs().maxCoeff();
    if (st.max_score < opt.tol) {
      st.converged = true;
      // A couple of extra Newton steps drive the score to rounding level;
      // the G-computation identity relies on it.
      if (++polish > 2) break;
    } else if (st.converged) {
      break;
    }
  }
  st.mu = mu;
  st.deviance = dev;
  return st;
}

// Negative binomial log-likelihood in the size parameter for fixed means.
inline double nb_loglik_size(const Vector& y, const Vector& mu, double size) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    ll += std::lgamma(y(i) + size) - std::lgamma(size) - std::lgamma(y(i) + 1.0) + size * std::log(size) +
          xlogy(y(i), mu(i)) - (y(i) + size) * std::log(size + mu(i));
  }
  return ll;
}

// Newton ascent on log(size) for fixed means, with step halving.
inline double nb_update_size(const Vector& y, const Vector& mu, double size) {
  constexpr double lo = 1e-8, hi = 1e10;
  double phi = std::log(size);
  for (int it = 0; it < 100; ++it) {
    const double th = std::exp(phi);
    double g = 0.0, h = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double yi = y(i), mi = mu(i);
      g += boost::math::digamma(yi + th) - boost::math::digamma(th) + std::log(th) + 1.0 - std::log(th + mi) -
           (yi + th) / (th + mi);
      h += boost::math::trigamma(yi + th) - boost::math::trigamma(th) + 1.0 / th - 2.0 / (th + mi) +
           (yi + th) / ((th + mi) * (th + mi));
    }
    const double g_phi = th * g;
    const double h_phi = th * th * h + th * g;
    double step = h_phi < 0.0 ? -g_phi / h_phi : (g_phi > 0.0 ? 1.0 : -1.0);
    step = std::clamp(step, -5.0, 5.0);
    const double base = nb_loglik_size(y, mu, th);
    double next = std::clamp(phi + step, std::log(lo), std::log(hi));
    for (int half = 0; half < 40 && nb_loglik_size(y, mu, std::exp(next)) < base - 1e-12 * std::abs(base); ++half) {
      step *= 0.5;
      next = std::clamp(phi + step, std::log(lo), std::log(hi));
    }
    const double moved = std::abs(next - phi);
    phi = next;
    if (moved < 1e-10 || std::abs(g_phi) < 1e-10) break;
  }
  return std::clamp(std::exp(phi), lo, hi);
}

inline void check_support(FamilyKind kind, const Vector& y) {
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double v = y(i);
    require(std::isfinite(v), ErrorCode::ValidationError, "non-finite response");
    if (kind == FamilyKind::Binomial)
      require(v == 0.0 || v == 1.0, ErrorCode::ValidationError, "binomial response must be 0/1");
    if (kind == FamilyKind::Poisson || kind == FamilyKind::NegBin)
      require(v >= 0.0 && v == std::floor(v), ErrorCode::ValidationError, "count response must be a non-negative integer");
  }
}

}  // namespace detail

/// Fits a working model. Gaussian is solved directly by pivoted QR; the other
/// families run IRLS until the max absolute score component drops below
/// `tol`. Non-convergence is reported through `converged`, not thrown.
inline FitResult fit(const Matrix& x, const Vector& y, const Family& family, const FitOptions& opt = {}) {
  require(x.rows() == y.size(), ErrorCode::DimensionMismatch, "design rows do not match response length");
  require(x.rows() >= 1 && x.cols() >= 1, ErrorCode::DimensionMismatch, "empty design");
  detail::check_support(family.kind, y);
  detail::check_rank(x);

  FitResult out;
  out.family = family;
  const auto kind = family.kind;

  if (kind == FamilyKind::Gaussian) {
    Eigen::ColPivHouseholderQR<Matrix> qr(x);
    out.coefficients = qr.solve(y);
    out.fitted = x * out.coefficients;
    out.converged = true;
    out.iterations = 1;
    out.deviance = (y - out.fitted).squaredNorm();
    out.max_score = (x.transpose() * (y - out.fitted)).cwiseAbs().maxCoeff();
    return out;
  }

  if (kind == FamilyKind::Binomial || kind == FamilyKind::Poisson) {
    auto st = detail::irls(kind, x, y, 1.0, opt, std::nullopt);
    if (kind == FamilyKind::Binomial) {
      const bool at_bound = ((st.mu.array() < 1e-8) || (st.mu.array() > 1.0 - 1e-8)).any();
      if (at_bound && st.last_step > 1e-3 * std::max(1.0, st.beta.norm()))
        fail(ErrorCode::Separation, "fitted probabilities hit 0/1 while coefficients diverge");
    }
    out.coefficients = st.beta;
    out.fitted = st.mu;
    out.converged = st.converged;
    out.iterations = st.iterations;
    out.deviance = st.deviance;
    out.max_score = st.max_score;
    return out;
  }

  // Negative binomial: alternate IRLS for the mean with Newton on the size.
  auto pois = detail::irls(FamilyKind::Poisson, x, y, 1.0, opt, std::nullopt);
  double size;
  if (family.fixed_dispersion) {
    size = *family.fixed_dispersion;
    require(size > 0.0, ErrorCode::InvalidArgument, "negbin dispersion must be positive");
  } else {
    double num = 0.0, den = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      num += pois.mu(i) * pois.mu(i);
      den += (y(i) - pois.mu(i)) * (y(i) - pois.mu(i)) - pois.mu(i);
    }
    size = den > 0.0 ? std::max(num / den, 1e-8) : 1e8;
  }
  std::optional<Vector> start = pois.beta;
  detail::IrlsState st;
  int total_iter = pois.iterations;
  bool converged = false;
  for (int outer = 0; outer < opt.max_iter; ++outer) {
    st = detail::irls(FamilyKind::NegBin, x, y, size, opt, start);
    total_iter += st.iterations;
    start = st.beta;
    if (family.fixed_dispersion) {
      converged = st.converged;
      break;
    }
    const double next = detail::nb_update_size(y, st.mu, size);
    const double change = std::abs(std::log(next) - std::log(size));
    size = next;
    if (st.converged && change < 1e-9) {
      st = detail::irls(FamilyKind::NegBin, x, y, size, opt, start);
      converged = st.converged;
      break;
    }
  }
  out.coefficients = st.beta;
  out.fitted = st.mu;
  out.converged = converged;
  out.iterations = total_iter;
  out.deviance = st.deviance;
  out.dispersion = size;
  out.max_score = st.max_score;
  return out;
}

inline FitResult fit(const DesignMatrix& design, std::span<const double> y, const Family& family,
                     const FitOptions& opt = {}) {
  return fit(design.values, Eigen::Map<const Vector>(y.data(), static_cast<Eigen::Index>(y.size())), family, opt);
}

/// Inverse link applied to the linear predictor of each row.
inline Vector predict(const FitResult& fit, const Matrix& rows) {
  require(rows.cols() == fit.coefficients.size(), ErrorCode::DimensionMismatch,
          "prediction rows have " + std::to_string(rows.cols()) + " columns, fit has " +
              std::to_string(fit.coefficients.size()));
  return detail::mean_from_eta(fit.family.kind, rows * fit.coefficients);
}

inline Vector predict(const FitResult& fit, const DesignMatrix& rows) { return predict(fit, rows.values); }

/// Score vector at the fitted means (zero at an exact solution).
inline Vector score(const FitResult& fit, const Matrix& x, const Vector& y) {
  const double size = fit.family.kind == FamilyKind::NegBin ? fit.dispersion : 1.0;
  return detail::score(fit.family.kind, x, y, fit.fitted, size);
}

inline nlohmann::json to_json(const FitResult& f) {
  std::vector<double> coef(f.coefficients.data(), f.coefficients.data() + f.coefficients.size());
  nlohmann::json j{{"family", f.family.name()}, {"coefficients", coef}, {"converged", f.converged},
                   {"iterations", f.iterations}, {"deviance", f.deviance}, {"max_score", f.max_score}};
  if (f.family.kind == FamilyKind::NegBin) j["dispersion"] = f.dispersion;
  return j;
}

}  // namespace covadj::glm
