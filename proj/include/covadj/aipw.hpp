#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <nlohmann/json.hpp>
#include <numeric>
#include <string>
#include <vector>

#include "error.hpp"
#include "glm.hpp"
#include "numeric.hpp"
#include "rng.hpp"
#include "trial_data.hpp"

namespace covadj::aipw {

enum class VarianceType { Type1, Type2, Type3, HC0, HC1, HC2, HC3 };
enum class Method { AIPW, GComp, LinearCal, JointCal };

inline std::string to_string(VarianceType v) {
  switch (v) {
    case VarianceType::Type1: return "1";
    case VarianceType::Type2: return "2";
    case VarianceType::Type3: return "3";
    case VarianceType::HC0: return "hc0";
    case VarianceType::HC1: return "hc1";
    case VarianceType::HC2: return "hc2";
    case VarianceType::HC3: return "hc3";
  }
  return "?";
}

inline VarianceType parse_variance_type(const std::string& s) {
  if (s == "1") return VarianceType::Type1;
  if (s == "2") return VarianceType::Type2;
  if (s == "3") return VarianceType::Type3;
  if (s == "hc0" || s == "HC0") return VarianceType::HC0;
  if (s == "hc1" || s == "HC1") return VarianceType::HC1;
  if (s == "hc2" || s == "HC2") return VarianceType::HC2;
  if (s == "hc3" || s == "HC3") return VarianceType::HC3;
  fail(ErrorCode::InvalidArgument, "unknown variance type '" + s + "'");
}

inline bool is_sandwich(VarianceType v) { return v != VarianceType::Type1 && v != VarianceType::Type2 && v != VarianceType::Type3; }

inline std::string to_string(Method m) {
  switch (m) {
    case Method::AIPW: return "aipw";
    case Method::GComp: return "gcomp";
    case Method::LinearCal: return "linear-cal";
    case Method::JointCal: return "joint-cal";
  }
  return "?";
}

/// Predicted potential-outcome means: values(i, a) = mu_a(X_i).
struct MuMatrix {
  Matrix values;
  bool cross_fit = false;
  int k_split = 1;
  std::uint64_t seed = 0;
  std::vector<int> fold;  // per row, cross-fit only
};

struct MarginalEstimate {
  std::vector<std::string> arms;
  Vector theta;
  Matrix vcov;  // estimated variance of theta (asymptotic variance / n)
  Vector pi_hat;
  std::vector<std::size_t> n_per_arm;
  VarianceType variance_type = VarianceType::Type1;
  Method method = Method::AIPW;

  Vector se() const { return vcov.diagonal().cwiseMax(0.0).cwiseSqrt(); }
};

namespace detail {

inline void check_mu(const TrialDataset& data, const MuMatrix& mu) {
  require(mu.values.rows() == static_cast<Eigen::Index>(data.n()), ErrorCode::DimensionMismatch,
          "mu has " + std::to_string(mu.values.rows()) + " rows, data has " + std::to_string(data.n()));
  require(mu.values.cols() == static_cast<Eigen::Index>(data.k()), ErrorCode::DimensionMismatch,
          "mu column count must equal the number of arms");
  require(data.has_outcome(), ErrorCode::ValidationError, "AIPW needs an outcome column");
  for (auto c : data.arm_counts()) require(c >= 1, ErrorCode::EmptyArm, "an arm has no observations");
}

inline std::vector<double> gather(std::span<const double> v, const std::vector<std::size_t>& rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(v[r]);
  return out;
}

inline std::vector<double> gather(const Matrix& m, Eigen::Index col, const std::vector<std::size_t>& rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(m(static_cast<Eigen::Index>(r), col));
  return out;
}

inline std::vector<double> column(const Matrix& m, Eigen::Index col) {
  return std::vector<double>(m.col(col).data(), m.col(col).data() + m.rows());
}

// One evaluation of the AIPW display over a subset of rows.
inline Vector aipw_on_rows(const TrialDataset& data, const Matrix& mu, const std::vector<std::size_t>& rows) {
  const auto y = data.outcome();
  const auto arm = data.arm_of();
  const auto k = static_cast<Eigen::Index>(data.k());
  Vector theta(k);
  for (Eigen::Index a = 0; a < k; ++a) {
    std::vector<double> pred, resid;
    for (auto i : rows) {
      pred.push_back(mu(static_cast<Eigen::Index>(i), a));
      if (arm[i] == a) resid.push_back(y[i] - mu(static_cast<Eigen::Index>(i), a));
    }
    require(!resid.empty(), ErrorCode::FoldTooSmall, "a fold contains no rows of arm " + data.arms()[a]);
    theta(a) = mean(pred) + mean(resid);
  }
  return theta;
}

}  // namespace detail

/// Per-arm augmentation term (1/n_a) sum_{A_i=a} (Y_i - mu_a(X_i)).
inline Vector augmentation(const TrialDataset& data, const MuMatrix& mu) {
  detail::check_mu(data, mu);
  const auto y = data.outcome();
  Vector out(static_cast<Eigen::Index>(data.k()));
  for (std::size_t a = 0; a < data.k(); ++a) {
    const auto rows = data.rows_in_arm(static_cast<int>(a));
    std::vector<double> r;
    for (auto i : rows) r.push_back(y[i] - mu.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)));
    out(static_cast<Eigen::Index>(a)) = mean(r);
  }
  return out;
}

/// Influence-function variance of the AIPW estimator under simple
/// randomization, returned on the scale of theta (V / n).
///
///   V_ab = 1{a=b} Var(Y_a - mu_a) / pi_a + Cov(Y_a, mu_b) + Cov(mu_a, Y_b) - Cov(mu_a, mu_b)
///
/// pi_a divides the residual variance; with constant mu this collapses to
/// s_a^2 / n_a, the variance of the arm sample mean. Cov(Y_a, .) terms only
/// use arm-a rows. The variance types differ in where the mu-only moments are
/// evaluated:
///   1  Var(Y_a - mu_a) decomposed; Var(mu_a), Cov(mu_a, mu_b) over all rows
///   2  Var(Y_a - mu_a) as the arm-a sample variance of residuals; other
///      mu-only moments over all rows
///   3  every mu-only moment for the pair (a, b) over rows in arms a and b
inline Matrix variance_if(const TrialDataset& data, const MuMatrix& mu, VarianceType type) {
  detail::check_mu(data, mu);
  require(!is_sandwich(type), ErrorCode::InvalidArgument, "variance_if takes type 1, 2 or 3");
  const auto k = static_cast<Eigen::Index>(data.k());
  const auto n = static_cast<double>(data.n());
  const auto y = data.outcome();
  const auto arm = data.arm_of();
  const auto counts = data.arm_counts();
  std::vector<std::vector<std::size_t>> rows(k);
  for (Eigen::Index a = 0; a < k; ++a) {
    rows[a] = data.rows_in_arm(static_cast<int>(a));
    require(rows[a].size() >= 2, ErrorCode::DegenerateVariance, "arm " + data.arms()[a] + " has fewer than 2 rows");
  }
  const Matrix& m = mu.values;

  auto mu_cov = [&](Eigen::Index a, Eigen::Index b) {
    if (type == VarianceType::Type3) {
      std::vector<double> xa, xb;
      for (std::size_t i = 0; i < data.n(); ++i) {
        if (arm[i] != a && arm[i] != b) continue;
        xa.push_back(m(static_cast<Eigen::Index>(i), a));
        xb.push_back(m(static_cast<Eigen::Index>(i), b));
      }
      return sample_cov(xa, xb);
    }
    return sample_cov(detail::column(m, a), detail::column(m, b));
  };

  Matrix v(k, k);
  for (Eigen::Index a = 0; a < k; ++a) {
    const auto ya = detail::gather(y, rows[a]);
    for (Eigen::Index b = a; b < k; ++b) {
      const auto yb = detail::gather(y, rows[b]);
      const double cov_ya_mub = sample_cov(ya, detail::gather(m, b, rows[a]));
      const double cov_mua_yb = sample_cov(detail::gather(m, a, rows[b]), yb);
      double value = cov_ya_mub + cov_mua_yb - mu_cov(a, b);
      if (a == b) {
        const double pi = static_cast<double>(counts[a]) / n;
        double resid_var;
        if (type == VarianceType::Type1) {
          const auto mua = detail::gather(m, a, rows[a]);
          resid_var = sample_cov(ya, ya) - 2.0 * sample_cov(ya, mua) + mu_cov(a, a);
        } else {
          std::vector<double> r(ya.size());
          for (std::size_t i = 0; i < ya.size(); ++i) r[i] = ya[i] - m(static_cast<Eigen::Index>(rows[a][i]), a);
          resid_var = sample_cov(r, r);
        }
        value += resid_var / pi;
      }
      v(a, b) = v(b, a) = value;
    }
  }
  return v / n;
}

inline MarginalEstimate make_estimate(const TrialDataset& data, Vector theta, Matrix vcov, VarianceType type,
                                      Method method) {
  MarginalEstimate est;
  est.arms = data.arms();
  est.theta = std::move(theta);
  est.vcov = std::move(vcov);
  est.n_per_arm = data.arm_counts();
  est.pi_hat.resize(static_cast<Eigen::Index>(data.k()));
  for (std::size_t a = 0; a < data.k(); ++a)
    est.pi_hat(static_cast<Eigen::Index>(a)) = static_cast<double>(est.n_per_arm[a]) / static_cast<double>(data.n());
  est.variance_type = type;
  est.method = method;
  return est;
}

/// AIPW marginal means with influence-function variance. A cross-fit MuMatrix
/// gives the fold-size weighted average of fold-specific evaluations.
inline MarginalEstimate estimate_aipw(const TrialDataset& data, const MuMatrix& mu,
                                      VarianceType type = VarianceType::Type1) {
  detail::check_mu(data, mu);
  Vector theta;
  if (mu.cross_fit && mu.k_split > 1) {
    require(mu.fold.size() == data.n(), ErrorCode::DimensionMismatch, "cross-fit mu lacks fold labels");
    theta = Vector::Zero(static_cast<Eigen::Index>(data.k()));
    for (int f = 0; f < mu.k_split; ++f) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < data.n(); ++i)
        if (mu.fold[i] == f) rows.push_back(i);
      theta += detail::aipw_on_rows(data, mu.values, rows) * (static_cast<double>(rows.size()) / static_cast<double>(data.n()));
    }
  } else {
    std::vector<std::size_t> all(data.n());
    std::iota(all.begin(), all.end(), std::size_t{0});
    theta = detail::aipw_on_rows(data, mu.values, all);
  }
  return make_estimate(data, std::move(theta), variance_if(data, mu, type), type, Method::AIPW);
}

// ---------------------------------------------------------------------------
// Working models and cross-fitting
// ---------------------------------------------------------------------------

struct WorkingModel {
  MuMatrix mu;
  std::vector<glm::FitResult> fits;
};

namespace detail {
inline void fit_and_predict(const TrialDataset& data, const ModelSpec& spec, const glm::Family& family,
                            const glm::FitOptions& opt, const std::vector<std::size_t>& train,
                            const std::vector<std::size_t>& predict_rows, Matrix& out, std::vector<glm::FitResult>& fits) {
  const auto y = data.outcome();
  const auto arm = data.arm_of();
  const DesignMatrix design = build_design(data, spec);
  auto check = [](const glm::FitResult& f) {
    require(f.converged, ErrorCode::NotConverged,
            "working model did not converge (max score " + std::to_string(f.max_score) + ")");
  };
  if (spec.pooled) {
    auto f = glm::fit(select_rows(design.values, train), select_rows(y, train), family, opt);
    check(f);
    for (std::size_t a = 0; a < data.k(); ++a) {
      const DesignMatrix cf = counterfactual_design(data, spec, static_cast<int>(a));
      const Vector pred = glm::predict(f, select_rows(cf.values, predict_rows));
      for (std::size_t r = 0; r < predict_rows.size(); ++r)
        out(static_cast<Eigen::Index>(predict_rows[r]), static_cast<Eigen::Index>(a)) = pred(static_cast<Eigen::Index>(r));
    }
    fits.push_back(std::move(f));
  } else {
    const Matrix pred_x = select_rows(design.values, predict_rows);
    for (std::size_t a = 0; a < data.k(); ++a) {
      std::vector<std::size_t> arm_train;
      for (auto i : train)
        if (arm[i] == static_cast<int>(a)) arm_train.push_back(i);
      auto f = glm::fit(select_rows(design.values, arm_train), select_rows(y, arm_train), family, opt);
      check(f);
      const Vector pred = glm::predict(f, pred_x);
      for (std::size_t r = 0; r < predict_rows.size(); ++r)
        out(static_cast<Eigen::Index>(predict_rows[r]), static_cast<Eigen::Index>(a)) = pred(static_cast<Eigen::Index>(r));
      fits.push_back(std::move(f));
    }
  }
}
}  // namespace detail

/// Working-model predictions. k_split = 1 fits in-sample; otherwise rows are
/// split into arm-stratified folds and each row is predicted from fits that
/// exclude its fold.
inline WorkingModel crossfit_mu(const TrialDataset& data, const ModelSpec& spec, const glm::Family& family,
                                int k_split = 1, std::uint64_t seed = 0, const glm::FitOptions& opt = {}) {
  require(k_split >= 1, ErrorCode::InvalidArgument, "k_split must be at least 1");
  require(data.has_outcome(), ErrorCode::ValidationError, "working model needs an outcome column");
  const auto counts = data.arm_counts();
  for (auto c : counts)
    require(static_cast<std::size_t>(k_split) <= c, ErrorCode::FoldTooSmall,
            "k_split exceeds the size of the smallest arm");

  WorkingModel wm;
  wm.mu.values = Matrix::Zero(static_cast<Eigen::Index>(data.n()), static_cast<Eigen::Index>(data.k()));
  wm.mu.k_split = k_split;
  wm.mu.seed = seed;
  std::vector<std::size_t> all(data.n());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (k_split == 1) {
    detail::fit_and_predict(data, spec, family, opt, all, all, wm.mu.values, wm.fits);
    return wm;
  }

  wm.mu.cross_fit = true;
  wm.mu.fold.assign(data.n(), 0);
  CounterRng rng(seed);
  for (std::size_t a = 0; a < data.k(); ++a) {
    auto rows = data.rows_in_arm(static_cast<int>(a));
    rng.shuffle(std::span<std::size_t>(rows));
    for (std::size_t r = 0; r < rows.size(); ++r) wm.mu.fold[rows[r]] = static_cast<int>(r % static_cast<std::size_t>(k_split));
  }
  for (int f = 0; f < k_split; ++f) {
    std::vector<std::size_t> train, held;
    for (std::size_t i = 0; i < data.n(); ++i) (wm.mu.fold[i] == f ? held : train).push_back(i);
    detail::fit_and_predict(data, spec, family, opt, train, held, wm.mu.values, wm.fits);
  }
  return wm;
}

inline MuMatrix fit_mu(const TrialDataset& data, const ModelSpec& spec, const glm::Family& family,
                       const glm::FitOptions& opt = {}) {
  return crossfit_mu(data, spec, family, 1, 0, opt).mu;
}

// ---------------------------------------------------------------------------
// Sandwich (Eicker-Huber-White) variance for pooled homogeneous linear models
// ---------------------------------------------------------------------------

/// HC0..HC3 covariance of OLS coefficients.
inline Matrix sandwich_coef_vcov(const Matrix& x, const Vector& resid, VarianceType hc) {
  require(is_sandwich(hc), ErrorCode::InvalidArgument, "sandwich needs HC0..HC3");
  const auto n = x.rows();
  const auto p = x.cols();
  const Matrix bread = (x.transpose() * x).inverse();
  Vector w = resid.array().square();
  if (hc == VarianceType::HC2 || hc == VarianceType::HC3) {
    const Vector h = (x * bread).cwiseProduct(x).rowwise().sum();
    for (Eigen::Index i = 0; i < n; ++i) {
      const double one_minus = 1.0 - h(i);
      require(one_minus > 1e-12, ErrorCode::DegenerateVariance, "leverage of 1 in HC2/HC3");
      w(i) /= hc == VarianceType::HC2 ? one_minus : one_minus * one_minus;
    }
  }
  const Matrix meat = x.transpose() * w.asDiagonal() * x;
  Matrix v = bread * meat * bread;
  if (hc == VarianceType::HC1) {
    require(n > p, ErrorCode::DegenerateVariance, "HC1 needs n > p");
    v *= static_cast<double>(n) / static_cast<double>(n - p);
  }
  return v;
}

/// G-computation from a pooled linear model without arm interactions, with
/// sandwich variance mapped to the marginal means by the linear map
/// theta_a = colmeans(X with arm set to a) * beta. Valid only under simple
/// randomization, which the caller must attest.
inline MarginalEstimate variance_sandwich(const TrialDataset& data, const ModelSpec& spec, VarianceType hc,
                                          bool simple_randomization = true) {
  require(is_sandwich(hc), ErrorCode::InvalidArgument, "variance_sandwich needs HC0..HC3");
  require(spec.pooled && !spec.arm_interactions, ErrorCode::UnsupportedModel,
          "sandwich variance requires a pooled linear model without arm interactions");
  require(simple_randomization, ErrorCode::UnsupportedModel, "sandwich variance is only valid under simple randomization");
  const DesignMatrix design = build_design(data, spec);
  const auto y = data.outcome();
  auto f = glm::fit(design, y, glm::Family::gaussian());
  const Vector resid = Eigen::Map<const Vector>(y.data(), static_cast<Eigen::Index>(y.size())) - f.fitted;
  const Matrix vbeta = sandwich_coef_vcov(design.values, resid, hc);
  const auto k = static_cast<Eigen::Index>(data.k());
  Matrix g(k, design.cols());
  for (Eigen::Index a = 0; a < k; ++a)
    g.row(a) = counterfactual_design(data, spec, static_cast<int>(a)).values.colwise().mean();
  Vector theta = g * f.coefficients;
  Matrix vcov = g * vbeta * g.transpose();
  return make_estimate(data, std::move(theta), 0.5 * (vcov + vcov.transpose()), hc, Method::GComp);
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct CalibrationResult {
  MarginalEstimate estimate;
  std::vector<Vector> coefficients;  // per arm: second-stage least-squares coefficients
  MuMatrix calibrated;
};

namespace detail {
// `keep` selects the mu columns entering the second stage; dropped columns
// get a zero coefficient.
inline CalibrationResult calibrate(const TrialDataset& data, const MuMatrix& mu, const Matrix& lead,
                                   const std::vector<bool>& keep, VarianceType type, Method method) {
  check_mu(data, mu);
  const auto n = static_cast<Eigen::Index>(data.n());
  const auto k = static_cast<Eigen::Index>(data.k());
  std::vector<Eigen::Index> used;
  for (Eigen::Index a = 0; a < k; ++a)
    if (keep[static_cast<std::size_t>(a)]) used.push_back(a);
  Matrix w(n, lead.cols() + static_cast<Eigen::Index>(used.size()));
  w.leftCols(lead.cols()) = lead;
  for (std::size_t j = 0; j < used.size(); ++j) w.col(lead.cols() + static_cast<Eigen::Index>(j)) = mu.values.col(used[j]);
  const auto y = data.outcome();

  CalibrationResult out;
  out.calibrated.values.resize(n, k);
  out.calibrated.cross_fit = false;
  for (Eigen::Index a = 0; a < k; ++a) {
    const auto rows = data.rows_in_arm(static_cast<int>(a));
    const Matrix wa = select_rows(w, rows);
    Eigen::ColPivHouseholderQR<Matrix> qr(wa);
    qr.setThreshold(1e-10);
    require(qr.rank() == wa.cols(), ErrorCode::RankDeficient,
            "second-stage calibration design is rank deficient in arm " + data.arms()[a]);
    const Vector coef = qr.solve(select_rows(y, rows));
    out.calibrated.values.col(a) = w * coef;
    Vector full = Vector::Zero(lead.cols() + k);
    full.head(lead.cols()) = coef.head(lead.cols());
    for (std::size_t j = 0; j < used.size(); ++j) full(lead.cols() + used[j]) = coef(lead.cols() + static_cast<Eigen::Index>(j));
    out.coefficients.push_back(std::move(full));
  }
  Vector theta(k);
  for (Eigen::Index a = 0; a < k; ++a) theta(a) = pairwise_sum(Vector(out.calibrated.values.col(a))) / static_cast<double>(n);
  out.estimate = make_estimate(data, std::move(theta), variance_if(data, out.calibrated, type), type, method);
  return out;
}
}  // namespace detail

/// Per arm, least squares of Y on (1, mu_1, ..., mu_k) over that arm's rows;
/// theta_a averages the fitted function over all rows.
inline CalibrationResult linear_calibrate(const TrialDataset& data, const MuMatrix& mu,
                                          VarianceType type = VarianceType::Type1) {
  return detail::calibrate(data, mu, Matrix::Ones(static_cast<Eigen::Index>(data.n()), 1), std::vector<bool>(data.k(), true),
                           type, Method::LinearCal);
}

/// As linear_calibrate, with the intercept replaced by a full set of joint
/// stratum indicators. A mu column that is constant over all rows lies in the
/// span of the indicators and is left out rather than reported as collinear.
inline CalibrationResult joint_calibrate(const TrialDataset& data, const MuMatrix& mu,
                                         VarianceType type = VarianceType::Type1) {
  const auto n = static_cast<Eigen::Index>(data.n());
  const auto L = static_cast<Eigen::Index>(data.num_strata());
  const auto strata = data.strata_index();
  const auto arm = data.arm_of();
  for (std::size_t a = 0; a < data.k(); ++a) {
    std::vector<bool> seen(static_cast<std::size_t>(L), false);
    for (std::size_t i = 0; i < data.n(); ++i)
      if (arm[i] == static_cast<int>(a)) seen[strata[i]] = true;
    for (Eigen::Index z = 0; z < L; ++z)
      require(seen[z], ErrorCode::StratumWithoutArm,
              "stratum " + data.stratum_labels()[z] + " has no rows in arm " + data.arms()[a]);
  }
  Matrix z = Matrix::Zero(n, L);
  for (Eigen::Index i = 0; i < n; ++i) z(i, strata[i]) = 1.0;
  std::vector<bool> keep(data.k());
  for (std::size_t a = 0; a < data.k(); ++a) {
    const auto col = mu.values.col(static_cast<Eigen::Index>(a));
    keep[a] = col.maxCoeff() != col.minCoeff();
  }
  return detail::calibrate(data, mu, z, keep, type, Method::JointCal);
}

// ---------------------------------------------------------------------------
// Contrasts
// ---------------------------------------------------------------------------

enum class ContrastKind { Difference, LogRiskRatio, LogOddsRatio, Custom };

inline std::string to_string(ContrastKind c) {
  switch (c) {
    case ContrastKind::Difference: return "difference";
    case ContrastKind::LogRiskRatio: return "log_risk_ratio";
    case ContrastKind::LogOddsRatio: return "log_odds_ratio";
    case ContrastKind::Custom: return "custom";
  }
  return "?";
}

inline ContrastKind parse_contrast(const std::string& s) {
  if (s == "difference") return ContrastKind::Difference;
  if (s == "log_risk_ratio") return ContrastKind::LogRiskRatio;
  if (s == "log_odds_ratio") return ContrastKind::LogOddsRatio;
  fail(ErrorCode::InvalidArgument, "unknown contrast '" + s + "'");
}

struct ContrastResult {
  std::string name;
  int a = 0, b = 1;
  std::string label_a, label_b;
  double estimate = 0.0;
  double se = 0.0;
  double z = 0.0;
  double p = 1.0;
  double ci_low = 0.0, ci_high = 0.0;
  Vector gradient;
};

/// Delta-method inference for f(theta) with the supplied gradient.
inline ContrastResult contrast_custom(const MarginalEstimate& est, const std::string& name,
                                      const std::function<double(const Vector&)>& f,
                                      const std::function<Vector(const Vector&)>& grad, double alpha = 0.05) {
  require(alpha > 0.0 && alpha < 1.0, ErrorCode::InvalidArgument, "alpha must be in (0,1)");
  ContrastResult r;
  r.name = name;
  r.estimate = f(est.theta);
  r.gradient = grad(est.theta);
  require(r.gradient.size() == est.theta.size(), ErrorCode::DimensionMismatch, "gradient has wrong length");
  const double var = r.gradient.dot(est.vcov * r.gradient);
  r.se = std::sqrt(std::max(var, 0.0));
  if (r.se > 0.0) {
    r.z = r.estimate / r.se;
  } else {
    r.z = r.estimate == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), r.estimate);
  }
  r.p = two_sided_p(r.z);
  const double q = normal_quantile(1.0 - alpha / 2.0);
  r.ci_low = r.estimate - q * r.se;
  r.ci_high = r.estimate + q * r.se;
  return r;
}

/// Named contrast g(theta_b) - g(theta_a) with g = identity, log or logit.
inline ContrastResult contrast(const MarginalEstimate& est, ContrastKind kind, int a, int b, double alpha = 0.05) {
  const auto k = est.theta.size();
  require(a >= 0 && b >= 0 && a < k && b < k && a != b, ErrorCode::InvalidArgument, "contrast arms out of range");
  std::function<double(double)> g;
  std::function<double(double)> dg;
  switch (kind) {
    case ContrastKind::Difference:
      g = [](double t) { return t; };
      dg = [](double) { return 1.0; };
      break;
    case ContrastKind::LogRiskRatio:
      for (int arm : {a, b})
        require(est.theta(arm) > 0.0, ErrorCode::DomainError, "log risk ratio needs positive marginal means");
      g = [](double t) { return std::log(t); };
      dg = [](double t) { return 1.0 / t; };
      break;
    case ContrastKind::LogOddsRatio:
      for (int arm : {a, b})
        require(est.theta(arm) > 0.0 && est.theta(arm) < 1.0, ErrorCode::DomainError,
                "log odds ratio needs marginal means in (0,1)");
      g = [](double t) { return std::log(t / (1.0 - t)); };
      dg = [](double t) { return 1.0 / (t * (1.0 - t)); };
      break;
    case ContrastKind::Custom: fail(ErrorCode::InvalidArgument, "use contrast_custom for custom contrasts");
  }
  auto r = contrast_custom(
      est, to_string(kind), [&](const Vector& t) { return g(t(b)) - g(t(a)); },
      [&](const Vector& t) {
        Vector gr = Vector::Zero(k);
        gr(a) = -dg(t(a));
        gr(b) = dg(t(b));
        return gr;
      },
      alpha);
  r.a = a;
  r.b = b;
  if (!est.arms.empty()) {
    r.label_a = est.arms[a];
    r.label_b = est.arms[b];
  }
  return r;
}

inline nlohmann::json to_json(const ContrastResult& c) {
  return {{"name", c.name}, {"a", c.label_a}, {"b", c.label_b}, {"estimate", c.estimate}, {"se", c.se},
          {"z", c.z},       {"p", c.p},       {"ci", {c.ci_low, c.ci_high}}};
}

/// {method, variance_type, arms:[{label, n, theta, se}], contrasts:[...]}
inline nlohmann::json to_json(const MarginalEstimate& est, const std::vector<ContrastResult>& contrasts) {
  nlohmann::json arms = nlohmann::json::array();
  const Vector se = est.se();
  for (Eigen::Index a = 0; a < est.theta.size(); ++a)
    arms.push_back({{"label", est.arms[a]}, {"n", est.n_per_arm[a]}, {"theta", est.theta(a)}, {"se", se(a)}});
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& c : contrasts) cs.push_back(to_json(c));
  return {{"method", to_string(est.method)}, {"variance_type", to_string(est.variance_type)}, {"arms", arms},
          {"contrasts", cs}};
}

}  // namespace covadj::aipw
