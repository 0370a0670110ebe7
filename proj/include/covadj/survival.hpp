#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"
#include "numeric.hpp"
#include "trial_data.hpp"

namespace covadj::survival {

/// Two-arm survival data reduced to what the tests need. `treated` is 1 for
/// the treatment arm and 0 for the control arm; `x` holds adjustment
/// covariates (no intercept); `stratum` is 0-based.
struct SurvivalData {
  std::vector<double> time;
  std::vector<double> event;
  std::vector<int> treated;
  std::vector<int> stratum;
  int num_strata = 1;
  Matrix x;
  std::vector<std::string> x_names;
  std::vector<std::size_t> source_rows;  // row index in the originating dataset
  std::string treatment_label, control_label;

  std::size_t n() const { return time.size(); }
};

struct SurvivalOptions {
  std::vector<std::string> adjust;  // covariate columns, expanded like a design matrix
  bool stratified = false;
  std::vector<std::string> strata_columns;  // empty: the dataset's stratum columns
  int treatment = 1;
  int control = 0;
};

/// Selects the two arms and builds covariates and strata.
inline SurvivalData prepare(const TrialDataset& data, const SurvivalOptions& opt = {}) {
  require(data.has_survival(), ErrorCode::ValidationError, "dataset has no time/event columns");
  require(opt.treatment != opt.control && opt.treatment >= 0 && opt.control >= 0 &&
              static_cast<std::size_t>(opt.treatment) < data.k() && static_cast<std::size_t>(opt.control) < data.k(),
          ErrorCode::InvalidArgument, "survival tests compare two distinct arms");
  SurvivalData s;
  s.treatment_label = data.arms()[opt.treatment];
  s.control_label = data.arms()[opt.control];
  const auto arm = data.arm_of();
  const auto t = data.time();
  const auto e = data.event();

  std::vector<int> strata(data.n(), 0);
  if (opt.stratified) {
    std::vector<std::string> labels;
    strata = data.joint_levels(opt.strata_columns.empty() ? data.strata_columns() : opt.strata_columns, &labels);
  }
  Matrix x_full(static_cast<Eigen::Index>(data.n()), 0);
  if (!opt.adjust.empty()) {
    ModelSpec spec{"", opt.adjust, false, false, false};
    const DesignMatrix dm = build_design(data, spec);
    x_full = dm.values.rightCols(dm.cols() - 1);
    s.x_names.assign(dm.column_names.begin() + 1, dm.column_names.end());
  }
  for (std::size_t i = 0; i < data.n(); ++i) {
    if (arm[i] != opt.treatment && arm[i] != opt.control) continue;
    s.source_rows.push_back(i);
    s.time.push_back(t[i]);
    s.event.push_back(e[i]);
    s.treated.push_back(arm[i] == opt.treatment ? 1 : 0);
    s.stratum.push_back(strata[i]);
  }
  // Renumber strata among the selected rows.
  std::vector<int> used(s.stratum);
  std::sort(used.begin(), used.end());
  used.erase(std::unique(used.begin(), used.end()), used.end());
  for (auto& z : s.stratum) z = static_cast<int>(std::lower_bound(used.begin(), used.end(), z) - used.begin());
  s.num_strata = std::max<int>(1, static_cast<int>(used.size()));
  s.x = select_rows(x_full, s.source_rows);
  return s;
}

// ---------------------------------------------------------------------------
// Risk sets
// ---------------------------------------------------------------------------

struct RiskSetTable {
  std::vector<double> times;  // distinct event times, increasing
  std::vector<double> d1, d0;
  std::vector<double> r1, r0;
};

namespace detail {

inline std::vector<std::size_t> rows_of_stratum(const SurvivalData& s, std::optional<int> z) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < s.n(); ++i)
    if (!z || s.stratum[i] == *z) rows.push_back(i);
  std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) { return s.time[a] < s.time[b]; });
  return rows;
}

// Groups of equal time within time-sorted rows: [begin, end) offsets.
inline std::vector<std::pair<std::size_t, std::size_t>> tie_groups(const SurvivalData& s, const std::vector<std::size_t>& rows) {
  std::vector<std::pair<std::size_t, std::size_t>> g;
  for (std::size_t b = 0; b < rows.size();) {
    std::size_t e = b + 1;
    while (e < rows.size() && s.time[rows[e]] == s.time[rows[b]]) ++e;
    g.push_back({b, e});
    b = e;
  }
  return g;
}

}  // namespace detail

/// Distinct event times with per-arm event and at-risk counts. Subjects
/// censored at t are still at risk at t.
inline RiskSetTable risk_table(const SurvivalData& s, std::optional<int> stratum = std::nullopt) {
  const auto rows = detail::rows_of_stratum(s, stratum);
  const auto groups = detail::tie_groups(s, rows);
  RiskSetTable t;
  double r1 = 0, r0 = 0;
  for (auto g = groups.rbegin(); g != groups.rend(); ++g) {
    double d1 = 0, d0 = 0;
    for (std::size_t j = g->first; j < g->second; ++j) {
      const auto i = rows[j];
      (s.treated[i] ? r1 : r0) += 1.0;
      if (s.event[i] == 1.0) (s.treated[i] ? d1 : d0) += 1.0;
    }
    if (d1 + d0 > 0) {
      t.times.push_back(s.time[rows[g->first]]);
      t.d1.push_back(d1);
      t.d0.push_back(d0);
      t.r1.push_back(r1);
      t.r0.push_back(r0);
    }
  }
  for (auto* v : {&t.times, &t.d1, &t.d0, &t.r1, &t.r0}) std::reverse(v->begin(), v->end());
  require(!t.times.empty() || stratum.has_value(), ErrorCode::NoEvents, "no events");
  return t;
}

inline RiskSetTable risk_table(const TrialDataset& data, std::optional<int> stratum = std::nullopt) {
  SurvivalOptions opt;
  opt.stratified = stratum.has_value();
  return risk_table(prepare(data, opt), stratum);
}

// ---------------------------------------------------------------------------
// Logrank family
// ---------------------------------------------------------------------------

enum class Variant { L, CL, SL, CSL };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::L: return "L";
    case Variant::CL: return "CL";
    case Variant::SL: return "SL";
    case Variant::CSL: return "CSL";
  }
  return "?";
}

struct LogrankResult {
  Variant variant = Variant::L;
  double U = 0.0;      // sum over event times of D_1 - D R_1 / R
  double V = 0.0;      // variance of U
  double sigma = 0.0;  // sqrt(V / n)
  double T = 0.0;
  double p = 1.0;
  std::size_t n = 0;
  std::size_t n_events = 0;
  std::vector<double> scores;  // signed per-subject scores O_i, in SurvivalData row order
  Vector slope;                // b_1 + b_0 (adjusted variants)
  std::vector<std::string> warnings;
};

namespace detail {

// Score-process pieces at log hazard ratio theta (theta = 0: logrank).
struct ScoreParts {
  double U = 0.0;
  double V = 0.0;     // hypergeometric variance, meaningful at theta = 0
  double info = 0.0;  // -dU/dtheta
  std::size_t events = 0;
  std::vector<double> signed_scores;    // arm 1: O_1i; arm 0: -O_0i
  std::vector<double> unsigned_scores;  // arm 1: O_1i; arm 0: O_0i
  std::vector<int> strata_without_events;
};

// Arm 1 events carry weight R0 / (R1 e^theta + R0) and arm 0 events
// R1 e^theta / (R1 e^theta + R0). Each subject's score integrates its weight
// against its martingale residual under the arm's own Nelson-Aalen
// compensator, so scores sum to zero within each arm of each stratum.
inline ScoreParts score_parts(const SurvivalData& s, double theta) {
  ScoreParts out;
  out.signed_scores.assign(s.n(), 0.0);
  out.unsigned_scores.assign(s.n(), 0.0);
  const double et = std::exp(theta);
  std::vector<double> u_terms, v_terms, i_terms;
  for (int z = 0; z < s.num_strata; ++z) {
    const auto rows = rows_of_stratum(s, z);
    const auto groups = tie_groups(s, rows);
    // At-risk counts per tie group via a reverse sweep.
    std::vector<double> r1(groups.size()), r0(groups.size());
    double c1 = 0, c0 = 0;
    for (std::size_t g = groups.size(); g-- > 0;) {
      for (std::size_t j = groups[g].first; j < groups[g].second; ++j) (s.treated[rows[j]] ? c1 : c0) += 1.0;
      r1[g] = c1;
      r0[g] = c0;
    }
    double cum1 = 0, cum0 = 0;  // compensator integrals up to the current time
    std::size_t stratum_events = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      double d1 = 0, d0 = 0;
      for (std::size_t j = groups[g].first; j < groups[g].second; ++j)
        if (s.event[rows[j]] == 1.0) (s.treated[rows[j]] ? d1 : d0) += 1.0;
      const double denom = r1[g] * et + r0[g];
      const double w1 = r0[g] / denom, w0 = r1[g] * et / denom;
      if (d1 + d0 > 0) {
        stratum_events += static_cast<std::size_t>(d1 + d0);
        const double r = r1[g] + r0[g], d = d1 + d0;
        u_terms.push_back(d1 * w1 - d0 * w0);
        i_terms.push_back(d * r1[g] * et * r0[g] / (denom * denom));
        if (r > 1) v_terms.push_back(d * (r1[g] * r0[g] / (r * r)) * (r - d) / (r - 1));
        if (d1 > 0) cum1 += d1 * w1 / r1[g];
        if (d0 > 0) cum0 += d0 * w0 / r0[g];
      }
      for (std::size_t j = groups[g].first; j < groups[g].second; ++j) {
        const auto i = rows[j];
        const double ev = s.event[i];
        if (s.treated[i]) {
          const double o = ev * w1 - cum1;
          out.signed_scores[i] = o;
          out.unsigned_scores[i] = o;
        } else {
          const double o = ev * w0 - cum0;
          out.signed_scores[i] = -o;
          out.unsigned_scores[i] = o;
        }
      }
    }
    if (stratum_events == 0) out.strata_without_events.push_back(z);
    out.events += stratum_events;
  }
  out.U = pairwise_sum(u_terms);
  out.V = pairwise_sum(v_terms);
  out.info = pairwise_sum(i_terms);
  return out;
}

// Within-stratum covariate adjustment shared by CL, CSL and the adjusted
// hazard ratio. Returns the slope g = b_1 + b_0, the adjustment term
// sum_z sum_i (I_i - pi_1(z)) g'(X_i - Xbar_z), the variance reduction
// sum_z n_z pi_1(z) pi_0(z) g' S_z g and the per-subject adjustments.
struct Adjustment {
  Vector g;
  double term = 0.0;
  double reduction = 0.0;
  std::vector<double> per_subject;
};

// Columns of x that vary within at least one stratum.
inline std::vector<Eigen::Index> informative_columns(const SurvivalData& s) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < s.x.cols(); ++j) {
    std::vector<double> lo(s.num_strata, std::numeric_limits<double>::infinity()), hi(s.num_strata, -lo[0]);
    for (std::size_t i = 0; i < s.n(); ++i) {
      lo[s.stratum[i]] = std::min(lo[s.stratum[i]], s.x(static_cast<Eigen::Index>(i), j));
      hi[s.stratum[i]] = std::max(hi[s.stratum[i]], s.x(static_cast<Eigen::Index>(i), j));
    }
    for (int z = 0; z < s.num_strata; ++z)
      if (hi[z] > lo[z]) {
        keep.push_back(j);
        break;
      }
  }
  return keep;
}

inline Adjustment adjust(const SurvivalData& s, const std::vector<double>& unsigned_scores) {
  Adjustment out;
  out.per_subject.assign(s.n(), 0.0);
  const auto keep = informative_columns(s);
  const auto p = static_cast<Eigen::Index>(keep.size());
  out.g = Vector::Zero(s.x.cols());
  if (p == 0) return out;
  Matrix x(static_cast<Eigen::Index>(s.n()), p);
  for (Eigen::Index j = 0; j < p; ++j) x.col(j) = s.x.col(keep[j]);

  // Cell means by (stratum, arm) and by stratum.
  const int L = s.num_strata;
  Matrix cell_sum = Matrix::Zero(2 * L, p), strat_sum = Matrix::Zero(L, p);
  Vector cell_o = Vector::Zero(2 * L);
  std::vector<double> cell_n(2 * L, 0.0), strat_n(L, 0.0), strat_n1(L, 0.0);
  for (std::size_t i = 0; i < s.n(); ++i) {
    const int z = s.stratum[i], c = 2 * z + s.treated[i];
    const auto r = static_cast<Eigen::Index>(i);
    cell_sum.row(c) += x.row(r);
    cell_o(c) += unsigned_scores[i];
    cell_n[c] += 1.0;
    strat_sum.row(z) += x.row(r);
    strat_n[z] += 1.0;
    strat_n1[z] += s.treated[i];
  }
  Matrix sxx[2] = {Matrix::Zero(p, p), Matrix::Zero(p, p)};
  Vector sxo[2] = {Vector::Zero(p), Vector::Zero(p)};
  for (std::size_t i = 0; i < s.n(); ++i) {
    const int a = s.treated[i], c = 2 * s.stratum[i] + a;
    const Vector dx = (x.row(static_cast<Eigen::Index>(i)) - cell_sum.row(c) / cell_n[c]).transpose();
    sxx[a] += dx * dx.transpose();
    sxo[a] += dx * (unsigned_scores[i] - cell_o(c) / cell_n[c]);
  }
  Vector g = Vector::Zero(p);
  for (int a = 0; a < 2; ++a) {
    Eigen::ColPivHouseholderQR<Matrix> qr(sxx[a]);
    qr.setThreshold(1e-10);
    require(qr.rank() == p, ErrorCode::RankDeficient,
            "adjustment covariates are collinear within the " + std::string(a ? "treatment" : "control") + " arm");
    g += qr.solve(sxo[a]);
  }

  std::vector<double> terms;
  Matrix sx = Matrix::Zero(p, p);
  std::vector<double> red;
  for (int z = 0; z < L; ++z) {
    if (strat_n[z] == 0) continue;
    const double pi1 = strat_n1[z] / strat_n[z];
    Matrix sz = Matrix::Zero(p, p);
    for (std::size_t i = 0; i < s.n(); ++i) {
      if (s.stratum[i] != z) continue;
      const Vector dx = (x.row(static_cast<Eigen::Index>(i)) - strat_sum.row(z) / strat_n[z]).transpose();
      const double adj = (s.treated[i] - pi1) * g.dot(dx);
      out.per_subject[i] = adj;
      terms.push_back(adj);
      sz += dx * dx.transpose();
    }
    // n_z pi1 pi0 g' (S_z / n_z) g
    red.push_back(pi1 * (1.0 - pi1) * g.dot(sz * g));
  }
  out.term = pairwise_sum(terms);
  out.reduction = pairwise_sum(red);
  for (Eigen::Index j = 0; j < p; ++j) out.g(keep[j]) = g(j);
  return out;
}

}  // namespace detail

/// Logrank test. Without covariates or strata this is the usual logrank with the
/// hypergeometric variance (L). Covariates give the adjusted numerator
/// U_L - sum (I_i - pi_1)(b_1 + b_0)'(X_i - Xbar), where b_a is the
/// within-arm least-squares slope of the per-subject scores on X, and the
/// variance V_L - n pi_1 pi_0 (b_1 + b_0)' S_X (b_1 + b_0) (CL). Strata sum
/// the pieces within strata (SL, CSL); one stratum reproduces L and CL.
inline LogrankResult logrank(const SurvivalData& s) {
  const bool adjusted = s.x.cols() > 0;
  const bool stratified = s.num_strata > 1;
  LogrankResult r;
  r.variant = adjusted ? (stratified ? Variant::CSL : Variant::CL) : (stratified ? Variant::SL : Variant::L);
  r.n = s.n();
  auto parts = detail::score_parts(s, 0.0);
  require(parts.events > 0, ErrorCode::NoEvents, "no events");
  for (int z : parts.strata_without_events)
    r.warnings.push_back("stratum " + std::to_string(z) + " has no events and contributes zero");
  r.n_events = parts.events;
  r.U = parts.U;
  r.V = parts.V;
  r.scores = parts.signed_scores;
  if (adjusted) {
    const auto adj = detail::adjust(s, parts.unsigned_scores);
    r.U -= adj.term;
    r.V -= adj.reduction;
    r.slope = adj.g;
  }
  require(r.V > 0.0, ErrorCode::DegenerateVariance, "logrank variance is not positive");
  r.sigma = std::sqrt(r.V / static_cast<double>(r.n));
  r.T = r.U / std::sqrt(r.V);
  r.p = two_sided_p(r.T);
  return r;
}

inline LogrankResult logrank(const TrialDataset& data, const SurvivalOptions& opt = {}) { return logrank(prepare(data, opt)); }

// ---------------------------------------------------------------------------
// Robust Cox score test
// ---------------------------------------------------------------------------

struct CoxFit {
  Vector beta;
  double loglik = 0.0;
  Vector gradient;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

// Breslow partial likelihood over strata, with gradient and information,
// for covariates z (columns) at coefficients beta.
struct PartialLik {
  double loglik = 0.0;
  Vector grad;
  Matrix info;
};

inline PartialLik partial_likelihood(const SurvivalData& s, const Matrix& z, const Vector& beta) {
  const auto p = z.cols();
  PartialLik out{0.0, Vector::Zero(p), Matrix::Zero(p, p)};
  const Vector eta = z * beta;
  for (int st = 0; st < s.num_strata; ++st) {
    const auto rows = rows_of_stratum(s, st);
    const auto groups = tie_groups(s, rows);
    double s0 = 0;
    Vector s1 = Vector::Zero(p);
    Matrix s2 = Matrix::Zero(p, p);
    for (std::size_t g = groups.size(); g-- > 0;) {
      double d = 0;
      Vector zsum = Vector::Zero(p);
      double esum = 0;
      for (std::size_t j = groups[g].first; j < groups[g].second; ++j) {
        const auto i = static_cast<Eigen::Index>(rows[j]);
        const double w = std::exp(eta(i));
        s0 += w;
        s1 += w * z.row(i).transpose();
        s2 += w * z.row(i).transpose() * z.row(i);
        if (s.event[rows[j]] == 1.0) {
          d += 1;
          zsum += z.row(i).transpose();
          esum += eta(i);
        }
      }
      if (d == 0) continue;
      const Vector zbar = s1 / s0;
      out.loglik += esum - d * std::log(s0);
      out.grad += zsum - d * zbar;
      out.info += d * (s2 / s0 - zbar * zbar.transpose());
    }
  }
  return out;
}

}  // namespace detail

inline double cox_partial_loglik(const SurvivalData& s, const Matrix& z, const Vector& beta) {
  return detail::partial_likelihood(s, z, beta).loglik;
}

/// Newton-Raphson for the Breslow partial likelihood with step halving.
inline CoxFit fit_cox(const SurvivalData& s, const Matrix& z, double tol = 1e-9, int max_iter = 50) {
  CoxFit f;
  f.beta = Vector::Zero(z.cols());
  if (z.cols() == 0) {
    f.converged = true;
    f.gradient = Vector::Zero(0);
    return f;
  }
  Matrix with_intercept(z.rows(), z.cols() + 1);
  with_intercept << Vector::Ones(z.rows()), z;
  Eigen::ColPivHouseholderQR<Matrix> qr(with_intercept);
  qr.setThreshold(1e-10);
  require(qr.rank() == with_intercept.cols(), ErrorCode::RankDeficient, "Cox working-model covariates are collinear");

  auto pl = detail::partial_likelihood(s, z, f.beta);
  for (int it = 0; it < max_iter; ++it) {
    f.iterations = it + 1;
    if (pl.grad.cwiseAbs().maxCoeff() < tol) {
      f.converged = true;
      break;
    }
    Eigen::LDLT<Matrix> ldlt(pl.info);
    Vector step = ldlt.solve(pl.grad);
    Vector next = f.beta + step;
    auto trial = detail::partial_likelihood(s, z, next);
    for (int half = 0; half < 40 && !(trial.loglik >= pl.loglik - 1e-12 * std::abs(pl.loglik)); ++half) {
      step *= 0.5;
      next = f.beta + step;
      trial = detail::partial_likelihood(s, z, next);
    }
    f.beta = next;
    pl = trial;
  }
  if (!f.converged && pl.grad.cwiseAbs().maxCoeff() < tol) f.converged = true;
  f.loglik = pl.loglik;
  f.gradient = pl.grad;
  require(f.converged, ErrorCode::NotConverged, "Cox working model did not converge");
  return f;
}

struct CoxScoreResult {
  double score = 0.0;
  double robust_variance = 0.0;
  double model_variance = 0.0;
  double T = 0.0;
  double p = 1.0;
  Vector beta;
  std::size_t n = 0, n_events = 0;
};

/// Score test for treatment in the Cox working model lambda(t | A, X) =
/// h(t) exp(theta A + beta'X) at theta = 0, beta = beta-hat, standardized by
/// the influence-based (Lin-Wei) variance sum_i psi_i^2 with
/// psi_i = W_theta,i - I_theta,beta I_beta,beta^{-1} W_beta,i.
inline CoxScoreResult robust_cox_score(const SurvivalData& s) {
  CoxScoreResult r;
  r.n = s.n();
  for (double e : s.event) r.n_events += static_cast<std::size_t>(e);
  require(r.n_events > 0, ErrorCode::NoEvents, "no events");
  const auto p = s.x.cols();
  const auto fit = fit_cox(s, s.x);
  r.beta = fit.beta;

  // z = (A, X)
  Matrix z(static_cast<Eigen::Index>(s.n()), p + 1);
  for (std::size_t i = 0; i < s.n(); ++i) z(static_cast<Eigen::Index>(i), 0) = s.treated[i];
  z.rightCols(p) = s.x;
  Vector full(p + 1);
  full << 0.0, fit.beta;
  const Vector eta = z * full;
  const auto q = p + 1;

  Matrix w = Matrix::Zero(static_cast<Eigen::Index>(s.n()), q);
  Matrix info = Matrix::Zero(q, q);
  Vector score = Vector::Zero(q);
  for (int st = 0; st < s.num_strata; ++st) {
    const auto rows = detail::rows_of_stratum(s, st);
    const auto groups = detail::tie_groups(s, rows);
    // Risk-set sums per group, reverse sweep.
    std::vector<double> s0(groups.size());
    std::vector<Vector> s1(groups.size());
    std::vector<Matrix> s2(groups.size());
    std::vector<double> d(groups.size(), 0.0);
    double a0 = 0;
    Vector a1 = Vector::Zero(q);
    Matrix a2 = Matrix::Zero(q, q);
    for (std::size_t g = groups.size(); g-- > 0;) {
      for (std::size_t j = groups[g].first; j < groups[g].second; ++j) {
        const auto i = static_cast<Eigen::Index>(rows[j]);
        const double e = std::exp(eta(i));
        a0 += e;
        a1 += e * z.row(i).transpose();
        a2 += e * z.row(i).transpose() * z.row(i);
        d[g] += s.event[rows[j]];
      }
      s0[g] = a0;
      s1[g] = a1;
      s2[g] = a2;
    }
    double c0 = 0;
    Vector c1 = Vector::Zero(q);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const Vector zbar = s1[g] / s0[g];
      if (d[g] > 0) {
        info += d[g] * (s2[g] / s0[g] - zbar * zbar.transpose());
        c0 += d[g] / s0[g];
        c1 += zbar * (d[g] / s0[g]);
      }
      for (std::size_t j = groups[g].first; j < groups[g].second; ++j) {
        const auto i = static_cast<Eigen::Index>(rows[j]);
        const Vector zi = z.row(i).transpose();
        Vector wi = -std::exp(eta(i)) * (zi * c0 - c1);
        if (s.event[rows[j]] == 1.0) {
          wi += zi - zbar;
          score += zi - zbar;
        }
        w.row(i) = wi.transpose();
      }
    }
  }
  r.score = score(0);
  Vector h = Vector::Zero(p);
  double model = info(0, 0);
  if (p > 0) {
    const Matrix ibb = info.bottomRightCorner(p, p);
    const Vector ibt = info.block(1, 0, p, 1);
    h = ibb.ldlt().solve(ibt);
    model -= ibt.dot(h);
  }
  std::vector<double> psi2;
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const double psi = w(i, 0) - (p > 0 ? w.row(i).tail(p).dot(h) : 0.0);
    psi2.push_back(psi * psi);
  }
  r.robust_variance = pairwise_sum(psi2);
  r.model_variance = model;
  require(r.robust_variance > 0.0, ErrorCode::DegenerateVariance, "robust score variance is not positive");
  r.T = r.score / std::sqrt(r.robust_variance);
  r.p = two_sided_p(r.T);
  return r;
}

inline CoxScoreResult robust_cox_score(const TrialDataset& data, const SurvivalOptions& opt = {}) {
  return robust_cox_score(prepare(data, opt));
}

// ---------------------------------------------------------------------------
// Marginal hazard ratio
// ---------------------------------------------------------------------------

struct HRResult {
  double theta = 0.0;
  double hr = 1.0;
  double se = 0.0;
  double ci_low = 0.0, ci_high = 0.0;  // for theta
  bool stratified = false;
  bool adjusted = false;
  int iterations = 0;
  double bracket_low = 0.0, bracket_high = 0.0;
};

namespace detail {
inline double adjusted_score(const SurvivalData& s, double theta, ScoreParts* parts_out = nullptr,
                             Adjustment* adj_out = nullptr) {
  auto parts = score_parts(s, theta);
  double u = parts.U;
  if (s.x.cols() > 0) {
    auto adj = adjust(s, parts.unsigned_scores);
    u -= adj.term;
    if (adj_out) *adj_out = std::move(adj);
  }
  if (parts_out) *parts_out = std::move(parts);
  return u;
}
}  // namespace detail

/// Log marginal hazard ratio solving U_CL(theta) = 0, where the null event
/// allocation R_1/R is replaced by R_1 e^theta / (R_1 e^theta + R_0). Without
/// covariates or strata this is the treatment-only Cox estimate. Bisection
/// on an expanding bracket starting at [-2, 2], capped at |theta| = 10.
inline HRResult marginal_hr(const SurvivalData& s, double alpha = 0.05) {
  std::size_t events = 0;
  for (double e : s.event) events += static_cast<std::size_t>(e);
  require(events > 0, ErrorCode::NoEvents, "no events");
  HRResult r;
  r.stratified = s.num_strata > 1;
  r.adjusted = s.x.cols() > 0;

  double lo = -2.0, hi = 2.0;
  double ulo = detail::adjusted_score(s, lo), uhi = detail::adjusted_score(s, hi);
  while (ulo * uhi > 0.0) {
    if (lo <= -10.0 && hi >= 10.0) fail(ErrorCode::NoRoot, "score has no sign change for |theta| <= 10");
    lo = std::max(-10.0, lo * 2.0);
    hi = std::min(10.0, hi * 2.0);
    ulo = detail::adjusted_score(s, lo);
    uhi = detail::adjusted_score(s, hi);
  }
  r.bracket_low = lo;
  r.bracket_high = hi;
  double theta = 0.0;
  if (ulo == 0.0) {
    theta = lo;
  } else if (uhi == 0.0) {
    theta = hi;
  } else {
    while (hi - lo > 1e-10 && r.iterations < 200) {
      ++r.iterations;
      const double mid = 0.5 * (lo + hi);
      const double um = detail::adjusted_score(s, mid);
      if (um == 0.0) {
        lo = hi = mid;
        break;
      }
      if ((um > 0.0) == (ulo > 0.0)) {
        lo = mid;
        ulo = um;
      } else {
        hi = mid;
      }
    }
    theta = 0.5 * (lo + hi);
  }
  r.theta = theta;
  r.hr = std::exp(theta);

  detail::ScoreParts parts;
  detail::Adjustment adj;
  detail::adjusted_score(s, theta, &parts, &adj);
  std::vector<double> psi2;
  for (std::size_t i = 0; i < s.n(); ++i) {
    const double psi = parts.signed_scores[i] - (adj.per_subject.empty() ? 0.0 : adj.per_subject[i]);
    psi2.push_back(psi * psi);
  }
  require(parts.info > 0.0, ErrorCode::DegenerateVariance, "no information about the hazard ratio");
  r.se = std::sqrt(pairwise_sum(psi2)) / parts.info;
  require(r.se > 0.0, ErrorCode::DegenerateVariance, "hazard ratio standard error is zero");
  const double q = normal_quantile(1.0 - alpha / 2.0);
  r.ci_low = theta - q * r.se;
  r.ci_high = theta + q * r.se;
  return r;
}

inline HRResult marginal_hr(const TrialDataset& data, const SurvivalOptions& opt = {}, double alpha = 0.05) {
  return marginal_hr(prepare(data, opt), alpha);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const LogrankResult& r) {
  return {{"variant", to_string(r.variant)}, {"U", r.U}, {"sigma", r.sigma}, {"T", r.T}, {"p", r.p},
          {"n_events", r.n_events},          {"n", r.n}};
}

inline nlohmann::json to_json(const CoxScoreResult& r) {
  std::vector<double> beta(r.beta.data(), r.beta.data() + r.beta.size());
  return {{"variant", "robust_cox_score"},
          {"U", r.score},
          {"sigma", std::sqrt(r.robust_variance / static_cast<double>(r.n))},
          {"T", r.T},
          {"p", r.p},
          {"model_variance", r.model_variance},
          {"robust_variance", r.robust_variance},
          {"beta", beta},
          {"n_events", r.n_events},
          {"n", r.n}};
}

inline void add_hr(nlohmann::json& j, const HRResult& h) {
  j["theta"] = h.theta;
  j["hr"] = h.hr;
  j["se"] = h.se;
  j["ci"] = {h.ci_low, h.ci_high};
  j["hr_ci"] = {std::exp(h.ci_low), std::exp(h.ci_high)};
}

}  // namespace covadj::survival
