#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "analysis.hpp"
#include "error.hpp"
#include "numeric.hpp"
#include "randomization.hpp"
#include "rng.hpp"
#include "trial_data.hpp"

/// Data-generating processes and Monte Carlo loops.
namespace covadj::simulate {

enum class Dist { Normal, Uniform, Bernoulli };

struct CovariateGen {
  std::string name;
  Dist dist = Dist::Normal;
  double a = 0.0;  // normal mean / uniform min / bernoulli p
  double b = 1.0;  // normal sd / uniform max
};

/// Stratum level = number of cutpoints <= x, giving levels "0".."m".
struct StratumRule {
  std::string name;
  std::string covariate;
  std::vector<double> cutpoints;
};

enum class Transform { Identity, Square, Cube, Abs, Exp, Sin, Step };

/// coef * f(x[covariate]) * x[times], the last factor only when `times` is set.
struct Term {
  std::string covariate;
  Transform transform = Transform::Identity;
  double coef = 0.0;
  std::string times;
};

enum class OutcomeModel { Linear, Logistic, Poisson, Weibull, MarginalPH };

struct ArmModel {
  double intercept = 0.0;
  std::vector<Term> terms;
  double sd = 1.0;     // linear noise
  double shape = 1.0;  // weibull
};

struct Censoring {
  std::vector<double> rates;  // per arm; 0 means no random censoring
  std::vector<Term> terms;    // rate multiplier exp(sum of terms)
  double admin = std::numeric_limits<double>::infinity();
};

struct DGPSpec {
  std::size_t n = 0;
  std::vector<CovariateGen> covariates;
  std::vector<StratumRule> strata;
  OutcomeModel model = OutcomeModel::Linear;
  std::vector<ArmModel> arms;
  // marginal_ph only: T_a ~ Exp(rate * exp(log_hr * a)) marginally, coupled
  // to the standardized linear score of `score_terms` by a normal copula.
  double rate = 1.0, log_hr = 0.0, rho = 0.0;
  std::vector<Term> score_terms;
  std::optional<Censoring> censoring;
  randomization::Scheme scheme = randomization::Simple{{0.5, 0.5}};
  nlohmann::json source;  // the parsed document, echoed into reports

  std::size_t k() const { return model == OutcomeModel::MarginalPH ? 2 : arms.size(); }
  bool survival() const { return model == OutcomeModel::Weibull || model == OutcomeModel::MarginalPH; }
};

namespace detail {

inline Transform parse_transform(const std::string& s) {
  if (s == "identity") return Transform::Identity;
  if (s == "square") return Transform::Square;
  if (s == "cube") return Transform::Cube;
  if (s == "abs") return Transform::Abs;
  if (s == "exp") return Transform::Exp;
  if (s == "sin") return Transform::Sin;
  if (s == "step") return Transform::Step;
  fail(ErrorCode::InvalidSpec, "unknown transform '" + s + "'");
}

inline double apply(Transform t, double x) {
  switch (t) {
    case Transform::Identity: return x;
    case Transform::Square: return x * x;
    case Transform::Cube: return x * x * x;
    case Transform::Abs: return std::abs(x);
    case Transform::Exp: return std::exp(x);
    case Transform::Sin: return std::sin(x);
    case Transform::Step: return x > 0.0 ? 1.0 : 0.0;
  }
  return x;
}

inline std::size_t covariate_index(const DGPSpec& d, const std::string& name) {
  for (std::size_t j = 0; j < d.covariates.size(); ++j)
    if (d.covariates[j].name == name) return j;
  fail(ErrorCode::InvalidSpec, "unknown covariate '" + name + "'");
}

inline std::vector<Term> parse_terms(const DGPSpec& d, const nlohmann::json& arm) {
  std::vector<Term> terms;
  if (arm.contains("coefficients")) {
    const auto c = arm.at("coefficients").get<std::vector<double>>();
    require(c.size() == d.covariates.size(), ErrorCode::InvalidSpec,
            "coefficient list has " + std::to_string(c.size()) + " entries for " +
                std::to_string(d.covariates.size()) + " covariates");
    for (std::size_t j = 0; j < c.size(); ++j)
      if (c[j] != 0.0) terms.push_back({d.covariates[j].name, Transform::Identity, c[j], {}});
  }
  for (const auto& t : arm.value("terms", nlohmann::json::array())) {
    Term term{t.at("covariate").get<std::string>(), parse_transform(t.value("transform", std::string("identity"))),
              t.at("coef").get<double>(), t.value("times", std::string{})};
    covariate_index(d, term.covariate);
    if (!term.times.empty()) covariate_index(d, term.times);
    terms.push_back(std::move(term));
  }
  return terms;
}

inline double linear_score(const DGPSpec& d, const std::vector<Term>& terms, std::span<const double> x) {
  double s = 0.0;
  for (const auto& t : terms) {
    double v = t.coef * apply(t.transform, x[covariate_index(d, t.covariate)]);
    if (!t.times.empty()) v *= x[covariate_index(d, t.times)];
    s += v;
  }
  return s;
}

inline double expit(double eta) { return 1.0 / (1.0 + std::exp(-eta)); }

}  // namespace detail

inline std::string to_string(OutcomeModel m) {
  switch (m) {
    case OutcomeModel::Linear: return "linear";
    case OutcomeModel::Logistic: return "logistic";
    case OutcomeModel::Poisson: return "poisson";
    case OutcomeModel::Weibull: return "weibull";
    case OutcomeModel::MarginalPH: return "marginal_ph";
  }
  return "?";
}

/// Parses and validates a DGP document.
inline DGPSpec dgp_from_json(const nlohmann::json& j) {
  try {
    DGPSpec d;
    d.source = j;
    const long long n = j.at("n").get<long long>();
    require(n >= 2, ErrorCode::InvalidSpec, "n must be at least 2");
    d.n = static_cast<std::size_t>(n);

    for (const auto& c : j.value("covariates", nlohmann::json::array())) {
      CovariateGen g;
      g.name = c.at("name").get<std::string>();
      const auto dist = c.at("dist").get<std::string>();
      if (dist == "normal") {
        g = {g.name, Dist::Normal, c.value("mean", 0.0), c.value("sd", 1.0)};
        require(g.b > 0.0, ErrorCode::InvalidSpec, "normal sd must be positive");
      } else if (dist == "uniform") {
        g = {g.name, Dist::Uniform, c.value("min", 0.0), c.value("max", 1.0)};
        require(g.b > g.a, ErrorCode::InvalidSpec, "uniform needs min < max");
      } else if (dist == "bernoulli") {
        g = {g.name, Dist::Bernoulli, c.value("p", 0.5), 0.0};
        require(g.a > 0.0 && g.a < 1.0, ErrorCode::InvalidSpec, "bernoulli p must be in (0,1)");
      } else {
        fail(ErrorCode::InvalidSpec, "unknown covariate distribution '" + dist + "'");
      }
      for (const auto& other : d.covariates)
        require(other.name != g.name, ErrorCode::InvalidSpec, "duplicate covariate '" + g.name + "'");
      d.covariates.push_back(std::move(g));
    }

    for (const auto& s : j.value("strata", nlohmann::json::array())) {
      StratumRule r{s.at("name").get<std::string>(), s.at("covariate").get<std::string>(),
                    s.at("cutpoints").get<std::vector<double>>()};
      detail::covariate_index(d, r.covariate);
      require(!r.cutpoints.empty(), ErrorCode::InvalidSpec, "stratum '" + r.name + "' needs cutpoints");
      require(std::is_sorted(r.cutpoints.begin(), r.cutpoints.end()) &&
                  std::adjacent_find(r.cutpoints.begin(), r.cutpoints.end()) == r.cutpoints.end(),
              ErrorCode::InvalidSpec, "cutpoints must be strictly increasing");
      for (const auto& c : d.covariates)
        require(c.name != r.name, ErrorCode::InvalidSpec, "stratum name '" + r.name + "' clashes with a covariate");
      d.strata.push_back(std::move(r));
    }

    const auto& out = j.at("outcome");
    const auto model = out.at("model").get<std::string>();
    if (model == "linear") d.model = OutcomeModel::Linear;
    else if (model == "logistic") d.model = OutcomeModel::Logistic;
    else if (model == "poisson") d.model = OutcomeModel::Poisson;
    else if (model == "weibull") d.model = OutcomeModel::Weibull;
    else if (model == "marginal_ph") d.model = OutcomeModel::MarginalPH;
    else fail(ErrorCode::InvalidSpec, "unknown outcome model '" + model + "'");

    if (d.model == OutcomeModel::MarginalPH) {
      d.rate = out.at("rate").get<double>();
      d.log_hr = out.value("log_hr", 0.0);
      d.rho = out.value("rho", 0.0);
      d.score_terms = detail::parse_terms(d, out);
      require(d.rate > 0.0, ErrorCode::InvalidSpec, "rate must be positive");
      require(d.rho >= 0.0 && d.rho < 1.0, ErrorCode::InvalidSpec, "rho must be in [0,1)");
      for (const auto& t : d.score_terms) {
        const auto& c = d.covariates[detail::covariate_index(d, t.covariate)];
        require(t.transform == Transform::Identity && t.times.empty() && c.dist == Dist::Normal,
                ErrorCode::InvalidSpec, "marginal_ph score terms must be identity terms in normal covariates");
      }
      require(d.rho == 0.0 || !d.score_terms.empty(), ErrorCode::InvalidSpec, "rho > 0 needs score terms");
    } else {
      for (const auto& a : out.at("arms")) {
        ArmModel m;
        m.intercept = a.value("intercept", 0.0);
        m.terms = detail::parse_terms(d, a);
        m.sd = a.value("sd", 1.0);
        m.shape = a.value("shape", 1.0);
        require(m.sd >= 0.0, ErrorCode::InvalidSpec, "sd must be non-negative");
        require(m.shape > 0.0, ErrorCode::InvalidSpec, "Weibull shape must be positive");
        d.arms.push_back(std::move(m));
      }
      require(d.arms.size() >= 2, ErrorCode::InvalidSpec, "need outcome models for at least two arms");
    }

    if (j.contains("censoring")) {
      require(d.survival(), ErrorCode::InvalidSpec, "censoring applies to survival outcomes only");
      const auto& c = j.at("censoring");
      Censoring cens;
      cens.rates = c.value("rates", std::vector<double>(d.k(), 0.0));
      require(cens.rates.size() == d.k(), ErrorCode::InvalidSpec, "need one censoring rate per arm");
      for (double r : cens.rates) require(r >= 0.0, ErrorCode::InvalidSpec, "censoring rates must be non-negative");
      cens.terms = detail::parse_terms(d, c);
      if (c.contains("admin")) {
        cens.admin = c.at("admin").get<double>();
        require(cens.admin > 0.0, ErrorCode::InvalidSpec, "administrative censoring time must be positive");
      }
      d.censoring = std::move(cens);
    }

    nlohmann::json scheme = j.value("scheme", nlohmann::json{{"type", "simple"}});
    if (scheme.value("type", std::string{}) == "pocock_simon" && !scheme.contains("weights"))
      scheme["weights"] = std::vector<double>(std::max<std::size_t>(d.strata.size(), 1), 1.0);
    d.scheme = randomization::scheme_from_json(scheme, d.k());
    randomization::validate(d.scheme, d.k(), std::max<std::size_t>(d.strata.size(), 1));
    return d;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidSpec, std::string("DGP spec: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidSpec) throw;
    fail(ErrorCode::InvalidSpec, e.what());
  }
}

namespace detail {

inline std::vector<double> draw_covariates(const DGPSpec& d, CounterRng& rng) {
  std::vector<double> x(d.covariates.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    const auto& c = d.covariates[j];
    switch (c.dist) {
      case Dist::Normal: x[j] = rng.normal(c.a, c.b); break;
      case Dist::Uniform: x[j] = rng.uniform(c.a, c.b); break;
      case Dist::Bernoulli: x[j] = rng.bernoulli(c.a) ? 1.0 : 0.0; break;
    }
  }
  return x;
}

inline int stratum_level(const StratumRule& r, double x) {
  return static_cast<int>(std::upper_bound(r.cutpoints.begin(), r.cutpoints.end(), x) - r.cutpoints.begin());
}

// Mean and sd of the marginal_ph linear score (normal covariates only).
inline std::pair<double, double> score_moments(const DGPSpec& d) {
  double m = 0.0, v = 0.0;
  for (const auto& t : d.score_terms) {
    const auto& c = d.covariates[covariate_index(d, t.covariate)];
    m += t.coef * c.a;
    v += t.coef * t.coef * c.b * c.b;
  }
  return {m, std::sqrt(v)};
}

}  // namespace detail

/// Draws one trial. Separate counter streams are used for covariates,
/// assignment, outcomes and censoring, so changing e.g. the scheme leaves the
/// covariates untouched.
inline TrialDataset generate(const DGPSpec& d, std::uint64_t seed) {
  const std::size_t n = d.n, k = d.k();
  CounterRng cov_rng(derive_seed(seed, 0)), out_rng(derive_seed(seed, 2)), cens_rng(derive_seed(seed, 3));

  std::vector<std::vector<double>> x(n);
  for (auto& row : x) row = detail::draw_covariates(d, cov_rng);

  randomization::Factors factors;
  for (const auto& r : d.strata) {
    const auto j = detail::covariate_index(d, r.covariate);
    std::vector<int> lv(n);
    for (std::size_t i = 0; i < n; ++i) lv[i] = detail::stratum_level(r, x[i][j]);
    factors.levels.push_back(std::move(lv));
  }
  const bool no_strata = factors.levels.empty();
  if (no_strata) factors.levels.push_back(std::vector<int>(n, 0));
  const auto arms = randomization::assign(d.scheme, factors, k, derive_seed(seed, 1)).arms;

  std::vector<double> y(n), time(n), event(n);
  const auto [score_mean, score_sd] = detail::score_moments(d);
  for (std::size_t i = 0; i < n; ++i) {
    const int a = arms[i];
    double t = 0.0;
    if (d.model == OutcomeModel::MarginalPH) {
      const double z = d.rho > 0.0 ? (detail::linear_score(d, d.score_terms, x[i]) - score_mean) / score_sd : 0.0;
      const double v = normal_cdf(d.rho * z + std::sqrt(1.0 - d.rho * d.rho) * out_rng.normal());
      t = -std::log(v) / (d.rate * std::exp(d.log_hr * a));
    } else {
      const auto& m = d.arms[a];
      const double eta = m.intercept + detail::linear_score(d, m.terms, x[i]);
      switch (d.model) {
        case OutcomeModel::Linear: y[i] = eta + m.sd * out_rng.normal(); break;
        case OutcomeModel::Logistic: y[i] = out_rng.bernoulli(detail::expit(eta)) ? 1.0 : 0.0; break;
        case OutcomeModel::Poisson: y[i] = static_cast<double>(out_rng.poisson(std::exp(eta))); break;
        case OutcomeModel::Weibull: t = std::pow(out_rng.exponential(1.0) / std::exp(eta), 1.0 / m.shape); break;
        case OutcomeModel::MarginalPH: break;
      }
    }
    if (d.survival()) {
      double c = std::numeric_limits<double>::infinity();
      if (d.censoring) {
        const auto& cs = *d.censoring;
        const double rate = cs.rates[a] * std::exp(detail::linear_score(d, cs.terms, x[i]));
        const double e = cens_rng.exponential(1.0);
        if (rate > 0.0) c = e / rate;
        c = std::min(c, cs.admin);
      }
      t = std::max(t, std::numeric_limits<double>::min());
      time[i] = std::min(t, c);
      event[i] = t <= c ? 1.0 : 0.0;
    }
  }

  std::vector<Column> cols;
  std::vector<std::string> arm_labels;
  for (std::size_t a = 0; a < k; ++a) arm_labels.push_back(std::to_string(a));
  cols.push_back(categorical_column("arm", Role::Arm, arm_labels, arms));
  if (d.survival()) {
    cols.push_back(numeric_column("time", Role::Time, Kind::Real, std::move(time)));
    cols.push_back(numeric_column("event", Role::Event, Kind::Binary, std::move(event)));
  } else {
    const Kind kind = d.model == OutcomeModel::Logistic  ? Kind::Binary
                      : d.model == OutcomeModel::Poisson ? Kind::Count
                                                         : Kind::Real;
    cols.push_back(numeric_column("y", Role::Outcome, kind, std::move(y)));
  }
  for (std::size_t j = 0; j < d.covariates.size(); ++j) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = x[i][j];
    const Kind kind = d.covariates[j].dist == Dist::Bernoulli ? Kind::Binary : Kind::Real;
    cols.push_back(numeric_column(d.covariates[j].name, Role::Covariate, kind, std::move(v)));
  }
  if (!no_strata) {
    for (std::size_t s = 0; s < d.strata.size(); ++s) {
      std::vector<std::string> levels;
      for (std::size_t l = 0; l <= d.strata[s].cutpoints.size(); ++l) levels.push_back(std::to_string(l));
      cols.push_back(categorical_column(d.strata[s].name, Role::Stratum, levels, factors.levels[s]));
    }
  }
  return TrialDataset::from_columns(std::move(cols));
}

/// Population values implied by the DGP.
struct Truth {
  std::vector<double> theta;    // E[Y_a] per arm; NaN for survival outcomes
  std::optional<double> log_hr; // marginal log hazard ratio (arm 1 vs arm 0) when defined
  std::string method;           // quadrature | monte_carlo | construction | none
};

namespace detail {

// E[f(X_S)] over the covariates in S by a tensor-product Gauss rule; other
// covariates are irrelevant to f and stay at 0.
template <class F>
double integrate(const DGPSpec& d, const std::vector<std::size_t>& dims, int points, F&& f) {
  std::vector<QuadratureRule> rules;
  for (auto j : dims) {
    const auto& c = d.covariates[j];
    QuadratureRule r;
    switch (c.dist) {
      case Dist::Normal:
        r = gauss_hermite_normal(points);
        for (auto& v : r.nodes) v = c.a + c.b * v;
        break;
      case Dist::Uniform:
        r = gauss_legendre_unit(points);
        for (auto& v : r.nodes) v = c.a + (c.b - c.a) * v;
        break;
      case Dist::Bernoulli: r = {{0.0, 1.0}, {1.0 - c.a, c.a}}; break;
    }
    rules.push_back(std::move(r));
  }
  std::vector<double> x(d.covariates.size(), 0.0);
  std::vector<std::size_t> idx(dims.size(), 0);
  std::vector<double> terms;
  while (true) {
    double w = 1.0;
    for (std::size_t s = 0; s < dims.size(); ++s) {
      x[dims[s]] = rules[s].nodes[idx[s]];
      w *= rules[s].weights[idx[s]];
    }
    terms.push_back(w * f(std::span<const double>(x)));
    std::size_t s = 0;
    while (s < dims.size() && ++idx[s] == rules[s].nodes.size()) idx[s++] = 0;
    if (s == dims.size()) break;
  }
  return pairwise_sum(terms);
}

inline std::vector<std::size_t> used_covariates(const DGPSpec& d, const std::vector<Term>& terms) {
  std::vector<std::size_t> dims;
  for (const auto& t : terms) {
    dims.push_back(covariate_index(d, t.covariate));
    if (!t.times.empty()) dims.push_back(covariate_index(d, t.times));
  }
  std::sort(dims.begin(), dims.end());
  dims.erase(std::unique(dims.begin(), dims.end()), dims.end());
  return dims;
}

inline bool same_arm_models(const std::vector<ArmModel>& arms) {
  auto key = [](const ArmModel& m) {
    nlohmann::json j{{"i", m.intercept}, {"sd", m.sd}, {"shape", m.shape}};
    for (const auto& t : m.terms)
      j["t"].push_back({t.covariate, static_cast<int>(t.transform), t.coef, t.times});
    return j;
  };
  for (const auto& m : arms)
    if (key(m) != key(arms.front())) return false;
  return true;
}

}  // namespace detail

inline constexpr std::size_t kTruthDraws = 10'000'000;

/// Computes the truth before any replicate is drawn: tensor Gauss quadrature
/// (40 nodes per dimension up to 3 dimensions, 20 for 4) or, above that,
/// 10^7 direct draws from the covariate law.
inline Truth compute_truth(const DGPSpec& d, std::uint64_t seed = 0) {
  Truth t;
  const std::size_t k = d.k();
  t.theta.assign(k, std::numeric_limits<double>::quiet_NaN());
  if (d.model == OutcomeModel::MarginalPH) {
    t.log_hr = d.log_hr;
    t.method = "construction";
    return t;
  }
  if (d.model == OutcomeModel::Weibull) {
    if (detail::same_arm_models(d.arms)) {
      t.log_hr = 0.0;
      t.method = "construction";
    } else {
      t.method = "none";
    }
    return t;
  }
  auto mean_fn = [&](std::size_t a) {
    return [&d, a](std::span<const double> x) {
      const auto& m = d.arms[a];
      const double eta = m.intercept + detail::linear_score(d, m.terms, x);
      switch (d.model) {
        case OutcomeModel::Logistic: return detail::expit(eta);
        case OutcomeModel::Poisson: return std::exp(eta);
        default: return eta;
      }
    };
  };
  std::size_t max_dims = 0;
  for (std::size_t a = 0; a < k; ++a) max_dims = std::max(max_dims, detail::used_covariates(d, d.arms[a].terms).size());
  if (max_dims <= 4) {
    t.method = "quadrature";
    for (std::size_t a = 0; a < k; ++a) {
      const auto dims = detail::used_covariates(d, d.arms[a].terms);
      t.theta[a] = detail::integrate(d, dims, dims.size() <= 3 ? 40 : 20, mean_fn(a));
    }
    return t;
  }
  t.method = "monte_carlo";
  CounterRng rng(derive_seed(seed, 0xFFFF'FFFF'FFFF'FFFFULL));
  // blocked pairwise sums keep memory flat
  constexpr std::size_t block = 100'000;
  std::vector<std::vector<double>> blocks(k), cur(k);
  for (std::size_t r = 0; r < kTruthDraws; ++r) {
    const auto x = detail::draw_covariates(d, rng);
    for (std::size_t a = 0; a < k; ++a) {
      cur[a].push_back(mean_fn(a)(x));
      if (cur[a].size() == block) {
        blocks[a].push_back(pairwise_sum(cur[a]));
        cur[a].clear();
      }
    }
  }
  for (std::size_t a = 0; a < k; ++a) {
    if (!cur[a].empty()) blocks[a].push_back(pairwise_sum(cur[a]));
    t.theta[a] = pairwise_sum(blocks[a]) / static_cast<double>(kTruthDraws);
  }
  return t;
}

/// Population value of the quantity an analysis estimates, when defined.
inline std::optional<double> analysis_truth(const Truth& t, const analysis::Spec& s) {
  using analysis::Type;
  switch (s.type) {
    case Type::Glm:
    case Type::MH: {
      const auto k = static_cast<int>(t.theta.size());
      if (s.reference < 0 || s.treatment < 0 || s.reference >= k || s.treatment >= k) return std::nullopt;
      const double r = t.theta[s.reference], a = t.theta[s.treatment];
      if (!std::isfinite(r) || !std::isfinite(a)) return std::nullopt;
      if (s.type == Type::MH) return a - r;
      switch (s.contrast) {
        case aipw::ContrastKind::Difference: return a - r;
        case aipw::ContrastKind::LogRiskRatio: return std::log(a) - std::log(r);
        case aipw::ContrastKind::LogOddsRatio: return std::log(a / (1 - a)) - std::log(r / (1 - r));
        case aipw::ContrastKind::Custom: return std::nullopt;
      }
      return std::nullopt;
    }
    case Type::HazardRatio:
      if (t.log_hr && s.treatment == 1 && s.reference == 0) return *t.log_hr;
      if (t.log_hr && s.treatment == 0 && s.reference == 1) return -*t.log_hr;
      return std::nullopt;
    default: return std::nullopt;
  }
}

struct Summary {
  std::string name;
  std::size_t reps_ok = 0, failures = 0;
  double rejection_rate = 0.0;
  double mean_estimate = 0.0;
  double empirical_sd = 0.0;  // 0 when fewer than two replicates succeed
  double mean_se = std::numeric_limits<double>::quiet_NaN();
  double mean_sigma = 0.0;
  std::optional<double> truth, bias, coverage;
};

struct MCReport {
  std::size_t reps = 0;
  std::uint64_t seed = 0;
  double alpha = 0.05;
  Truth truth;
  std::vector<Summary> analyses;
  // records[a][r]: replicate r of analysis a; kept only on request, and
  // entries of failed replicates are left value-initialized.
  std::vector<std::vector<analysis::Outcome>> records;
  std::vector<std::vector<bool>> ok;
};

struct MCOptions {
  unsigned threads = 0;            // 0 means hardware concurrency
  std::size_t failure_budget = 0;  // failed replicate analyses tolerated before aborting
  bool keep_records = false;
};

/// Runs `reps` replicates. Replicate r uses seed derive_seed(seed, r), and
/// every aggregate is a pairwise sum over replicates in index order, so the
/// report does not depend on the thread count.
inline MCReport run_mc(const DGPSpec& dgp, std::vector<analysis::Spec> analyses, std::size_t reps, double alpha,
                       std::uint64_t seed, const MCOptions& opt = {}) {
  require(reps >= 1, ErrorCode::InvalidSpec, "reps must be at least 1");
  require(alpha > 0.0 && alpha < 1.0, ErrorCode::InvalidSpec, "alpha must be in (0,1)");
  require(!analyses.empty(), ErrorCode::InvalidSpec, "no analyses given");
  for (auto& a : analyses) a.alpha = alpha;

  MCReport report;
  report.reps = reps;
  report.seed = seed;
  report.alpha = alpha;
  report.truth = compute_truth(dgp, seed);

  const std::size_t m = analyses.size();
  std::vector<std::vector<analysis::Outcome>> rec(m, std::vector<analysis::Outcome>(reps));
  std::vector<std::vector<char>> good(m, std::vector<char>(reps, 0));

  std::atomic<std::size_t> next{0}, failures{0};
  std::mutex err_mu;
  std::optional<std::pair<std::size_t, std::string>> first_error;
  auto note_failure = [&](std::size_t r, const std::string& what) {
    failures.fetch_add(1);
    std::lock_guard lock(err_mu);
    if (!first_error || r < first_error->first) first_error = {r, what};
  };

  auto worker = [&] {
    while (failures.load() <= opt.failure_budget) {
      const std::size_t r = next.fetch_add(1);
      if (r >= reps) return;
      std::optional<TrialDataset> data;
      try {
        data.emplace(generate(dgp, derive_seed(seed, r)));
      } catch (const Error& e) {
        for (std::size_t a = 0; a < m; ++a) note_failure(r, "replicate " + std::to_string(r) + ": " + e.what());
        continue;
      }
      for (std::size_t a = 0; a < m; ++a) {
        try {
          rec[a][r] = analysis::run(*data, analyses[a]);
          good[a][r] = 1;
        } catch (const Error& e) {
          note_failure(r, "replicate " + std::to_string(r) + ", analysis '" + analyses[a].name + "': " + e.what());
        }
      }
    }
  };

  unsigned threads = opt.threads ? opt.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, reps));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failures.load() > opt.failure_budget)
    fail(ErrorCode::FailureBudgetExceeded, std::to_string(failures.load()) + " failed analyses exceed budget " +
                                               std::to_string(opt.failure_budget) + "; first: " + first_error->second);

  const double q = normal_quantile(1.0 - alpha / 2.0);
  for (std::size_t a = 0; a < m; ++a) {
    Summary s;
    s.name = analyses[a].name;
    s.truth = analysis_truth(report.truth, analyses[a]);
    std::vector<double> est, se, sig, rej, cov;
    for (std::size_t r = 0; r < reps; ++r) {
      if (!good[a][r]) {
        ++s.failures;
        continue;
      }
      const auto& o = rec[a][r];
      est.push_back(o.estimate);
      sig.push_back(o.sigma);
      rej.push_back(o.p < alpha ? 1.0 : 0.0);
      if (o.has_se) se.push_back(o.se);
      if (o.has_se && s.truth) cov.push_back(std::abs(o.estimate - *s.truth) <= q * o.se ? 1.0 : 0.0);
    }
    s.reps_ok = est.size();
    if (s.reps_ok) {
      s.mean_estimate = mean(est);
      s.rejection_rate = mean(rej);
      s.mean_sigma = mean(sig);
      s.empirical_sd = s.reps_ok > 1 ? std::sqrt(sample_cov(est, est)) : 0.0;
      if (!se.empty()) s.mean_se = mean(se);
      if (s.truth) s.bias = s.mean_estimate - *s.truth;
      if (!cov.empty()) s.coverage = mean(cov);
    }
    report.analyses.push_back(std::move(s));
  }
  if (opt.keep_records) {
    report.records = std::move(rec);
    for (const auto& g : good) report.ok.emplace_back(g.begin(), g.end());
  }
  return report;
}

namespace detail {
inline nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
inline nlohmann::json num(const std::optional<double>& v) { return v ? num(*v) : nlohmann::json(nullptr); }
}  // namespace detail

inline nlohmann::json to_json(const Truth& t) {
  nlohmann::json theta = nlohmann::json::array();
  for (double v : t.theta) theta.push_back(detail::num(v));
  return {{"theta", theta}, {"log_hr", detail::num(t.log_hr)}, {"method", t.method}};
}

inline nlohmann::json to_json(const MCReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : r.analyses) {
    rows.push_back({{"name", s.name},
                    {"reps_ok", s.reps_ok},
                    {"failures", s.failures},
                    {"rejection_rate", s.rejection_rate},
                    {"mean_estimate", s.mean_estimate},
                    {"truth", detail::num(s.truth)},
                    {"bias", detail::num(s.bias)},
                    {"empirical_sd", s.empirical_sd},
                    {"mean_se", detail::num(s.mean_se)},
                    {"mean_sigma", s.mean_sigma},
                    {"coverage", detail::num(s.coverage)}});
  }
  return {{"reps", r.reps}, {"seed", r.seed}, {"alpha", r.alpha}, {"truth", to_json(r.truth)}, {"analyses", rows}};
}

}  // namespace covadj::simulate
