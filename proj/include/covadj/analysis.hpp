#pragma once

#include <cmath>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "aipw.hpp"
#include "error.hpp"
#include "glm.hpp"
#include "mantel_haenszel.hpp"
#include "survival.hpp"
#include "trial_data.hpp"

/// One named analysis of a trial dataset, shared by the CLI and the
/// Monte Carlo harness.
namespace covadj::analysis {

enum class Type { Glm, MH, Logrank, CoxScore, HazardRatio };

inline std::string to_string(Type t) {
  switch (t) {
    case Type::Glm: return "glm";
    case Type::MH: return "mh";
    case Type::Logrank: return "logrank";
    case Type::CoxScore: return "cox_score";
    case Type::HazardRatio: return "hazard_ratio";
  }
  return "?";
}

inline Type parse_type(const std::string& s) {
  if (s == "glm") return Type::Glm;
  if (s == "mh") return Type::MH;
  if (s == "logrank") return Type::Logrank;
  if (s == "cox_score") return Type::CoxScore;
  if (s == "hazard_ratio") return Type::HazardRatio;
  fail(ErrorCode::InvalidSpec, "unknown analysis type '" + s + "'");
}

enum class Calibration { None, Linear, Joint };

inline Calibration parse_calibration(const std::string& s) {
  if (s == "none") return Calibration::None;
  if (s == "linear") return Calibration::Linear;
  if (s == "joint") return Calibration::Joint;
  fail(ErrorCode::InvalidArgument, "unknown calibration '" + s + "'");
}

inline std::string to_string(Calibration c) {
  return c == Calibration::None ? "none" : c == Calibration::Linear ? "linear" : "joint";
}

struct Spec {
  std::string name;
  Type type = Type::Glm;
  int reference = 0;
  int treatment = 1;
  double alpha = 0.05;

  // glm
  glm::Family family = glm::Family::gaussian();
  std::vector<std::string> covariates;
  bool pooled = true;
  bool interactions = false;
  bool include_strata = false;
  aipw::VarianceType variance_type = aipw::VarianceType::Type1;
  Calibration calibrate = Calibration::None;
  int k_split = 1;
  std::uint64_t seed = 0;
  aipw::ContrastKind contrast = aipw::ContrastKind::Difference;
  bool simple_randomization = true;  // attested by the caller; gates sandwich variances

  // mh
  std::string category;
  mh::Estimand estimand = mh::Estimand::ATE;

  // survival
  std::vector<std::string> adjust;
  bool stratified = false;
  std::vector<std::string> strata_columns;
};

/// Scalar summary used by the simulation harness.
struct Outcome {
  double estimate = 0.0;  // contrast, MH difference, log HR, or score numerator
  double se = 0.0;        // standard error of `estimate`; 0 for pure tests
  double stat = 0.0;      // z or T
  double p = 1.0;
  double sigma = 0.0;     // survival tests: sigma-hat
  bool has_se = false;
};

inline ModelSpec model_spec(const TrialDataset& data, const Spec& s) {
  ModelSpec m;
  m.response = data.column_with_role(Role::Outcome) ? data.column_with_role(Role::Outcome)->schema.name : "";
  m.terms = s.covariates;
  m.pooled = s.pooled;
  m.arm_interactions = s.interactions;
  m.include_strata = s.include_strata;
  return m;
}

/// Marginal means for a glm analysis (working model, optional cross-fitting
/// and calibration, or a sandwich variance).
inline aipw::MarginalEstimate marginal(const TrialDataset& data, const Spec& s) {
  const ModelSpec m = model_spec(data, s);
  if (aipw::is_sandwich(s.variance_type)) {
    require(s.family.kind == glm::FamilyKind::Gaussian, ErrorCode::UnsupportedModel,
            "sandwich variance requires a gaussian working model");
    require(s.calibrate == Calibration::None && s.k_split == 1, ErrorCode::UnsupportedModel,
            "sandwich variance excludes calibration and cross-fitting");
    return aipw::variance_sandwich(data, m, s.variance_type, s.simple_randomization);
  }
  const auto wm = aipw::crossfit_mu(data, m, s.family, s.k_split, s.seed);
  switch (s.calibrate) {
    case Calibration::Linear: return aipw::linear_calibrate(data, wm.mu, s.variance_type).estimate;
    case Calibration::Joint: return aipw::joint_calibrate(data, wm.mu, s.variance_type).estimate;
    case Calibration::None: break;
  }
  return aipw::estimate_aipw(data, wm.mu, s.variance_type);
}

inline survival::SurvivalOptions survival_options(const Spec& s) {
  survival::SurvivalOptions o;
  o.adjust = s.adjust;
  o.stratified = s.stratified;
  o.strata_columns = s.strata_columns;
  o.treatment = s.treatment;
  o.control = s.reference;
  return o;
}

inline Outcome run(const TrialDataset& data, const Spec& s) {
  Outcome out;
  switch (s.type) {
    case Type::Glm: {
      const auto est = marginal(data, s);
      const auto c = aipw::contrast(est, s.contrast, s.reference, s.treatment, s.alpha);
      out = {c.estimate, c.se, c.z, c.p, 0.0, true};
      break;
    }
    case Type::MH: {
      const auto r = mh::estimate_mh(data, s.category, s.estimand, s.treatment, s.reference, s.alpha);
      out = {r.estimate, r.se, r.z, r.p, 0.0, true};
      break;
    }
    case Type::Logrank: {
      const auto r = survival::logrank(data, survival_options(s));
      out = {r.U, 0.0, r.T, r.p, r.sigma, false};
      break;
    }
    case Type::CoxScore: {
      const auto r = survival::robust_cox_score(data, survival_options(s));
      out = {r.score, 0.0, r.T, r.p, std::sqrt(r.robust_variance / static_cast<double>(r.n)), false};
      break;
    }
    case Type::HazardRatio: {
      const auto r = survival::marginal_hr(data, survival_options(s), s.alpha);
      const double z = r.theta / r.se;
      out = {r.theta, r.se, z, two_sided_p(z), 0.0, true};
      break;
    }
  }
  return out;
}

inline Spec spec_from_json(const nlohmann::json& j) {
  try {
    Spec s;
    s.name = j.value("name", std::string{});
    s.type = parse_type(j.at("type").get<std::string>());
    if (s.name.empty()) s.name = to_string(s.type);
    s.reference = j.value("reference", 0);
    s.treatment = j.value("treatment", 1);
    s.alpha = j.value("alpha", 0.05);
    s.family = glm::Family::parse(j.value("family", std::string("gaussian")));
    s.covariates = j.value("covariates", std::vector<std::string>{});
    s.pooled = j.value("pooled", true);
    s.interactions = j.value("interactions", false);
    s.include_strata = j.value("include_strata", false);
    s.variance_type = aipw::parse_variance_type(j.value("variance_type", std::string("1")));
    s.calibrate = parse_calibration(j.value("calibrate", std::string("none")));
    s.k_split = j.value("k_split", 1);
    s.seed = j.value("seed", std::uint64_t{0});
    s.contrast = aipw::parse_contrast(j.value("contrast", std::string("difference")));
    s.simple_randomization = j.value("simple_randomization", true);
    s.category = j.value("category", std::string{});
    s.estimand = mh::parse_estimand(j.value("estimand", std::string("ATE")));
    s.adjust = j.value("adjust", std::vector<std::string>{});
    s.stratified = j.value("stratified", false);
    s.strata_columns = j.value("strata_columns", std::vector<std::string>{});
    require(s.alpha > 0.0 && s.alpha < 1.0, ErrorCode::InvalidSpec, "alpha must be in (0,1)");
    require(s.type != Type::MH || !s.category.empty(), ErrorCode::InvalidSpec, "mh analysis needs a category");
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidSpec, std::string("analysis spec: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidSpec) throw;
    fail(ErrorCode::InvalidSpec, e.what());
  }
}

inline nlohmann::json to_json(const Spec& s) {
  nlohmann::json j{{"name", s.name}, {"type", to_string(s.type)}, {"reference", s.reference},
                   {"treatment", s.treatment}, {"alpha", s.alpha}};
  switch (s.type) {
    case Type::Glm:
      j.update({{"family", s.family.name()},
                {"covariates", s.covariates},
                {"pooled", s.pooled},
                {"interactions", s.interactions},
                {"include_strata", s.include_strata},
                {"variance_type", aipw::to_string(s.variance_type)},
                {"calibrate", to_string(s.calibrate)},
                {"k_split", s.k_split},
                {"seed", s.seed},
                {"contrast", aipw::to_string(s.contrast)}});
      break;
    case Type::MH: j.update({{"category", s.category}, {"estimand", mh::to_string(s.estimand)}}); break;
    default: j.update({{"adjust", s.adjust}, {"stratified", s.stratified}, {"strata_columns", s.strata_columns}});
  }
  return j;
}

}  // namespace covadj::analysis
