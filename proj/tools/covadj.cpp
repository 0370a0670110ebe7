// covadj command-line front end: CSV in, JSON out.

#include <CLI11.hpp>

#include <covadj/covadj.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

using namespace covadj;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kValidation = 2, kNumerical = 3, kIo = 4 };

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::NotConverged:
    case ErrorCode::NoRoot:
    case ErrorCode::Separation:
    case ErrorCode::DegenerateVariance: return kNumerical;
    case ErrorCode::IoError: return kIo;
    default: return kValidation;
  }
}

int report_error(ErrorCode code, const std::string& what) {
  // Error::what() carries a "Code: " prefix; the JSON has the code separately.
  std::string msg = what;
  const std::string prefix = std::string(to_string(code)) + ": ";
  if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
  std::cerr << json{{"error", {{"code", std::string(to_string(code))}, {"message", msg}}}}.dump() << "\n";
  return exit_code(code);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::IoError, "cannot open '" + path + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const std::string& path, ErrorCode on_parse) {
  const auto text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(on_parse, "'" + path + "': " + e.what());
  }
}

void write_output(const json& j, const std::string& path) {
  const std::string text = j.dump(2) + "\n";
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::IoError, "cannot write '" + path + "'");
  out << text;
  require(static_cast<bool>(out), ErrorCode::IoError, "write to '" + path + "' failed");
}

TrialDataset load(const std::string& data_path, const std::string& schema_path) {
  const auto schema = schema_from_json(read_json(schema_path, ErrorCode::SchemaError));
  return load_dataset(read_file(data_path), schema);
}

/// "arm ~ sr", "arm ~ biased_coin", "arm ~ pb(z1, z2)", "arm ~ ps(z1)".
struct TreatmentDecl {
  std::string arm;
  std::string scheme = "sr";
  std::vector<std::string> factors;

  bool covariate_adaptive() const { return scheme == "pb" || scheme == "ps"; }
  json to_json() const { return {{"arm", arm}, {"scheme", scheme}, {"factors", factors}}; }
};

TreatmentDecl parse_treatment(const std::string& text, const TrialDataset& data) {
  static const std::regex re(R"(^\s*([^\s~]+)\s*~\s*(sr|biased_coin|pb|ps)\s*(?:\(([^)]*)\))?\s*$)");
  std::smatch m;
  require(std::regex_match(text, m, re), ErrorCode::InvalidArgument,
          "cannot parse --treatment '" + text + "'; expected 'arm ~ sr|biased_coin|pb(cols)|ps(cols)'");
  TreatmentDecl d{m[1], m[2], {}};
  std::stringstream cols(m[3].str());
  for (std::string c; std::getline(cols, c, ',');) {
    c.erase(0, c.find_first_not_of(" \t"));
    c.erase(c.find_last_not_of(" \t") + 1);
    if (!c.empty()) d.factors.push_back(c);
  }
  const Column* arm = data.column_with_role(Role::Arm);
  require(arm->schema.name == d.arm, ErrorCode::ValidationError,
          "--treatment names '" + d.arm + "' but the arm column is '" + arm->schema.name + "'");
  if (d.covariate_adaptive()) {
    require(!d.factors.empty(), ErrorCode::InvalidArgument, d.scheme + "() needs at least one column");
    for (const auto& f : d.factors) {
      require(data.has_column(f), ErrorCode::ValidationError, "declared factor '" + f + "' is not a column");
      const auto k = data.column(f).schema.kind;
      require(k == Kind::Categorical || k == Kind::Binary, ErrorCode::ValidationError,
              "declared factor '" + f + "' is not categorical");
    }
  } else {
    require(d.factors.empty(), ErrorCode::InvalidArgument, d.scheme + " takes no columns");
  }
  return d;
}

TreatmentDecl default_treatment(const TrialDataset& data) { return {data.column_with_role(Role::Arm)->schema.name, "sr", {}}; }

void check_column_role(const TrialDataset& data, const std::string& name, Role role, const std::string& flag) {
  require(data.has_column(name), ErrorCode::ValidationError, flag + " '" + name + "' is not a column");
  require(data.column(name).schema.role == role, ErrorCode::ValidationError,
          flag + " '" + name + "' does not have role " + std::string(to_string(role)));
}

/// "treatment,control" labels to arm indices; defaults to arms 1 and 0.
std::pair<int, int> arm_pair(const TrialDataset& data, const std::vector<std::string>& labels) {
  if (labels.empty()) return {1, 0};
  require(labels.size() == 2, ErrorCode::InvalidArgument, "--arms takes two labels: treatment,control");
  return {data.arm_index(labels[0]), data.arm_index(labels[1])};
}

// ---------------------------------------------------------------------------

struct Common {
  std::string data, schema, output, treatment;
  double alpha = 0.05;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--data", c.data, "CSV data file")->required();
  cmd->add_option("--schema", c.schema, "JSON column schema")->required();
  cmd->add_option("--treatment", c.treatment, "arm ~ sr|biased_coin|pb(cols)|ps(cols)");
  cmd->add_option("--alpha", c.alpha, "two-sided level")->check(CLI::Range(1e-12, 1.0 - 1e-12));
  cmd->add_option("--output", c.output, "write JSON here instead of stdout");
}

struct GlmFlags {
  Common c;
  std::string response, family = "gaussian", variance_type = "1", contrast = "difference", calibrate = "none",
                        reference;
  std::vector<std::string> covariates;
  bool interactions = false, include_strata = false;
  int k_split = 1;
  std::uint64_t seed = 0;
};

json cmd_estimate_glm(const GlmFlags& f) {
  const auto data = load(f.c.data, f.c.schema);
  check_column_role(data, f.response, Role::Outcome, "--response");
  const auto decl = f.c.treatment.empty() ? default_treatment(data) : parse_treatment(f.c.treatment, data);

  analysis::Spec s;
  s.type = analysis::Type::Glm;
  s.family = glm::Family::parse(f.family);
  s.covariates = f.covariates;
  s.pooled = true;
  s.interactions = f.interactions;
  s.include_strata = f.include_strata;
  s.variance_type = aipw::parse_variance_type(f.variance_type);
  s.calibrate = analysis::parse_calibration(f.calibrate);
  s.k_split = f.k_split;
  s.seed = f.seed;
  s.contrast = aipw::parse_contrast(f.contrast);
  s.alpha = f.c.alpha;
  s.simple_randomization = decl.scheme == "sr";

  std::optional<aipw::MarginalEstimate> fitted;
  try {
    fitted = analysis::marginal(data, s);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::RankDeficient || s.calibrate == analysis::Calibration::None || s.interactions) throw;
    fail(ErrorCode::RankDeficient, std::string(e.what()).substr(std::string("RankDeficient: ").size()) +
                                       " (a pooled working model without --interactions predicts arms that differ "
                                       "by a constant; add --interactions)");
  }
  const auto& est = *fitted;
  const int ref = f.reference.empty() ? 0 : data.arm_index(f.reference);
  std::vector<aipw::ContrastResult> contrasts;
  for (int a = 0; a < static_cast<int>(data.k()); ++a)
    if (a != ref) contrasts.push_back(aipw::contrast(est, s.contrast, ref, a, s.alpha));

  json out = aipw::to_json(est, contrasts);
  out["family"] = s.family.name();
  out["treatment"] = decl.to_json();
  json warnings = json::array();
  if (decl.covariate_adaptive() && !s.include_strata && s.calibrate != analysis::Calibration::Joint)
    warnings.push_back("covariate-adaptive randomization declared but strata are not in the working model; the "
                       "variance may be conservative");
  out["warnings"] = warnings;
  return out;
}

struct MhFlags {
  Common c;
  std::string category, estimand = "ATE";
  std::vector<std::string> arms;
};

json cmd_estimate_mh(const MhFlags& f) {
  const auto data = load(f.c.data, f.c.schema);
  const auto decl = f.c.treatment.empty() ? default_treatment(data) : parse_treatment(f.c.treatment, data);
  const auto [a, b] = arm_pair(data, f.arms);
  auto r = mh::estimate_mh(data, f.category, mh::parse_estimand(f.estimand), a, b, f.c.alpha);
  json out = mh::to_json(r);
  out["treatment"] = decl.to_json();
  return out;
}

struct SurvFlags {
  Common c;
  std::string time, event, test = "logrank", contrast = "none", dump_scores;
  std::vector<std::string> adjust, strata, arms;
  bool stratified = false;
};

json cmd_estimate_surv(const SurvFlags& f) {
  const auto data = load(f.c.data, f.c.schema);
  check_column_role(data, f.time, Role::Time, "--time");
  check_column_role(data, f.event, Role::Event, "--event");
  const auto decl = f.c.treatment.empty() ? default_treatment(data) : parse_treatment(f.c.treatment, data);
  require(f.test == "logrank" || f.test == "cox_score", ErrorCode::InvalidArgument, "unknown --test '" + f.test + "'");
  require(f.contrast == "none" || f.contrast == "hazardratio", ErrorCode::InvalidArgument,
          "unknown --contrast '" + f.contrast + "'");
  require(f.strata.empty() || f.stratified, ErrorCode::InvalidArgument, "--strata needs --stratified");

  survival::SurvivalOptions opt;
  opt.adjust = f.adjust;
  opt.stratified = f.stratified;
  if (f.stratified) opt.strata_columns = !f.strata.empty() ? f.strata : decl.factors;
  std::tie(opt.treatment, opt.control) = arm_pair(data, f.arms);

  // A covariate-adaptive factor must enter as a covariate or as a stratum.
  auto strata_used = opt.strata_columns.empty() && f.stratified ? data.strata_columns() : opt.strata_columns;
  for (const auto& factor : decl.factors) {
    const bool adjusted = std::find(f.adjust.begin(), f.adjust.end(), factor) != f.adjust.end();
    const bool stratified = std::find(strata_used.begin(), strata_used.end(), factor) != strata_used.end();
    require(adjusted || stratified, ErrorCode::StratumHandlingRequired,
            "randomization factor '" + factor + "' (" + decl.scheme +
                ") must appear in --adjust or be used via --stratified");
  }

  const auto s = survival::prepare(data, opt);
  json out;
  if (f.test == "logrank") {
    const auto r = survival::logrank(s);
    out = survival::to_json(r);
    out["warnings"] = r.warnings;
    if (!f.dump_scores.empty()) {
      std::ostringstream csv;
      csv << "row,arm,time,event,stratum,score\n";
      for (std::size_t i = 0; i < s.n(); ++i) {
        csv << (s.source_rows[i] + 1) << "," << csv::quote(s.treated[i] ? s.treatment_label : s.control_label) << ","
            << format_real(s.time[i]) << "," << format_integer(s.event[i]) << "," << s.stratum[i] << ","
            << format_real(r.scores[i]) << "\n";
      }
      std::ofstream dump(f.dump_scores, std::ios::binary);
      require(static_cast<bool>(dump), ErrorCode::IoError, "cannot write '" + f.dump_scores + "'");
      dump << csv.str();
    }
  } else {
    require(f.dump_scores.empty(), ErrorCode::InvalidArgument, "--dump-scores needs --test logrank");
    out = survival::to_json(survival::robust_cox_score(s));
    out["warnings"] = json::array();
  }
  if (f.contrast == "hazardratio") survival::add_hr(out, survival::marginal_hr(s, f.c.alpha));
  out["treatment"] = decl.to_json();
  out["arms"] = {s.treatment_label, s.control_label};
  return out;
}

struct SimFlags {
  std::string dgp, analyses, output;
  std::optional<std::size_t> reps;
  std::optional<double> alpha;
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
  std::size_t failure_budget = 0;
};

json cmd_simulate(const SimFlags& f) {
  const json doc = read_json(f.dgp, ErrorCode::InvalidSpec);
  const json dgp_doc = doc.contains("dgp") ? doc.at("dgp") : doc;
  const auto dgp = simulate::dgp_from_json(dgp_doc);
  json list = f.analyses.empty() ? doc.value("analyses", json::array()) : read_json(f.analyses, ErrorCode::InvalidSpec);
  require(list.is_array() && !list.empty(), ErrorCode::InvalidSpec, "no analyses given");
  std::vector<analysis::Spec> specs;
  for (const auto& a : list) specs.push_back(analysis::spec_from_json(a));

  const std::size_t reps = f.reps.value_or(doc.value("reps", std::size_t{2000}));
  const double alpha = f.alpha.value_or(doc.value("alpha", 0.05));
  const std::uint64_t seed = f.seed.value_or(doc.value("seed", std::uint64_t{1}));
  simulate::MCOptions opt;
  opt.threads = f.threads;
  opt.failure_budget = f.failure_budget;
  const auto report = simulate::run_mc(dgp, specs, reps, alpha, seed, opt);

  json out = simulate::to_json(report);
  out["dgp"] = dgp_doc;
  json echoed = json::array();
  for (auto s : specs) {
    s.alpha = alpha;
    echoed.push_back(analysis::to_json(s));
  }
  out["analysis_specs"] = echoed;
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Covariate-adjusted estimation and testing for randomized trials"};
  app.require_subcommand(1);

  GlmFlags glm_f;
  auto* glm_cmd = app.add_subcommand("estimate-glm", "AIPW / G-computation marginal means and contrasts");
  add_common(glm_cmd, glm_f.c);
  glm_cmd->add_option("--response", glm_f.response, "outcome column")->required();
  glm_cmd->add_option("--covariates", glm_f.covariates, "working-model covariates")->delimiter(',');
  glm_cmd->add_flag("--interactions", glm_f.interactions, "arm-by-covariate interactions");
  glm_cmd->add_flag("--include-strata", glm_f.include_strata, "add stratum dummies to the working model");
  glm_cmd->add_option("--family", glm_f.family)->check(CLI::IsMember({"gaussian", "binomial", "poisson", "negbin"}));
  glm_cmd->add_option("--variance-type", glm_f.variance_type)
      ->check(CLI::IsMember({"1", "2", "3", "hc0", "hc1", "hc2", "hc3"}));
  glm_cmd->add_option("--contrast", glm_f.contrast)
      ->check(CLI::IsMember({"difference", "log_risk_ratio", "log_odds_ratio"}));
  glm_cmd->add_option("--calibrate", glm_f.calibrate)->check(CLI::IsMember({"none", "linear", "joint"}));
  glm_cmd->add_option("--k-split", glm_f.k_split, "cross-fitting folds")->check(CLI::PositiveNumber);
  glm_cmd->add_option("--seed", glm_f.seed, "fold assignment seed");
  glm_cmd->add_option("--reference", glm_f.reference, "reference arm label (default: first arm)");

  MhFlags mh_f;
  auto* mh_cmd = app.add_subcommand("estimate-mh", "Mantel-Haenszel risk difference");
  add_common(mh_cmd, mh_f.c);
  mh_cmd->add_option("--category", mh_f.category, "stratifying column")->required();
  mh_cmd->add_option("--estimand", mh_f.estimand)->check(CLI::IsMember({"ATE", "MH"}));
  mh_cmd->add_option("--arms", mh_f.arms, "treatment,control labels")->delimiter(',');

  SurvFlags surv_f;
  auto* surv_cmd = app.add_subcommand("estimate-surv", "logrank, robust Cox score and marginal hazard ratio");
  add_common(surv_cmd, surv_f.c);
  surv_cmd->add_option("--time", surv_f.time)->required();
  surv_cmd->add_option("--event", surv_f.event)->required();
  surv_cmd->add_option("--test", surv_f.test)->check(CLI::IsMember({"logrank", "cox_score"}));
  surv_cmd->add_flag("--stratified", surv_f.stratified);
  surv_cmd->add_option("--strata", surv_f.strata, "stratification columns (default: declared factors)")
      ->delimiter(',');
  surv_cmd->add_option("--adjust", surv_f.adjust, "adjustment covariates")->delimiter(',');
  surv_cmd->add_option("--contrast", surv_f.contrast)->check(CLI::IsMember({"none", "hazardratio"}));
  surv_cmd->add_option("--arms", surv_f.arms, "treatment,control labels")->delimiter(',');
  surv_cmd->add_option("--dump-scores", surv_f.dump_scores, "write per-subject scores to this CSV");

  SimFlags sim_f;
  auto* sim_cmd = app.add_subcommand("simulate", "Monte Carlo study from a DGP spec");
  sim_cmd->add_option("--dgp", sim_f.dgp, "DGP JSON (may embed analyses, reps, alpha, seed)")->required();
  sim_cmd->add_option("--analyses", sim_f.analyses, "JSON array of analysis specs");
  sim_cmd->add_option("--reps", sim_f.reps)->check(CLI::PositiveNumber);
  sim_cmd->add_option("--alpha", sim_f.alpha)->check(CLI::Range(1e-12, 1.0 - 1e-12));
  sim_cmd->add_option("--seed", sim_f.seed);
  sim_cmd->add_option("--threads", sim_f.threads, "worker threads (0: all cores)");
  sim_cmd->add_option("--failure-budget", sim_f.failure_budget, "failed analyses tolerated");
  sim_cmd->add_option("--output", sim_f.output);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(ErrorCode::InvalidArgument, e.what());
  }

  try {
    if (*glm_cmd) write_output(cmd_estimate_glm(glm_f), glm_f.c.output);
    else if (*mh_cmd) write_output(cmd_estimate_mh(mh_f), mh_f.c.output);
    else if (*surv_cmd) write_output(cmd_estimate_surv(surv_f), surv_f.c.output);
    else write_output(cmd_simulate(sim_f), sim_f.output);
  } catch (const Error& e) {
    return report_error(e.code(), e.what());
  } catch (const std::exception& e) {
    return report_error(ErrorCode::InvalidArgument, e.what());
  }
  return kOk;
}
