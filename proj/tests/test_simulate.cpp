#include <catch_amalgamated.hpp>

#include <covadj/simulate.hpp>

#include <cmath>
#include <numbers>
#include <sstream>

using namespace covadj;
using namespace covadj::simulate;
using nlohmann::json;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::InvalidArgument;
}

std::string csv_of(const TrialDataset& d) {
  std::ostringstream out;
  write_csv(out, d);
  return out.str();
}

json logistic_dgp() {
  return json::parse(R"({
    "n": 200,
    "covariates": [{"name": "x", "dist": "normal", "mean": 0.3, "sd": 1.2},
                   {"name": "b", "dist": "bernoulli", "p": 0.4}],
    "strata": [{"name": "z", "covariate": "x", "cutpoints": [-0.5, 0.5]}],
    "outcome": {"model": "logistic", "arms": [
      {"intercept": -0.4, "terms": [{"covariate": "x", "coef": 0.9}, {"covariate": "x", "transform": "square", "coef": -0.3}]},
      {"intercept": 0.2, "coefficients": [0.5, 1.0]}]},
    "scheme": {"type": "permuted_block", "block_size": 4}
  })");
}

// Composite Simpson over a wide normal range, no Gauss rules involved.
double simpson_normal(double mu, double sd, const std::function<double(double)>& f) {
  const int m = 20000;
  const double lo = mu - 12 * sd, hi = mu + 12 * sd, h = (hi - lo) / m;
  double s = 0;
  for (int i = 0; i <= m; ++i) {
    const double x = lo + i * h;
    const double dens = std::exp(-0.5 * ((x - mu) / sd) * ((x - mu) / sd)) / (sd * std::sqrt(2 * std::numbers::pi));
    s += (i == 0 || i == m ? 1 : i % 2 ? 4 : 2) * f(x) * dens;
  }
  return s * h / 3;
}

double expit(double e) { return 1 / (1 + std::exp(-e)); }

}  // namespace

TEST_CASE("same seed gives the same dataset") {
  const auto d = dgp_from_json(logistic_dgp());
  REQUIRE(csv_of(generate(d, 5)) == csv_of(generate(d, 5)));
  REQUIRE(csv_of(generate(d, 5)) != csv_of(generate(d, 6)));
}

TEST_CASE("generated columns follow the DGP description") {
  const auto d = dgp_from_json(logistic_dgp());
  const auto data = generate(d, 11);
  REQUIRE(data.n() == 200);
  REQUIRE(data.k() == 2);
  REQUIRE(data.column("y").schema.kind == Kind::Binary);
  REQUIRE(data.column("b").schema.kind == Kind::Binary);
  const auto& z = data.column("z");
  REQUIRE(z.schema.role == Role::Stratum);
  const auto& x = data.column("x").values;
  for (std::size_t i = 0; i < data.n(); ++i) {
    const int expect = x[i] < -0.5 ? 0 : x[i] < 0.5 ? 1 : 2;
    REQUIRE(z.values[i] == expect);
  }
  // permuted blocks of 4 keep every stratum within 2 of balance
  for (std::size_t s = 0; s < data.num_strata(); ++s) {
    int diff = 0;
    for (std::size_t i = 0; i < data.n(); ++i)
      if (data.strata_index()[i] == static_cast<int>(s)) diff += data.arm_of()[i] == 1 ? 1 : -1;
    REQUIRE(std::abs(diff) <= 2);
  }
}

TEST_CASE("logistic truth matches an independent integral") {
  const auto d = dgp_from_json(logistic_dgp());
  const auto t = compute_truth(d);
  REQUIRE(t.method == "quadrature");
  const double t0 = simpson_normal(0.3, 1.2, [](double x) { return expit(-0.4 + 0.9 * x - 0.3 * x * x); });
  const double t1 = 0.6 * simpson_normal(0.3, 1.2, [](double x) { return expit(0.2 + 0.5 * x); }) +
                    0.4 * simpson_normal(0.3, 1.2, [](double x) { return expit(1.2 + 0.5 * x); });
  REQUIRE(std::abs(t.theta[0] - t0) < 1e-6);
  REQUIRE(std::abs(t.theta[1] - t1) < 1e-6);
}

TEST_CASE("linear truth on uniform covariates is exact") {
  auto j = json::parse(R"({
    "n": 10,
    "covariates": [{"name": "u", "dist": "uniform", "min": 1, "max": 3}],
    "outcome": {"model": "linear", "arms": [
      {"intercept": 1, "terms": [{"covariate": "u", "transform": "square", "coef": 3}]},
      {"intercept": 0, "terms": [{"covariate": "u", "transform": "exp", "coef": 1}]}]}
  })");
  const auto t = compute_truth(dgp_from_json(j));
  // E[u^2] = 13/3, E[e^u] = (e^3 - e)/2
  REQUIRE(std::abs(t.theta[0] - 14.0) < 1e-10);
  REQUIRE(std::abs(t.theta[1] - (std::exp(3.0) - std::exp(1.0)) / 2) < 1e-10);
}

TEST_CASE("many covariates fall back to direct draws") {
  json j{{"n", 10}};
  for (int c = 0; c < 5; ++c) j["covariates"].push_back({{"name", "x" + std::to_string(c)}, {"dist", "normal"}});
  j["outcome"] = {{"model", "poisson"},
                  {"arms", {{{"intercept", 0.1}, {"coefficients", {0.1, 0.1, 0.1, 0.1, 0.1}}},
                            {{"intercept", 0.1}, {"coefficients", {0.0, 0.0, 0.0, 0.0, 0.0}}}}}};
  const auto t = compute_truth(dgp_from_json(j), 3);
  REQUIRE(t.method == "monte_carlo");
  // E exp(0.1 + 0.1 sum x) = exp(0.1 + 5 * 0.01 / 2)
  REQUIRE(std::abs(t.theta[0] - std::exp(0.125)) < 1e-3);
  REQUIRE(std::abs(t.theta[1] - std::exp(0.1)) < 1e-12);
}

TEST_CASE("identical zero-coefficient arms have zero difference truth") {
  auto j = json::parse(R"({
    "n": 50,
    "covariates": [{"name": "x", "dist": "normal"}],
    "outcome": {"model": "logistic", "arms": [{"intercept": 0.3, "coefficients": [0]}, {"intercept": 0.3, "coefficients": [0]}]}
  })");
  const auto t = compute_truth(dgp_from_json(j));
  analysis::Spec s;
  s.type = analysis::Type::Glm;
  REQUIRE(*analysis_truth(t, s) == 0.0);
  s.type = analysis::Type::MH;
  REQUIRE(*analysis_truth(t, s) == 0.0);
}

TEST_CASE("marginal proportional hazards construction") {
  auto j = json::parse(R"({
    "n": 20000,
    "covariates": [{"name": "x", "dist": "normal", "mean": 1, "sd": 2}],
    "outcome": {"model": "marginal_ph", "rate": 0.5, "log_hr": 0.6931471805599453, "rho": 0.8,
                "terms": [{"covariate": "x", "coef": 1}]}
  })");
  const auto d = dgp_from_json(j);
  REQUIRE(*compute_truth(d).log_hr == Catch::Approx(std::log(2.0)));
  const auto data = generate(d, 1);
  double sum[2] = {0, 0}, cnt[2] = {0, 0}, corr = 0;
  for (std::size_t i = 0; i < data.n(); ++i) {
    const int a = data.arm_of()[i];
    REQUIRE(data.event()[i] == 1.0);
    sum[a] += data.time()[i];
    cnt[a] += 1;
    corr += (data.column("x").values[i] - 1) * std::log(data.time()[i]);
  }
  // exponential means 1/0.5 and 1/(0.5 * 2), each within 4 standard errors
  REQUIRE(std::abs(sum[0] / cnt[0] - 2.0) < 4 * 2.0 / std::sqrt(cnt[0]));
  REQUIRE(std::abs(sum[1] / cnt[1] - 1.0) < 4 * 1.0 / std::sqrt(cnt[1]));
  REQUIRE(corr < 0);  // larger score, earlier failure
}

TEST_CASE("censoring and administrative cutoff") {
  auto j = json::parse(R"({
    "n": 400,
    "covariates": [{"name": "x", "dist": "normal"}],
    "outcome": {"model": "weibull", "arms": [{"intercept": 0, "shape": 1.5}, {"intercept": 0, "shape": 1.5}]},
    "censoring": {"rates": [0.3, 0.0], "admin": 1.2}
  })");
  const auto d = dgp_from_json(j);
  REQUIRE(*compute_truth(d).log_hr == 0.0);
  const auto data = generate(d, 9);
  for (std::size_t i = 0; i < data.n(); ++i) {
    REQUIRE(data.time()[i] <= 1.2);
    if (data.event()[i] == 0.0 && data.arm_of()[i] == 1) REQUIRE(data.time()[i] == 1.2);
  }
}

TEST_CASE("invalid DGP specs") {
  auto bad = [](const std::function<void(json&)>& edit) {
    auto j = logistic_dgp();
    edit(j);
    return code_of([&] { dgp_from_json(j); });
  };
  REQUIRE(bad([](json& j) { j["outcome"]["arms"][1]["coefficients"] = {1.0}; }) == ErrorCode::InvalidSpec);
  REQUIRE(bad([](json& j) { j["covariates"][0]["dist"] = "cauchy"; }) == ErrorCode::InvalidSpec);
  REQUIRE(bad([](json& j) { j["strata"][0]["cutpoints"] = {1.0, 0.0}; }) == ErrorCode::InvalidSpec);
  REQUIRE(bad([](json& j) { j["scheme"] = {{"type", "permuted_block"}, {"block_size", 3}}; }) == ErrorCode::InvalidSpec);
  REQUIRE(bad([](json& j) { j["censoring"] = {{"rates", {0.1, 0.1}}}; }) == ErrorCode::InvalidSpec);
  REQUIRE(bad([](json& j) {
            j["outcome"] = {{"model", "weibull"}, {"arms", {{{"shape", 0.0}}, {{"shape", 1.0}}}}};
          }) == ErrorCode::InvalidSpec);
  REQUIRE(bad([](json& j) {
            j["outcome"] = {{"model", "weibull"}, {"arms", {{{"shape", 1.0}}, {{"shape", 1.0}}}}};
            j["censoring"] = {{"rates", {-0.1, 0.1}}};
          }) == ErrorCode::InvalidSpec);
  REQUIRE(bad([](json& j) { j.erase("n"); }) == ErrorCode::InvalidSpec);
}

TEST_CASE("monte carlo report") {
  const auto d = dgp_from_json(logistic_dgp());
  analysis::Spec diff;
  diff.name = "aipw";
  diff.family = glm::Family::binomial();
  diff.covariates = {"x"};
  diff.interactions = true;
  analysis::Spec mh;
  mh.name = "mh";
  mh.type = analysis::Type::MH;
  mh.category = "z";

  SECTION("one replicate reproduces that replicate") {
    auto r = run_mc(d, {diff, mh}, 1, 0.05, 77);
    const auto data = generate(d, derive_seed(77, 0));
    auto spec = diff;
    const auto single = analysis::run(data, spec);
    REQUIRE(r.analyses[0].mean_estimate == single.estimate);
    REQUIRE(r.analyses[0].mean_se == single.se);
    REQUIRE(r.analyses[0].empirical_sd == 0.0);
    REQUIRE(r.analyses[0].rejection_rate == (single.p < 0.05 ? 1.0 : 0.0));
  }

  SECTION("thread count does not change the report") {
    MCOptions one, three;
    one.threads = 1;
    three.threads = 3;
    const auto a = to_json(run_mc(d, {diff, mh}, 40, 0.05, 8, one)).dump();
    const auto b = to_json(run_mc(d, {diff, mh}, 40, 0.05, 8, three)).dump();
    REQUIRE(a == b);
  }

  SECTION("rates lie in [0,1] and truth is attached") {
    auto r = run_mc(d, {diff, mh}, 30, 0.05, 3);
    for (const auto& s : r.analyses) {
      REQUIRE(s.reps_ok == 30);
      REQUIRE(s.rejection_rate >= 0.0);
      REQUIRE(s.rejection_rate <= 1.0);
      REQUIRE(*s.coverage >= 0.0);
      REQUIRE(*s.coverage <= 1.0);
      REQUIRE(s.truth);
    }
    const auto t = compute_truth(d);
    REQUIRE(*r.analyses[0].truth == t.theta[1] - t.theta[0]);
  }

  SECTION("failure budget") {
    analysis::Spec broken = mh;
    broken.category = "nope";
    REQUIRE(code_of([&] { run_mc(d, {broken}, 5, 0.05, 1); }) == ErrorCode::FailureBudgetExceeded);
    try {
      MCOptions o;
      o.threads = 1;
      run_mc(d, {broken}, 5, 0.05, 1, o);
    } catch (const Error& e) {
      REQUIRE(std::string(e.what()).find("replicate 0") != std::string::npos);
    }
    MCOptions lenient;
    lenient.failure_budget = 5;
    auto r = run_mc(d, {broken, diff}, 5, 0.05, 1, lenient);
    REQUIRE(r.analyses[0].failures == 5);
    REQUIRE(r.analyses[0].reps_ok == 0);
    REQUIRE(r.analyses[1].reps_ok == 5);
  }

  SECTION("zero reps is rejected") { REQUIRE(code_of([&] { run_mc(d, {diff}, 0, 0.05, 1); }) == ErrorCode::InvalidSpec); }
}
