#include <catch_amalgamated.hpp>

#include <covadj/rng.hpp>
#include <covadj/survival.hpp>

#include <cmath>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace covadj;
using namespace covadj::survival;

namespace {

TrialDataset surv(std::vector<int> arm, std::vector<double> t, std::vector<double> e, std::vector<Column> extra = {}) {
  std::vector<Column> cols{fx::arm(std::move(arm)), covadj::numeric_column("time", Role::Time, Kind::Real, std::move(t)),
                           covadj::numeric_column("event", Role::Event, Kind::Binary, std::move(e))};
  for (auto& c : extra) cols.push_back(std::move(c));
  return fx::dataset(std::move(cols));
}

struct RandomSurv {
  std::vector<int> arm, s;
  std::vector<double> t, e, x, w;
};

RandomSurv random_surv(int n, std::uint64_t seed, double log_hr = 0.0) {
  CounterRng rng(seed);
  RandomSurv r;
  for (int i = 0; i < n; ++i) {
    const int a = i % 2;
    const double x = rng.normal(), w = rng.uniform();
    const int s = rng.bernoulli(0.5) ? 1 : 0;
    const double rate = std::exp(0.7 * x + 0.5 * s + log_hr * a);
    const double t = rng.exponential(rate), c = rng.exponential(0.4);
    r.arm.push_back(a);
    r.x.push_back(x);
    r.w.push_back(w);
    r.s.push_back(s);
    r.t.push_back(std::min(t, c));
    r.e.push_back(t <= c ? 1.0 : 0.0);
  }
  return r;
}

TrialDataset to_dataset(const RandomSurv& r) {
  return surv(r.arm, r.t, r.e, {fx::real("x", r.x), fx::real("w", r.w), fx::stratum("s", {"a", "b"}, r.s)});
}

}  // namespace

TEST_CASE("risk table hand enumeration") {
  auto d = surv({1, 1, 0, 0}, {1, 3, 2, 4}, {1, 0, 1, 1});
  auto t = risk_table(d);
  REQUIRE(t.times == std::vector<double>{1, 2, 4});
  REQUIRE(t.r1 == std::vector<double>{2, 1, 0});
  REQUIRE(t.r0 == std::vector<double>{2, 2, 1});
  REQUIRE(t.d1 == std::vector<double>{1, 0, 0});
  REQUIRE(t.d0 == std::vector<double>{0, 1, 1});
}

TEST_CASE("logrank numerator on the enumerated risk sets") {
  auto d = surv({1, 1, 0, 0}, {1, 3, 2, 4}, {1, 0, 1, 1});
  auto r = logrank(d);
  REQUIRE(r.U == Catch::Approx(1.0 / 6.0).epsilon(1e-14));
  // hypergeometric variance: 1*(2*2/16)*(3/3) + 1*(1*2/9)*(2/2) + 0
  REQUIRE(r.V == Catch::Approx(0.25 + 2.0 / 9.0).epsilon(1e-14));
  REQUIRE(r.variant == Variant::L);
}

TEST_CASE("no events and tie pooling") {
  auto none = surv({1, 0, 1, 0}, {1, 2, 3, 4}, {0, 0, 0, 0});
  try {
    risk_table(none);
    FAIL("expected NoEvents");
  } catch (const Error& e) {
    REQUIRE(e.code() == ErrorCode::NoEvents);
  }
  auto tied = surv({1, 0, 1, 0}, {2, 2, 3, 5}, {1, 1, 1, 0});
  auto t = risk_table(tied);
  REQUIRE(t.times.front() == 2);
  REQUIRE(t.d1.front() == 1);
  REQUIRE(t.d0.front() == 1);
}

TEST_CASE("balanced arms give zero") {
  auto d = surv({1, 0, 1, 0}, {1, 1, 5, 5}, {1, 1, 0, 0});
  auto r = logrank(d);
  REQUIRE(r.U == 0.0);
  REQUIRE(r.T == 0.0);
}

TEST_CASE("per-subject scores sum to zero") {
  auto r = random_surv(200, 3, 0.3);
  auto d = to_dataset(r);
  for (bool strat : {false, true}) {
    SurvivalOptions opt;
    opt.stratified = strat;
    auto res = logrank(d, opt);
    double sum = 0;
    for (double o : res.scores) sum += o;
    REQUIRE(std::abs(sum) < 1e-10);
  }
}

TEST_CASE("constant covariate leaves the logrank statistic unchanged") {
  auto r = random_surv(120, 5);
  std::vector<double> c(120, 2.5);
  auto d = surv(r.arm, r.t, r.e, {fx::real("c", c)});
  auto plain = logrank(d);
  SurvivalOptions opt;
  opt.adjust = {"c"};
  auto adj = logrank(d, opt);
  REQUIRE(adj.variant == Variant::CL);
  REQUIRE(adj.U == plain.U);
  REQUIRE(adj.sigma == plain.sigma);
}

TEST_CASE("adjustment never increases sigma") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    auto d = to_dataset(random_surv(150, 100 + seed, seed % 2 ? 0.4 : 0.0));
    auto plain = logrank(d);
    SurvivalOptions opt;
    opt.adjust = {"x", "w"};
    auto adj = logrank(d, opt);
    REQUIRE(adj.sigma <= plain.sigma + 1e-12);
    opt.stratified = true;
    auto sl = logrank(d, SurvivalOptions{{}, true, {}, 1, 0});
    auto csl = logrank(d, opt);
    REQUIRE(csl.variant == Variant::CSL);
    REQUIRE(csl.sigma <= sl.sigma + 1e-12);
  }
}

TEST_CASE("one stratum reproduces the unstratified tests") {
  auto r = random_surv(150, 8);
  std::vector<int> one(150, 0);
  auto d = surv(r.arm, r.t, r.e, {fx::real("x", r.x), fx::stratum("s", {"only"}, one)});
  SurvivalOptions plain, strat;
  strat.stratified = true;
  REQUIRE(logrank(d, strat).U == logrank(d, plain).U);
  REQUIRE(logrank(d, strat).sigma == logrank(d, plain).sigma);
  plain.adjust = strat.adjust = {"x"};
  REQUIRE(logrank(d, strat).U == logrank(d, plain).U);
  REQUIRE(logrank(d, strat).sigma == logrank(d, plain).sigma);
}

TEST_CASE("stratified logrank sums strata") {
  auto r = random_surv(160, 12, 0.2);
  auto d = to_dataset(r);
  SurvivalOptions opt;
  opt.stratified = true;
  auto sl = logrank(d, opt);
  REQUIRE(sl.variant == Variant::SL);
  double u = 0, v = 0;
  for (int z = 0; z < 2; ++z) {
    std::vector<int> arm;
    std::vector<double> t, e;
    for (int i = 0; i < 160; ++i)
      if (r.s[i] == z) {
        arm.push_back(r.arm[i]);
        t.push_back(r.t[i]);
        e.push_back(r.e[i]);
      }
    auto l = logrank(surv(arm, t, e));
    u += l.U;
    v += l.V;
  }
  REQUIRE(sl.U == Catch::Approx(u).epsilon(1e-12));
  REQUIRE(sl.V == Catch::Approx(v).epsilon(1e-12));
}

TEST_CASE("swapping arms negates U and theta") {
  auto d = to_dataset(random_surv(140, 21, 0.5));
  for (bool strat : {false, true}) {
    SurvivalOptions ab;
    ab.adjust = {"x", "w"};
    ab.stratified = strat;
    SurvivalOptions ba = ab;
    ba.treatment = 0;
    ba.control = 1;
    auto l1 = logrank(d, ab), l2 = logrank(d, ba);
    REQUIRE(l1.U == Catch::Approx(-l2.U).epsilon(1e-12));
    REQUIRE(l1.sigma == Catch::Approx(l2.sigma).epsilon(1e-12));
    auto h1 = marginal_hr(d, ab), h2 = marginal_hr(d, ba);
    REQUIRE(h1.theta == Catch::Approx(-h2.theta).margin(1e-9));
    REQUIRE(h1.se == Catch::Approx(h2.se).epsilon(1e-6));
  }
}

TEST_CASE("adjustment covariates collinear with each other") {
  auto r = random_surv(100, 4);
  std::vector<double> x2;
  for (double v : r.x) x2.push_back(2 * v + 1);
  auto d = surv(r.arm, r.t, r.e, {fx::real("x", r.x), fx::real("x2", x2)});
  SurvivalOptions opt;
  opt.adjust = {"x", "x2"};
  try {
    logrank(d, opt);
    FAIL("expected RankDeficient");
  } catch (const Error& e) {
    REQUIRE(e.code() == ErrorCode::RankDeficient);
  }
}

TEST_CASE("cox working model gradient vanishes at the fit") {
  auto r = random_surv(10, 31);
  // make sure the ten-subject fixture has a few events
  r.e = {1, 1, 0, 1, 1, 0, 1, 1, 1, 0};
  auto d = surv(r.arm, r.t, r.e, {fx::real("x", r.x), fx::real("w", r.w)});
  SurvivalOptions opt;
  opt.adjust = {"x", "w"};
  auto s = prepare(d, opt);
  auto fit = fit_cox(s, s.x);
  for (Eigen::Index j = 0; j < 2; ++j) {
    const double h = 1e-5;
    Vector bp = fit.beta, bm = fit.beta;
    bp(j) += h;
    bm(j) -= h;
    const double g = (cox_partial_loglik(s, s.x, bp) - cox_partial_loglik(s, s.x, bm)) / (2 * h);
    REQUIRE(std::abs(g) < 1e-5);
  }
}

TEST_CASE("robust cox score without covariates is the logrank numerator") {
  auto d = to_dataset(random_surv(100, 41, 0.3));
  auto c = robust_cox_score(d);
  auto l = logrank(d);
  REQUIRE(c.score == Catch::Approx(l.U).epsilon(1e-12));
  std::vector<int> sa;
  std::vector<double> st, se;
  for (int i = 0; i < 40; ++i) {
    sa.push_back(i % 2);
    st.push_back(1 + i / 2);
    se.push_back((i / 2) % 4 == 3 ? 0 : 1);
  }
  auto cs = robust_cox_score(surv(sa, st, se));
  REQUIRE(cs.score == Catch::Approx(0.0).margin(1e-14));
  REQUIRE(cs.robust_variance == Catch::Approx(cs.model_variance).epsilon(0.2));

  SurvivalOptions opt;
  opt.adjust = {"x"};
  auto adj = robust_cox_score(d, opt);
  REQUIRE(adj.beta.size() == 1);
  REQUIRE(adj.robust_variance > 0);
}

TEST_CASE("marginal hazard ratio") {
  SECTION("symmetric arms") {
    auto d = surv({1, 0, 1, 0}, {1, 1, 3, 3}, {1, 1, 1, 1});
    auto h = marginal_hr(d);
    REQUIRE(std::abs(h.theta) < 1e-9);
    REQUIRE(h.hr == Catch::Approx(1.0).margin(1e-9));
  }
  SECTION("six subjects against a Newton oracle") {
    std::vector<int> a{1, 0, 1, 0, 1, 0};
    std::vector<double> t{2.0, 1.0, 5.0, 3.0, 4.0, 6.0}, e{1, 1, 0, 1, 1, 1};
    auto h = marginal_hr(surv(a, t, e));
    REQUIRE(std::abs(h.theta - oracle::cox(a, t, e)) < 1e-8);
    REQUIRE(h.ci_low < h.theta);
    REQUIRE(h.ci_high > h.theta);
  }
  SECTION("rescaling time") {
    auto r = random_surv(80, 2, 0.6);
    auto h1 = marginal_hr(surv(r.arm, r.t, r.e));
    for (auto& v : r.t) v *= 7;
    auto h2 = marginal_hr(surv(r.arm, r.t, r.e));
    REQUIRE(h1.theta == h2.theta);
  }
  SECTION("degenerate data has no root") {
    auto d = surv({1, 1, 0, 0}, {1, 2, 3, 4}, {1, 1, 0, 0});
    try {
      marginal_hr(d);
      FAIL("expected NoRoot");
    } catch (const Error& e) {
      REQUIRE(e.code() == ErrorCode::NoRoot);
    }
  }
}
