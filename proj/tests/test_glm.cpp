#include <catch_amalgamated.hpp>

#include <covadj/glm.hpp>
#include <covadj/rng.hpp>

#include <cmath>

using namespace covadj;
using covadj::glm::Family;

namespace {

Matrix with_intercept(const std::vector<double>& x) {
  Matrix m(static_cast<Eigen::Index>(x.size()), 2);
  for (std::size_t i = 0; i < x.size(); ++i) m.row(static_cast<Eigen::Index>(i)) << 1.0, x[i];
  return m;
}

struct Sim {
  Matrix x;
  Vector y;
};

// Two covariates plus intercept; outcome drawn from the named family.
Sim simulate(glm::FamilyKind kind, int n, std::uint64_t seed, double size = 2.0) {
  CounterRng rng(seed);
  Sim s{Matrix(n, 3), Vector(n)};
  for (int i = 0; i < n; ++i) {
    const double x1 = rng.normal(), x2 = rng.uniform(-1, 1);
    s.x.row(i) << 1.0, x1, x2;
    const double eta = 0.2 + 0.5 * x1 - 0.7 * x2;
    switch (kind) {
      case glm::FamilyKind::Gaussian: s.y(i) = eta + rng.normal(); break;
      case glm::FamilyKind::Binomial: s.y(i) = rng.bernoulli(1.0 / (1.0 + std::exp(-eta))) ? 1.0 : 0.0; break;
      case glm::FamilyKind::Poisson: s.y(i) = rng.poisson(std::exp(eta)); break;
      case glm::FamilyKind::NegBin: {
        // gamma-poisson mixture via sum of exponentials needs integer size; use size = 2
        const double g = (rng.exponential(1.0) + rng.exponential(1.0)) / size;
        s.y(i) = rng.poisson(std::exp(eta) * g);
        break;
      }
    }
  }
  return s;
}

double loglik(glm::FamilyKind kind, const Matrix& x, const Vector& y, const Vector& beta) {
  double ll = 0;
  const Vector eta = x * beta;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (kind == glm::FamilyKind::Binomial)
      ll += y(i) * eta(i) - std::log1p(std::exp(eta(i)));
    else if (kind == glm::FamilyKind::Poisson)
      ll += y(i) * eta(i) - std::exp(eta(i));
    else
      ll += -0.5 * (y(i) - eta(i)) * (y(i) - eta(i));
  }
  return ll;
}

}  // namespace

TEST_CASE("gaussian intercept-only is the mean") {
  Vector y(5);
  y << 1, 2, 4, 8, 16;
  auto f = glm::fit(Matrix::Ones(5, 1), y, Family::gaussian());
  REQUIRE(f.coefficients(0) == Catch::Approx(6.2).epsilon(1e-14));
  for (Eigen::Index i = 0; i < 5; ++i) REQUIRE(f.fitted(i) == Catch::Approx(6.2).epsilon(1e-14));
}

TEST_CASE("saturated logistic 2x2 closed form") {
  // x = 1: 3 of 4 events; x = 0: 1 of 4 events
  auto x = with_intercept({1, 1, 1, 1, 0, 0, 0, 0});
  Vector y(8);
  y << 1, 1, 1, 0, 1, 0, 0, 0;
  auto f = glm::fit(x, y, Family::binomial());
  REQUIRE(f.converged);
  REQUIRE(std::abs(f.coefficients(0) - std::log(1.0 / 3.0)) < 1e-10);
  REQUIRE(std::abs(f.coefficients(1) - std::log(9.0)) < 1e-10);
}

TEST_CASE("perfect separation is reported") {
  auto x = with_intercept({-2, -1, -0.5, 0.5, 1, 2});
  Vector y(6);
  y << 0, 0, 0, 1, 1, 1;
  try {
    glm::fit(x, y, Family::binomial());
    FAIL("expected Separation");
  } catch (const Error& e) {
    REQUIRE(e.code() == ErrorCode::Separation);
  }
}

TEST_CASE("prediction") {
  Vector y(4);
  y << 0, 1, 0, 1;
  auto f = glm::fit(Matrix::Ones(4, 1), y, Family::binomial());
  REQUIRE(std::abs(f.coefficients(0)) < 1e-12);
  REQUIRE(glm::predict(f, Matrix::Ones(3, 1)).isApproxToConstant(0.5));

  auto g = simulate(glm::FamilyKind::Gaussian, 40, 1);
  auto fg = glm::fit(g.x, g.y, Family::gaussian());
  REQUIRE(glm::predict(fg, g.x) == fg.fitted);

  auto p = simulate(glm::FamilyKind::Poisson, 200, 2);
  auto fp = glm::fit(p.x, p.y, Family::poisson());
  Matrix row = Matrix::Zero(1, 3);
  row(0, 0) = 1.0;
  REQUIRE(glm::predict(fp, row)(0) == Catch::Approx(std::exp(fp.coefficients(0))).epsilon(1e-14));
  REQUIRE_THROWS_AS(glm::predict(fp, Matrix::Ones(1, 2)), Error);
}

TEST_CASE("rank deficiency is an error") {
  Matrix x(4, 3);
  x << 1, 1, 2, 1, 2, 4, 1, 3, 6, 1, 4, 8;
  Vector y(4);
  y << 1, 2, 3, 5;
  try {
    glm::fit(x, y, Family::gaussian());
    FAIL("expected RankDeficient");
  } catch (const Error& e) {
    REQUIRE(e.code() == ErrorCode::RankDeficient);
  }
}

TEST_CASE("canonical score identity and finite-difference gradient") {
  for (auto kind : {glm::FamilyKind::Gaussian, glm::FamilyKind::Binomial, glm::FamilyKind::Poisson}) {
    auto s = simulate(kind, 300, 10 + static_cast<int>(kind));
    auto f = glm::fit(s.x, s.y, Family{kind, std::nullopt});
    REQUIRE(f.converged);
    const Vector sc = s.x.transpose() * (s.y - f.fitted);
    REQUIRE(sc.cwiseAbs().maxCoeff() < 10 * 1e-8);
    for (Eigen::Index j = 0; j < 3; ++j) {
      const double h = 1e-5;
      Vector bp = f.coefficients, bm = f.coefficients;
      bp(j) += h;
      bm(j) -= h;
      const double g = (loglik(kind, s.x, s.y, bp) - loglik(kind, s.x, s.y, bm)) / (2 * h);
      REQUIRE(std::abs(g) < 1e-5);
    }
  }
}

TEST_CASE("fits are permutation equivariant") {
  auto s = simulate(glm::FamilyKind::Binomial, 150, 4);
  auto f = glm::fit(s.x, s.y, Family::binomial());
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(150);
  perm.setIdentity();
  CounterRng rng(1);
  std::span<int> idx(perm.indices().data(), 150);
  rng.shuffle(idx);
  Matrix xp = perm * s.x;
  Vector yp = perm * s.y;
  auto g = glm::fit(xp, yp, Family::binomial());
  REQUIRE((f.coefficients - g.coefficients).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("negative binomial tends to poisson for huge size") {
  auto s = simulate(glm::FamilyKind::Poisson, 300, 6);
  auto p = glm::fit(s.x, s.y, Family::poisson());
  auto nb = glm::fit(s.x, s.y, Family::negbin(1e8));
  REQUIRE(nb.converged);
  REQUIRE((p.coefficients - nb.coefficients).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("negative binomial estimates the size parameter") {
  auto s = simulate(glm::FamilyKind::NegBin, 4000, 8, 2.0);
  auto nb = glm::fit(s.x, s.y, Family::negbin());
  REQUIRE(nb.converged);
  REQUIRE(nb.dispersion > 1.5);
  REQUIRE(nb.dispersion < 2.7);
  REQUIRE(std::abs(nb.coefficients(1) - 0.5) < 0.1);
  REQUIRE((nb.fitted.array() > 0).all());
  auto j = glm::to_json(nb);
  REQUIRE(j.contains("dispersion"));
}

TEST_CASE("unsupported responses are rejected") {
  auto x = with_intercept({0, 1, 2});
  Vector y(3);
  y << 0, 2, 1;
  REQUIRE_THROWS_AS(glm::fit(x, y, Family::binomial()), Error);
  y << 0, 1.5, 1;
  REQUIRE_THROWS_AS(glm::fit(x, y, Family::poisson()), Error);
}
