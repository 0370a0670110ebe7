#pragma once

#include <covadj/trial_data.hpp>

#include <string>
#include <utility>
#include <vector>

namespace fx {

using covadj::Column;
using covadj::Kind;
using covadj::Role;

inline Column arm(std::vector<int> a) {
  std::vector<double> v(a.begin(), a.end());
  return covadj::numeric_column("arm", Role::Arm, Kind::Binary, std::move(v));
}

inline Column outcome(std::vector<double> y, Kind kind = Kind::Real) {
  return covadj::numeric_column("y", Role::Outcome, kind, std::move(y));
}

inline Column real(std::string name, std::vector<double> x) {
  return covadj::numeric_column(std::move(name), Role::Covariate, Kind::Real, std::move(x));
}

inline Column binary(std::string name, std::vector<double> x, Role role = Role::Covariate) {
  return covadj::numeric_column(std::move(name), role, Kind::Binary, std::move(x));
}

inline Column stratum(std::string name, std::vector<std::string> levels, std::vector<int> codes) {
  return covadj::categorical_column(std::move(name), Role::Stratum, std::move(levels), std::move(codes));
}

inline covadj::TrialDataset dataset(std::vector<Column> cols) { return covadj::TrialDataset::from_columns(std::move(cols)); }

}  // namespace fx

#include <covadj/rng.hpp>

#include <cmath>

namespace fx {

/// Random trial with a normal and a binary covariate, equal simple
/// randomization over k arms, and either a gaussian or a logistic outcome
/// that depends on both covariates and the arm.
inline covadj::TrialDataset random_trial(std::size_t n, std::uint64_t seed, int k = 2, bool binary_outcome = false) {
  covadj::CounterRng rng(seed);
  std::vector<int> a(n);
  std::vector<double> x1(n), x2(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = i < static_cast<std::size_t>(k) ? static_cast<int>(i) : static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    x1[i] = rng.normal();
    x2[i] = rng.bernoulli(0.4) ? 1.0 : 0.0;
    const double eta = -0.3 + 0.8 * x1[i] - 0.6 * x2[i] + 0.4 * a[i] + 0.3 * a[i] * x1[i];
    y[i] = binary_outcome ? (rng.bernoulli(1.0 / (1.0 + std::exp(-eta))) ? 1.0 : 0.0) : eta + rng.normal() * (1.0 + 0.5 * a[i]);
  }
  std::vector<double> av(a.begin(), a.end());
  return dataset({covadj::numeric_column("arm", Role::Arm, Kind::Count, av),
                  outcome(y, binary_outcome ? Kind::Binary : Kind::Real), real("x1", x1), binary("x2", x2)});
}

}  // namespace fx
