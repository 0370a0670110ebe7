#pragma once

#include <cmath>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "error.hpp"
#include "numeric.hpp"
#include "trial_data.hpp"

namespace covadj::mh {

enum class Estimand { ATE, MH };

inline std::string to_string(Estimand e) { return e == Estimand::ATE ? "ATE" : "MH"; }

inline Estimand parse_estimand(const std::string& s) {
  if (s == "ATE" || s == "ate") return Estimand::ATE;
  if (s == "MH" || s == "mh") return Estimand::MH;
  fail(ErrorCode::InvalidArgument, "unknown estimand '" + s + "'");
}

struct StratumRow {
  std::string level;
  std::size_t n_a = 0, n_b = 0;
  double s_a = 0.0, s_b = 0.0;

  double weight() const {
    return n_a && n_b ? static_cast<double>(n_a) * static_cast<double>(n_b) / static_cast<double>(n_a + n_b) : 0.0;
  }
  // Undefined (NaN) when a level lacks an arm.
  double delta() const {
    return n_a && n_b ? s_a / static_cast<double>(n_a) - s_b / static_cast<double>(n_b)
                      : std::numeric_limits<double>::quiet_NaN();
  }
};

struct MHResult {
  std::string arm_a, arm_b;
  Estimand estimand = Estimand::ATE;
  double estimate = 0.0;  // weighted mean of p_a(l) - p_b(l)
  double se = 0.0;
  double z = 0.0, p = 1.0, ci_low = 0.0, ci_high = 0.0;
  std::vector<StratumRow> table;
  std::vector<std::string> warnings;
};

/// Tabulates arms a and b of a binary outcome across the levels of
/// `category`.
inline std::vector<StratumRow> stratum_table(const TrialDataset& data, const std::string& category, int a, int b) {
  require(data.has_outcome(), ErrorCode::ValidationError, "Mantel-Haenszel needs an outcome column");
  std::vector<std::string> labels;
  const auto level = data.joint_levels({category}, &labels);
  const auto y = data.outcome();
  const auto arm = data.arm_of();
  std::vector<StratumRow> table(labels.size());
  for (std::size_t l = 0; l < labels.size(); ++l) table[l].level = labels[l];
  for (std::size_t i = 0; i < data.n(); ++i) {
    if (arm[i] != a && arm[i] != b) continue;
    require(y[i] == 0.0 || y[i] == 1.0, ErrorCode::NotBinaryOutcome, "outcome must be 0/1 for Mantel-Haenszel");
    auto& row = table[level[i]];
    if (arm[i] == a) {
      ++row.n_a;
      row.s_a += y[i];
    } else {
      ++row.n_b;
      row.s_b += y[i];
    }
  }
  return table;
}

namespace detail {

// Sato's variance for the risk difference, consistent in both large-stratum
// and sparse-stratum limits for the common (MH) effect.
inline double sato_variance(const std::vector<StratumRow>& t, double delta) {
  double w = 0.0, p = 0.0, q = 0.0;
  for (const auto& r : t) {
    if (!r.n_a || !r.n_b) continue;
    const double na = static_cast<double>(r.n_a), nb = static_cast<double>(r.n_b), n = na + nb;
    w += na * nb / n;
    p += (na * na * r.s_b - nb * nb * r.s_a + na * nb * (nb - na) / 2.0) / (n * n);
    q += (r.s_a * (nb - r.s_b) + r.s_b * (na - r.s_a)) / (2.0 * n);
  }
  return (delta * p + q) / (w * w);
}

// Delta-method variance treating subjects as iid draws of (level, arm, y).
// With N_l = (n_b S_a - n_a S_b)/n_l and D_l = n_a n_b / n_l, the estimate is
// sum N_l / sum D_l and each subject contributes dN_i - delta * dD_i.
inline double ate_variance(const TrialDataset& data, const std::string& category, int a, int b,
                           const std::vector<StratumRow>& t, double delta) {
  const auto level = data.joint_levels({category});
  const auto y = data.outcome();
  const auto arm = data.arm_of();
  double d_total = 0.0;
  for (const auto& r : t) d_total += r.weight();
  std::vector<double> h2;
  for (std::size_t i = 0; i < data.n(); ++i) {
    if (arm[i] != a && arm[i] != b) continue;
    const auto& r = t[level[i]];
    const double na = static_cast<double>(r.n_a), nb = static_cast<double>(r.n_b), n = na + nb;
    const double num = (nb * r.s_a - na * r.s_b) / n;
    const double den = na * nb / n;
    double dn, dd;
    if (arm[i] == a) {
      dn = (nb * y[i] - r.s_b) / n - num / n;
      dd = nb / n - den / n;
    } else {
      dn = (r.s_a - na * y[i]) / n - num / n;
      dd = na / n - den / n;
    }
    const double h = dn - delta * dd;
    h2.push_back(h * h);
  }
  return pairwise_sum(h2) / (d_total * d_total);
}

}  // namespace detail

/// Mantel-Haenszel risk difference p_a - p_b over the levels of `category`.
/// The point estimate does not depend on the estimand; the standard error
/// does. Levels lacking one of the two arms get weight zero and a warning.
inline MHResult estimate_mh(const TrialDataset& data, const std::string& category, Estimand estimand, int a = 1,
                            int b = 0, double alpha = 0.05) {
  require(a >= 0 && b >= 0 && static_cast<std::size_t>(a) < data.k() && static_cast<std::size_t>(b) < data.k() && a != b,
          ErrorCode::InvalidArgument, "Mantel-Haenszel needs two distinct arms");
  MHResult out;
  out.arm_a = data.arms()[a];
  out.arm_b = data.arms()[b];
  out.estimand = estimand;
  out.table = stratum_table(data, category, a, b);

  std::vector<double> num, den;
  for (const auto& r : out.table) {
    const double w = r.weight();
    if (w == 0.0) {
      if (r.n_a + r.n_b > 0) out.warnings.push_back("level '" + r.level + "' lacks one arm and gets weight 0");
      continue;
    }
    num.push_back(w * r.delta());
    den.push_back(w);
  }
  require(!den.empty(), ErrorCode::AllWeightsZero, "no level of '" + category + "' contains both arms");
  out.estimate = pairwise_sum(num) / pairwise_sum(den);

  const double var = estimand == Estimand::MH ? detail::sato_variance(out.table, out.estimate)
                                              : detail::ate_variance(data, category, a, b, out.table, out.estimate);
  out.se = std::sqrt(std::max(var, 0.0));
  out.z = out.se > 0.0 ? out.estimate / out.se : 0.0;
  out.p = two_sided_p(out.z);
  const double q = normal_quantile(1.0 - alpha / 2.0);
  out.ci_low = out.estimate - q * out.se;
  out.ci_high = out.estimate + q * out.se;
  return out;
}

inline nlohmann::json to_json(const MHResult& r) {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& row : r.table) {
    nlohmann::json j{{"level", row.level}, {"n_a", row.n_a},   {"n_b", row.n_b},
                     {"s_a", row.s_a},     {"s_b", row.s_b},   {"weight", row.weight()}};
    j["delta"] = row.n_a && row.n_b ? nlohmann::json(row.delta()) : nlohmann::json(nullptr);
    table.push_back(std::move(j));
  }
  return {{"method", "mantel-haenszel"}, {"estimand", to_string(r.estimand)}, {"a", r.arm_a},
          {"b", r.arm_b},                {"estimate", r.estimate},           {"se", r.se},
          {"z", r.z},                    {"p", r.p},                         {"ci", {r.ci_low, r.ci_high}},
          {"table", table},              {"warnings", r.warnings}};
}

}  // namespace covadj::mh
