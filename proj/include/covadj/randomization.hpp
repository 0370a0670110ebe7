#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "error.hpp"
#include "rng.hpp"

namespace covadj::randomization {

struct Simple {
  std::vector<double> target;  // allocation probabilities, sum to 1
};

/// Efron-style biased coin on total arm counts.
struct BiasedCoin {
  std::vector<double> target;
  double bias = 2.0 / 3.0;
};

/// Permuted blocks within each joint stratum.
struct PermutedBlock {
  int block_size = 4;
  std::vector<int> ratio;  // allocation ratio per arm; empty means 1:1:...
};

/// Pocock-Simon minimization over marginal factor counts (range metric).
struct PocockSimon {
  std::vector<double> weights;  // one per factor
  double q = 0.8;               // probability of taking a minimizing arm
};

using Scheme = std::variant<Simple, BiasedCoin, PermutedBlock, PocockSimon>;

/// Per-subject factor levels. levels[f][i] is subject i's level on factor f.
struct Factors {
  std::vector<std::vector<int>> levels;

  std::size_t size() const { return levels.empty() ? 0 : levels.front().size(); }

  static Factors single(std::span<const int> strata) { return Factors{{std::vector<int>(strata.begin(), strata.end())}}; }

  /// Joint level index, lexicographic over observed combinations.
  std::vector<int> joint() const {
    const std::size_t n = size();
    std::map<std::vector<int>, int> order;
    std::vector<std::vector<int>> tuples(n, std::vector<int>(levels.size()));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t f = 0; f < levels.size(); ++f) tuples[i][f] = levels[f][i];
    for (const auto& t : tuples) order.emplace(t, 0);
    int next = 0;
    for (auto& [t, idx] : order) idx = next++;
    std::vector<int> out(n, 0);
    for (std::size_t i = 0; i < n; ++i) out[i] = order.at(tuples[i]);
    return out;
  }
};

struct AssignmentTrace {
  std::vector<int> arms;                    // 0-based arm per subject
  std::vector<int> per_stratum_imbalance;   // max - min arm count per joint stratum
  std::uint64_t seed = 0;
};

namespace detail {
inline void check_target(const std::vector<double>& target, std::size_t k, bool open_interval) {
  require(target.size() == k, ErrorCode::InvalidScheme, "target has wrong number of arms");
  double total = 0.0;
  for (double p : target) {
    require(open_interval ? (p > 0.0 && p < 1.0) : (p >= 0.0 && p <= 1.0), ErrorCode::InvalidScheme,
            "allocation probability out of range");
    total += p;
  }
  require(std::abs(total - 1.0) < 1e-9, ErrorCode::InvalidScheme, "allocation probabilities must sum to 1");
}

inline int draw_categorical(CounterRng& rng, const std::vector<double>& p) {
  const double u = rng.uniform();
  double cdf = 0.0;
  int last_positive = 0;
  for (std::size_t a = 0; a < p.size(); ++a) {
    if (p[a] <= 0.0) continue;
    last_positive = static_cast<int>(a);
    cdf += p[a];
    if (u < cdf) return static_cast<int>(a);
  }
  return last_positive;
}

inline std::vector<int> block_ratio(const PermutedBlock& s, std::size_t k) {
  return s.ratio.empty() ? std::vector<int>(k, 1) : s.ratio;
}
}  // namespace detail

/// Validates scheme parameters against the arm count and factor table.
inline void validate(const Scheme& scheme, std::size_t k, std::size_t num_factors) {
  require(k >= 2, ErrorCode::InvalidScheme, "need at least two arms");
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Simple>) {
          detail::check_target(s.target, k, false);
        } else if constexpr (std::is_same_v<T, BiasedCoin>) {
          detail::check_target(s.target, k, true);
          require(s.bias > 0.5 && s.bias <= 1.0, ErrorCode::InvalidScheme, "biased-coin bias must be in (0.5, 1]");
        } else if constexpr (std::is_same_v<T, PermutedBlock>) {
          const auto ratio = detail::block_ratio(s, k);
          require(ratio.size() == k, ErrorCode::InvalidScheme, "block ratio has wrong number of arms");
          int total = 0;
          for (int r : ratio) {
            require(r >= 1, ErrorCode::InvalidScheme, "block ratio entries must be positive");
            total += r;
          }
          require(s.block_size >= static_cast<int>(k), ErrorCode::InvalidScheme, "block size smaller than arm count");
          require(s.block_size % total == 0, ErrorCode::InvalidScheme, "block size not a multiple of the ratio total");
        } else {
          require(s.weights.size() == num_factors, ErrorCode::InvalidScheme,
                  "Pocock-Simon needs one weight per factor");
          double total = 0.0;
          for (double w : s.weights) {
            require(w >= 0.0, ErrorCode::InvalidScheme, "factor weights must be non-negative");
            total += w;
          }
          require(total > 0.0, ErrorCode::InvalidScheme, "factor weights must have a positive sum");
          require(s.q > 0.5 && s.q <= 1.0, ErrorCode::InvalidScheme, "Pocock-Simon q must be in (0.5, 1]");
        }
      },
      scheme);
}

/// Sequentially assigns n subjects to k arms. Deterministic in
/// (scheme, factors, seed).
inline AssignmentTrace assign(const Scheme& scheme, const Factors& factors, std::size_t k, std::uint64_t seed) {
  validate(scheme, k, factors.levels.size());
  const std::size_t n = factors.size();
  CounterRng rng(seed);
  AssignmentTrace trace;
  trace.seed = seed;
  trace.arms.assign(n, 0);
  const auto joint = factors.joint();
  const int num_strata = joint.empty() ? 0 : *std::max_element(joint.begin(), joint.end()) + 1;

  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Simple>) {
          for (std::size_t i = 0; i < n; ++i) trace.arms[i] = detail::draw_categorical(rng, s.target);
        } else if constexpr (std::is_same_v<T, BiasedCoin>) {
          std::vector<double> counts(k, 0.0);
          for (std::size_t i = 0; i < n; ++i) {
            // deficit_a = expected count under target minus realized count
            std::vector<double> deficit(k);
            for (std::size_t a = 0; a < k; ++a) deficit[a] = s.target[a] * static_cast<double>(i) - counts[a];
            const double top = *std::max_element(deficit.begin(), deficit.end());
            const double bottom = *std::min_element(deficit.begin(), deficit.end());
            int arm;
            if (top - bottom < 1e-9) {
              arm = detail::draw_categorical(rng, s.target);
            } else {
              std::vector<int> under;
              for (std::size_t a = 0; a < k; ++a)
                if (top - deficit[a] < 1e-9) under.push_back(static_cast<int>(a));
              if (rng.uniform() < s.bias) {
                arm = under[rng.below(under.size())];
              } else {
                std::vector<double> rest(s.target);
                for (int a : under) rest[a] = 0.0;
                const double mass = std::accumulate(rest.begin(), rest.end(), 0.0);
                for (double& p : rest) p /= mass;
                arm = detail::draw_categorical(rng, rest);
              }
            }
            trace.arms[i] = arm;
            counts[arm] += 1.0;
          }
        } else if constexpr (std::is_same_v<T, PermutedBlock>) {
          const auto ratio = detail::block_ratio(s, k);
          const int per_unit = s.block_size / std::accumulate(ratio.begin(), ratio.end(), 0);
          std::vector<std::vector<int>> pending(num_strata);
          for (std::size_t i = 0; i < n; ++i) {
            auto& queue = pending[joint[i]];
            if (queue.empty()) {
              for (std::size_t a = 0; a < k; ++a)
                for (int r = 0; r < ratio[a] * per_unit; ++r) queue.push_back(static_cast<int>(a));
              rng.shuffle(std::span<int>(queue));
            }
            trace.arms[i] = queue.back();
            queue.pop_back();
          }
        } else {
          // counts[f][level][arm]
          std::vector<std::vector<std::vector<int>>> counts(factors.levels.size());
          for (std::size_t f = 0; f < factors.levels.size(); ++f) {
            const int levels = factors.levels[f].empty()
                                   ? 0
                                   : *std::max_element(factors.levels[f].begin(), factors.levels[f].end()) + 1;
            counts[f].assign(levels, std::vector<int>(k, 0));
          }
          for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> score(k, 0.0);
            for (std::size_t cand = 0; cand < k; ++cand) {
              for (std::size_t f = 0; f < factors.levels.size(); ++f) {
                auto hypothetical = counts[f][factors.levels[f][i]];
                ++hypothetical[cand];
                const auto [lo, hi] = std::minmax_element(hypothetical.begin(), hypothetical.end());
                score[cand] += s.weights[f] * static_cast<double>(*hi - *lo);
              }
            }
            const double best = *std::min_element(score.begin(), score.end());
            std::vector<int> minimizers, others;
            for (std::size_t a = 0; a < k; ++a)
              (score[a] - best < 1e-12 ? minimizers : others).push_back(static_cast<int>(a));
            int arm;
            if (others.empty() || rng.uniform() < s.q) {
              arm = minimizers[rng.below(minimizers.size())];
            } else {
              arm = others[rng.below(others.size())];
            }
            trace.arms[i] = arm;
            for (std::size_t f = 0; f < factors.levels.size(); ++f) ++counts[f][factors.levels[f][i]][arm];
          }
        }
      },
      scheme);

  std::vector<std::vector<int>> per(num_strata, std::vector<int>(k, 0));
  for (std::size_t i = 0; i < n; ++i) ++per[joint[i]][trace.arms[i]];
  for (const auto& c : per) {
    const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
    trace.per_stratum_imbalance.push_back(*hi - *lo);
  }
  return trace;
}

inline AssignmentTrace assign(const Scheme& scheme, std::span<const int> strata, std::size_t k, std::uint64_t seed) {
  return assign(scheme, Factors::single(strata), k, seed);
}

inline std::string scheme_name(const Scheme& s) {
  switch (s.index()) {
    case 0: return "simple";
    case 1: return "biased_coin";
    case 2: return "permuted_block";
    default: return "pocock_simon";
  }
}

inline nlohmann::json to_json(const Scheme& scheme) {
  return std::visit(
      [](const auto& s) -> nlohmann::json {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Simple>) {
          return {{"type", "simple"}, {"target", s.target}};
        } else if constexpr (std::is_same_v<T, BiasedCoin>) {
          return {{"type", "biased_coin"}, {"target", s.target}, {"bias", s.bias}};
        } else if constexpr (std::is_same_v<T, PermutedBlock>) {
          return {{"type", "permuted_block"}, {"block_size", s.block_size}, {"ratio", s.ratio}};
        } else {
          return {{"type", "pocock_simon"}, {"weights", s.weights}, {"q", s.q}};
        }
      },
      scheme);
}

/// Parses {"type": simple|biased_coin|permuted_block|pocock_simon, ...}.
/// Missing targets default to equal allocation over `k` arms.
inline Scheme scheme_from_json(const nlohmann::json& j, std::size_t k) {
  try {
    const auto type = j.at("type").get<std::string>();
    auto target = [&] {
      return j.contains("target") ? j.at("target").get<std::vector<double>>()
                                  : std::vector<double>(k, 1.0 / static_cast<double>(k));
    };
    if (type == "simple") return Simple{target()};
    if (type == "biased_coin") return BiasedCoin{target(), j.value("bias", 2.0 / 3.0)};
    if (type == "permuted_block")
      return PermutedBlock{j.value("block_size", 4), j.value("ratio", std::vector<int>{})};
    if (type == "pocock_simon") return PocockSimon{j.at("weights").get<std::vector<double>>(), j.value("q", 0.8)};
    fail(ErrorCode::InvalidScheme, "unknown scheme type '" + type + "'");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidScheme, e.what());
  }
}

}  // namespace covadj::randomization
