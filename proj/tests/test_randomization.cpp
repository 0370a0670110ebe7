#include <catch_amalgamated.hpp>

#include <covadj/randomization.hpp>

#include <cmath>

using namespace covadj;
using namespace covadj::randomization;

TEST_CASE("degenerate simple randomization") {
  std::vector<int> strata(50, 0);
  auto t = assign(Simple{{1.0, 0.0}}, strata, 2, 1);
  for (int a : t.arms) REQUIRE(a == 0);
}

TEST_CASE("simple randomization matches target within 3 SE") {
  std::vector<int> strata(10000, 0);
  auto t = assign(Simple{{0.3, 0.7}}, strata, 2, 2024);
  double n1 = 0;
  for (int a : t.arms) n1 += a;
  const double se = std::sqrt(10000 * 0.3 * 0.7);
  REQUIRE(std::abs(n1 - 7000) < 3 * se);
}

TEST_CASE("permuted blocks balance each completed block") {
  std::vector<int> strata(8, 0);
  auto t = assign(PermutedBlock{4, {}}, strata, 2, 5);
  for (int b = 0; b < 2; ++b) {
    int ones = 0;
    for (int i = 0; i < 4; ++i) ones += t.arms[b * 4 + i];
    REQUIRE(ones == 2);
  }
  REQUIRE(t.per_stratum_imbalance == std::vector<int>{0});
}

TEST_CASE("permuted block prefix imbalance never exceeds B/2") {
  CounterRng rng(9);
  std::vector<int> strata(600);
  for (auto& s : strata) s = static_cast<int>(rng.below(3));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto t = assign(PermutedBlock{6, {1, 2}}, strata, 2, seed);
    std::vector<std::array<int, 2>> counts(3, {0, 0});
    for (std::size_t i = 0; i < strata.size(); ++i) {
      auto& c = counts[strata[i]];
      ++c[t.arms[i]];
      // 1:2 ratio: imbalance measured against the target proportions
      REQUIRE(std::abs(2 * c[0] - c[1]) <= 6);
      if ((c[0] + c[1]) % 6 == 0) REQUIRE(2 * c[0] == c[1]);
    }
  }
}

TEST_CASE("assignment is reproducible") {
  std::vector<int> strata{0, 1, 0, 1, 1, 0, 0, 1, 1, 1};
  for (const Scheme& s : std::vector<Scheme>{Simple{{0.5, 0.5}}, BiasedCoin{{0.5, 0.5}, 0.75}, PermutedBlock{2, {}},
                                               PocockSimon{{1.0}, 0.8}}) {
    auto a = assign(s, strata, 2, 77);
    auto b = assign(s, strata, 2, 77);
    REQUIRE(a.arms == b.arms);
    REQUIRE(a.per_stratum_imbalance == b.per_stratum_imbalance);
  }
}

TEST_CASE("pocock-simon second subject takes the opposite arm") {
  Factors f{{{0, 0, 1, 0}, {1, 1, 0, 0}}};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto t = assign(PocockSimon{{1.0, 1.0}, 1.0}, f, 2, seed);
    REQUIRE(t.arms[1] == 1 - t.arms[0]);
  }
}

TEST_CASE("pocock-simon on one factor with q=1 alternates within levels") {
  std::vector<int> level{0, 1, 1, 0, 2, 0, 1, 2, 2, 0, 1, 0, 2, 1, 0, 0};
  auto t = assign(PocockSimon{{1.0}, 1.0}, level, 2, 31);
  for (int l = 0; l < 3; ++l) {
    std::vector<int> seq;
    for (std::size_t i = 0; i < level.size(); ++i)
      if (level[i] == l) seq.push_back(t.arms[i]);
    for (std::size_t j = 0; j + 1 < seq.size(); j += 2) REQUIRE(seq[j + 1] == 1 - seq[j]);
  }
}

TEST_CASE("pocock-simon hand simulation of the bookkeeping") {
  // Subject 3 shares factor 0 with subjects 1-2 (already split 1-1) and
  // factor 1 with nobody; every arm then scores the same, so the pick is
  // among all arms. Subject 4 matches subject 3 on both factors and must
  // take the other arm.
  Factors f{{{0, 0, 0, 0}, {0, 0, 1, 1}}};
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto t = assign(PocockSimon{{1.0, 1.0}, 1.0}, f, 2, seed);
    REQUIRE(t.arms[1] == 1 - t.arms[0]);
    REQUIRE(t.arms[3] == 1 - t.arms[2]);
  }
}

TEST_CASE("biased coin favors the lagging arm") {
  std::vector<int> strata(20000, 0);
  auto t = assign(BiasedCoin{{0.5, 0.5}, 1.0}, strata, 2, 4);
  // b = 1 gives strict alternation in pairs
  for (std::size_t i = 0; i + 1 < t.arms.size(); i += 2) REQUIRE(t.arms[i + 1] == 1 - t.arms[i]);
  auto u = assign(BiasedCoin{{0.5, 0.5}, 2.0 / 3.0}, strata, 2, 4);
  REQUIRE(u.per_stratum_imbalance[0] < 60);
}

TEST_CASE("invalid schemes") {
  std::vector<int> s{0, 0, 0, 0};
  REQUIRE_THROWS_AS(assign(Simple{{0.6, 0.6}}, s, 2, 1), Error);
  REQUIRE_THROWS_AS(assign(BiasedCoin{{0.5, 0.5}, 0.5}, s, 2, 1), Error);
  REQUIRE_THROWS_AS(assign(PermutedBlock{3, {}}, s, 2, 1), Error);
  REQUIRE_THROWS_AS(assign(PermutedBlock{1, {}}, s, 2, 1), Error);
  REQUIRE_THROWS_AS(assign(PocockSimon{{0.0}, 0.8}, s, 2, 1), Error);
  REQUIRE_THROWS_AS(assign(PocockSimon{{1.0}, 0.4}, s, 2, 1), Error);
  try {
    assign(Simple{{2.0, -1.0}}, s, 2, 1);
  } catch (const Error& e) {
    REQUIRE(e.code() == ErrorCode::InvalidScheme);
  }
}

TEST_CASE("scheme json round trip") {
  auto j = nlohmann::json::parse(R"({"type":"permuted_block","block_size":6,"ratio":[1,2]})");
  auto s = scheme_from_json(j, 2);
  REQUIRE(std::get<PermutedBlock>(s).block_size == 6);
  REQUIRE(to_json(s) == j);
  auto d = scheme_from_json(nlohmann::json::parse(R"({"type":"simple"})"), 3);
  REQUIRE(std::get<Simple>(d).target.size() == 3);
}
