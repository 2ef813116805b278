#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "cascade/confidence.hpp"
#include "support/oracle.hpp"

using namespace cascade;

namespace {
const std::vector<std::string> ABCD = {"A", "B", "C", "D"};

ChoiceDistribution dist(std::initializer_list<TokenProb> e) { return ChoiceDistribution{e}; }
}  // namespace

TEST_CASE("canonical tokens") {
  CHECK(canonical_token("A") == "A");
  CHECK(canonical_token(" A") == "A");
  CHECK(canonical_token("(A)") == "A");
  CHECK(canonical_token(" ( B ) ") == "B");
  CHECK(canonical_token("((C))") == "(C)");
  CHECK(canonical_token("a") == "a");
  CHECK(canonical_token("") == "");
}

TEST_CASE("multiple-choice P(T) examples") {
  auto r = p_t_multiple_choice(dist({{"A", 1.0}}), ABCD);
  CHECK(r.chosen_label == "A");
  CHECK(r.p_t == 1.0);

  r = p_t_multiple_choice(dist({{"A", 0.25}, {"B", 0.25}, {"C", 0.25}, {"D", 0.25}}), ABCD);
  CHECK(r.chosen_label == "A");
  CHECK(r.p_t == 0.25);

  r = p_t_multiple_choice(dist({{"A", 0.10}, {"B", 0.70}, {"C", 0.15}, {"D", 0.05}}), ABCD);
  CHECK(r.chosen_label == "B");
  CHECK(r.p_t == 0.70);
}

TEST_CASE("tie-break follows label order, not distribution order") {
  auto r = p_t_multiple_choice(dist({{"D", 0.4}, {"B", 0.4}, {"A", 0.1}}), ABCD);
  CHECK(r.chosen_label == "B");
  r = p_t_multiple_choice(dist({{"D", 0.4}, {"B", 0.4}}), {"D", "C", "B", "A"});
  CHECK(r.chosen_label == "D");
}

TEST_CASE("no renormalization over the label subset") {
  auto r = p_t_multiple_choice(dist({{"A", 0.3}, {"B", 0.1}, {"The", 0.6}}), ABCD);
  CHECK(r.chosen_label == "A");
  CHECK(r.p_t == 0.3);
}

TEST_CASE("spelling variants map to labels; duplicates take the max") {
  auto r = p_t_multiple_choice(dist({{" A", 0.2}, {"(B)", 0.3}, {"A", 0.25}}), ABCD);
  CHECK(r.chosen_label == "B");
  CHECK(r.p_t == 0.3);
  r = p_t_multiple_choice(dist({{" A", 0.2}, {"A", 0.25}}), ABCD);
  CHECK(r.chosen_label == "A");
  CHECK(r.p_t == 0.25);
}

TEST_CASE("no label present") {
  auto r = p_t_multiple_choice(dist({{"The", 0.9}, {"I", 0.1}}), ABCD);
  CHECK_FALSE(r.matched);
  CHECK(r.chosen_label == "A");
  CHECK(r.p_t == 0.0);
  r = p_t_multiple_choice(dist({}), ABCD);
  CHECK_FALSE(r.matched);
  CHECK_THROWS_AS(p_t_multiple_choice(dist({{"A", 1.0}}), {}), std::invalid_argument);
}

TEST_CASE("first-token P(T) examples") {
  std::vector<std::string> ans{"Answer"};
  CHECK(p_t_first_token(dist({{"Answer", 1.0}}), ans) == 1.0);
  CHECK(p_t_first_token(dist({{"Answer", 0.6}, {" Answer", 0.2}, {"I", 0.2}}), {"Answer", " Answer"}) ==
        doctest::Approx(0.8).epsilon(1e-12));
  CHECK(p_t_first_token(dist({{"I", 0.9}, {"The", 0.1}}), ans) == 0.0);
  CHECK_THROWS_AS(p_t_first_token(dist({{"Answer", 1.0}}), {}), std::invalid_argument);
}

TEST_CASE("property: engine agrees with brute-force argmax; invariants hold") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<std::string> spellings = {"", " ", "(", " ("};
  for (int trial = 0; trial < 5000; ++trial) {
    ChoiceDistribution d;
    double budget = 1.0;
    std::set<std::string> used;
    const int n = static_cast<int>(rng() % 7);
    for (int i = 0; i < n; ++i) {
      std::string label = rng() % 5 == 0 ? "The" : ABCD[rng() % 4];
      std::string s = spellings[rng() % 4];
      std::string tok = s + label + (s.find('(') != std::string::npos ? ")" : "");
      if (!used.insert(tok).second) continue;
      // coarse grid to produce ties
      double p = std::floor(u(rng) * budget * 8) / 8;
      budget -= p;
      d.entries.push_back({tok, p});
    }
    auto r = p_t_multiple_choice(d, ABCD);
    auto o = testsupport::oracle_pt(d, ABCD);
    CHECK(r.chosen_label == o.label);
    CHECK(r.p_t == o.p);
    // chosen label is a candidate, p_t in [0, 1] and equals the recorded mass
    CHECK(std::find(ABCD.begin(), ABCD.end(), r.chosen_label) != ABCD.end());
    CHECK(r.p_t >= 0.0);
    CHECK(r.p_t <= 1.0);
    // every label's best spelling is no higher than p_t
    for (const auto& e : d.entries) {
      if (std::find(ABCD.begin(), ABCD.end(), canonical_token(e.token)) != ABCD.end()) CHECK(e.prob <= r.p_t);
    }
    // uniform scaling keeps the argmax and scales p_t
    ChoiceDistribution half = d;
    for (auto& e : half.entries) e.prob *= 0.5;
    auto rh = p_t_multiple_choice(half, ABCD);
    CHECK(rh.chosen_label == r.chosen_label);
    CHECK(rh.p_t == r.p_t * 0.5);
  }
}

TEST_CASE("first-token P(T) never exceeds one") {
  ChoiceDistribution d{{{"Answer", 0.5}, {" Answer", 0.3}, {"(Answer)", 0.2}}};
  CHECK(p_t_first_token(d, {"Answer"}) <= 1.0);
  // mass above one is rejected rather than clamped
  ChoiceDistribution bad{{{"Answer", 0.7}, {" Answer", 0.3}, {"(Answer)", 0.1}}};
  CHECK_THROWS(p_t_first_token(bad, {"Answer"}));
}
