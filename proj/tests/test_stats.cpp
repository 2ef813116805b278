#include <cmath>
#include <random>

#include "doctest.h"
#include "cascade/stats.hpp"

using namespace cascade;

namespace {

DecisionRecord rec(const std::string& id, std::optional<bool> correct) {
  DecisionRecord d;
  d.query_id = id;
  d.answering_model = "m";
  d.correct = correct;
  return d;
}

}  // namespace

TEST_CASE("regularized gamma against closed forms") {
  // Q(1/2, x) = erfc(sqrt(x)), Q(1, x) = exp(-x)
  for (double x : {1e-6, 0.01, 0.3, 1.0, 1.5, 2.0, 3.84, 7.0, 20.0, 60.0}) {
    CHECK(regularized_gamma_q(0.5, x) == doctest::Approx(std::erfc(std::sqrt(x))).epsilon(1e-12));
    CHECK(regularized_gamma_q(1.0, x) == doctest::Approx(std::exp(-x)).epsilon(1e-12));
    CHECK(regularized_gamma_p(2.5, x) + regularized_gamma_q(2.5, x) == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK(regularized_gamma_p(0.5, 0.0) == 0.0);
  CHECK(regularized_gamma_q(0.5, 0.0) == 1.0);
  CHECK_THROWS(regularized_gamma_p(0.0, 1.0));
  CHECK_THROWS(regularized_gamma_p(1.0, -1.0));
}

TEST_CASE("chi-squared survival with one degree of freedom") {
  CHECK(chi_squared_sf(4.00, 1) == doctest::Approx(0.0455).epsilon(0.0005 / 0.0455));
  CHECK(std::abs(chi_squared_sf(4.00, 1) - 0.0455) <= 0.0005);
  CHECK(chi_squared_sf(3.841458820694124, 1) == doctest::Approx(0.05).epsilon(1e-9));
  CHECK(chi_squared_sf(0.0, 1) == 1.0);
}

TEST_CASE("exact binomial tail") {
  CHECK(binomial_two_sided_half(0, 10) == doctest::Approx(0.001953125).epsilon(1e-12));
  CHECK(std::abs(binomial_two_sided_half(0, 10) - 0.001953125) <= 1e-9);
  CHECK(binomial_two_sided_half(5, 10) == 1.0);
  CHECK(binomial_two_sided_half(0, 0) == 1.0);
  // P(X <= 2 | n = 12) = (1 + 12 + 66) / 4096
  CHECK(binomial_two_sided_half(2, 12) == doctest::Approx(2.0 * 79.0 / 4096.0).epsilon(1e-12));
  CHECK(binomial_two_sided_half(10, 12) == binomial_two_sided_half(2, 12));
}

TEST_CASE("McNemar paths") {
  auto r = mcnemar(18, 7);  // (|18 - 7| - 1)^2 / 25 = 4.00
  CHECK(r.method == McNemarMethod::chi_squared_cc);
  CHECK(r.statistic.value() == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(std::abs(r.p_value - 0.0455) <= 0.0005);

  r = mcnemar(10, 0);
  CHECK(r.method == McNemarMethod::exact_binomial);
  CHECK_FALSE(r.statistic.has_value());
  CHECK(std::abs(r.p_value - 0.001953125) <= 1e-9);

  r = mcnemar(20, 20);
  CHECK(r.statistic.value() == 0.0);
  CHECK(r.p_value == 1.0);
  r = mcnemar(5, 5);
  CHECK(r.p_value == 1.0);
  r = mcnemar(0, 0);
  CHECK(r.p_value == 1.0);
  // |b - c| = 0 or 1 clamps the corrected statistic at zero
  r = mcnemar(30, 31);
  CHECK(r.statistic.value() == 0.0);

  // threshold decides the path
  CHECK(mcnemar(12, 12, 25).method == McNemarMethod::exact_binomial);
  CHECK(mcnemar(13, 12, 25).method == McNemarMethod::chi_squared_cc);
  CHECK(mcnemar(10, 0, 5).method == McNemarMethod::chi_squared_cc);
  CHECK_THROWS(mcnemar(-1, 3));
}

TEST_CASE("McNemar is symmetric and p stays in [0, 1]") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i) {
    std::int64_t b = static_cast<std::int64_t>(rng() % 80), c = static_cast<std::int64_t>(rng() % 80);
    auto x = mcnemar(b, c), y = mcnemar(c, b);
    CHECK(x.p_value == doctest::Approx(y.p_value).epsilon(1e-15));
    CHECK(x.p_value >= 0.0);
    CHECK(x.p_value <= 1.0);
  }
}

TEST_CASE("discordant counts pair decisions by query id") {
  std::vector<DecisionRecord> a{rec("q1", true), rec("q2", true), rec("q3", false)};
  std::vector<DecisionRecord> b{rec("q3", true), rec("q2", true), rec("q1", false)};
  CHECK(discordant_counts(a, b) == std::pair<std::int64_t, std::int64_t>{1, 1});
  CHECK(discordant_counts(a, a) == std::pair<std::int64_t, std::int64_t>{0, 0});

  std::vector<DecisionRecord> other{rec("x1", true), rec("x2", true), rec("x3", true)};
  CHECK_THROWS(discordant_counts(a, other));
  std::vector<DecisionRecord> shorter{rec("q1", true)};
  CHECK_THROWS(discordant_counts(a, shorter));
  std::vector<DecisionRecord> unlabeled{rec("q1", std::nullopt), rec("q2", true), rec("q3", true)};
  CHECK_THROWS(discordant_counts(a, unlabeled));
  std::vector<DecisionRecord> dup{rec("q1", true), rec("q1", true), rec("q3", true)};
  CHECK_THROWS(discordant_counts(dup, a));
}
