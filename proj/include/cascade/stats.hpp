#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cascade/router.hpp"

namespace cascade {

// Regularized incomplete gamma functions P(a, x) and Q(a, x) = 1 - P(a, x).
// Series expansion below x < a + 1, Lentz continued fraction above.
double regularized_gamma_p(double a, double x);
double regularized_gamma_q(double a, double x);

// Upper tail of the chi-squared distribution.
double chi_squared_sf(double statistic, double dof);

// Two-sided exact binomial p-value for k successes in n Bernoulli(1/2) trials:
// min(1, 2 * P(X <= min(k, n - k))).
double binomial_two_sided_half(std::int64_t k, std::int64_t n);

enum class McNemarMethod { chi_squared_cc, exact_binomial };
std::string to_string(McNemarMethod m);

struct McNemarResult {
  std::int64_t b = 0;
  std::int64_t c = 0;
  std::optional<double> statistic;  // absent for the exact test
  double p_value = 1.0;
  McNemarMethod method = McNemarMethod::exact_binomial;
};

inline constexpr std::int64_t kMcNemarSmallThreshold = 25;

/// McNemar's test on discordant counts. Uses the exact binomial test when
/// b + c < small_threshold, otherwise the continuity-corrected chi-squared
/// statistic (|b - c| - 1)^2 / (b + c) with one degree of freedom.
McNemarResult mcnemar(std::int64_t b, std::int64_t c, std::int64_t small_threshold = kMcNemarSmallThreshold);

/// (b, c): queries only `a` got right, queries only `b` got right. Pairs by
/// query_id; both lists must cover the same queries.
std::pair<std::int64_t, std::int64_t> discordant_counts(const std::vector<DecisionRecord>& a,
                                                        const std::vector<DecisionRecord>& b);

nlohmann::json to_json(const McNemarResult& r);

}  // namespace cascade
