#include "cascade/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace cascade {

namespace {

constexpr int kMaxIterations = 10000;
constexpr double kEps = 1e-16;

double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < kMaxIterations; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * kEps) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

double gamma_q_continued_fraction(double a, double x) {
  constexpr double tiny = std::numeric_limits<double>::min() / kEps;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIterations; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace

double regularized_gamma_p(double a, double x) {
  if (!(a > 0) || x < 0 || std::isnan(x)) throw std::invalid_argument("regularized_gamma_p: need a > 0, x >= 0");
  if (x == 0) return 0.0;
  if (x < a + 1.0) return gamma_p_series(a, x);
  return 1.0 - gamma_q_continued_fraction(a, x);
}

double regularized_gamma_q(double a, double x) {
  if (!(a > 0) || x < 0 || std::isnan(x)) throw std::invalid_argument("regularized_gamma_q: need a > 0, x >= 0");
  if (x == 0) return 1.0;
  if (x < a + 1.0) return 1.0 - gamma_p_series(a, x);
  return gamma_q_continued_fraction(a, x);
}

double chi_squared_sf(double statistic, double dof) {
  if (!(dof > 0)) throw std::invalid_argument("chi_squared_sf: degrees of freedom must be positive");
  if (statistic <= 0) return 1.0;
  return regularized_gamma_q(dof / 2.0, statistic / 2.0);
}

double binomial_two_sided_half(std::int64_t k, std::int64_t n) {
  if (n < 0 || k < 0 || k > n) throw std::invalid_argument("binomial_two_sided_half: need 0 <= k <= n");
  const std::int64_t m = std::min(k, n - k);
  const double log_half_n = -static_cast<double>(n) * std::log(2.0);
  const double lg_n1 = std::lgamma(static_cast<double>(n) + 1.0);
  double tail = 0.0;
  for (std::int64_t i = 0; i <= m; ++i) {
    tail += std::exp(lg_n1 - std::lgamma(static_cast<double>(i) + 1.0) -
                     std::lgamma(static_cast<double>(n - i) + 1.0) + log_half_n);
  }
  return std::min(1.0, 2.0 * tail);
}

std::string to_string(McNemarMethod m) {
  return m == McNemarMethod::chi_squared_cc ? "chi_squared_cc" : "exact_binomial";
}

McNemarResult mcnemar(std::int64_t b, std::int64_t c, std::int64_t small_threshold) {
  if (b < 0 || c < 0) throw std::invalid_argument("mcnemar: discordant counts must be non-negative");
  McNemarResult r;
  r.b = b;
  r.c = c;
  const std::int64_t n = b + c;
  if (n == 0 || n < small_threshold) {
    r.method = McNemarMethod::exact_binomial;
    r.p_value = binomial_two_sided_half(std::min(b, c), n);
    return r;
  }
  r.method = McNemarMethod::chi_squared_cc;
  const double diff = std::max<double>(0.0, static_cast<double>(std::llabs(b - c)) - 1.0);
  r.statistic = diff * diff / static_cast<double>(n);
  r.p_value = chi_squared_sf(*r.statistic, 1.0);
  return r;
}

std::pair<std::int64_t, std::int64_t> discordant_counts(const std::vector<DecisionRecord>& a,
                                                        const std::vector<DecisionRecord>& b) {
  auto index = [](const std::vector<DecisionRecord>& list, const char* name) {
    std::map<std::string, bool> out;
    for (const auto& d : list) {
      if (!d.correct) throw std::invalid_argument(std::string("discordant_counts: unlabeled decision in ") + name +
                                                  ": " + d.query_id);
      if (!out.emplace(d.query_id, *d.correct).second) {
        throw std::invalid_argument(std::string("discordant_counts: duplicate query_id in ") + name + ": " +
                                    d.query_id);
      }
    }
    return out;
  };
  const auto ia = index(a, "a");
  const auto ib = index(b, "b");
  if (ia.size() != ib.size()) throw std::invalid_argument("discordant_counts: the two runs cover different queries");
  std::int64_t only_a = 0, only_b = 0;
  for (const auto& [id, ca] : ia) {
    auto it = ib.find(id);
    if (it == ib.end()) throw std::invalid_argument("discordant_counts: query " + id + " missing from b");
    if (ca && !it->second) ++only_a;
    if (!ca && it->second) ++only_b;
  }
  return {only_a, only_b};
}

nlohmann::json to_json(const McNemarResult& r) {
  return {{"b", r.b},
          {"c", r.c},
          {"statistic", r.statistic ? nlohmann::json(*r.statistic) : nlohmann::json(nullptr)},
          {"p_value", r.p_value},
          {"method", to_string(r.method)}};
}

}  // namespace cascade
