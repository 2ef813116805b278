#include "cascade/confidence.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace cascade {

namespace {

std::string_view trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\v\f";
  auto first = s.find_first_not_of(ws);
  if (first == std::string_view::npos) return {};
  auto last = s.find_last_not_of(ws);
  return s.substr(first, last - first + 1);
}

}  // namespace

std::string canonical_token(std::string_view token) {
  std::string_view t = trim(token);
  if (t.size() >= 2 && t.front() == '(' && t.back() == ')') t = trim(t.substr(1, t.size() - 2));
  return std::string(t);
}

PtResult p_t_multiple_choice(const ChoiceDistribution& dist, const std::vector<std::string>& labels) {
  if (labels.empty()) throw std::invalid_argument("p_t_multiple_choice: empty label set");
  dist.validate();

  // Best probability per label; several raw tokens (e.g. "A" and " A") may map
  // to the same label, in which case the largest one counts.
  std::vector<double> best(labels.size(), -1.0);
  for (const auto& e : dist.entries) {
    std::string canon = canonical_token(e.token);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (canon == labels[i]) best[i] = std::max(best[i], e.prob);
    }
  }

  PtResult out{labels.front(), 0.0, false};
  double top = -1.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (best[i] > top) {
      top = best[i];
      out = {labels[i], best[i], best[i] >= 0.0};
    }
  }
  if (!out.matched) out = {labels.front(), 0.0, false};
  return out;
}

double p_t_first_token(const ChoiceDistribution& dist, const std::vector<std::string>& targets) {
  if (targets.empty()) throw std::invalid_argument("p_t_first_token: empty target set");
  dist.validate();
  std::set<std::string> canon_targets;
  for (const auto& t : targets) canon_targets.insert(canonical_token(t));
  double mass = 0.0;
  for (const auto& e : dist.entries) {
    if (canon_targets.count(canonical_token(e.token))) mass += e.prob;
  }
  return std::min(mass, 1.0);
}

}  // namespace cascade
