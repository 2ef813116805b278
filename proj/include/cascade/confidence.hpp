#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "cascade/trace.hpp"

namespace cascade {

/// Normalizes a vocabulary token for label matching: trims surrounding
/// whitespace and one layer of enclosing parentheses, so "(A)", " A" and "A"
/// all compare equal. Case is preserved.
std::string canonical_token(std::string_view token);

struct PtResult {
  std::string chosen_label;
  double p_t = 0.0;
  // False when no candidate label appeared in the distribution; p_t is then 0
  // and chosen_label is the first label.
  bool matched = true;
};

/// P(T) for a multiple-choice prompt: the highest raw next-token probability
/// among tokens that canonicalize to one of `labels`. No renormalization over
/// the label subset. Ties go to the earliest label in `labels`.
PtResult p_t_multiple_choice(const ChoiceDistribution& dist, const std::vector<std::string>& labels);

/// Summed probability that the first generated token is one of `targets`
/// (after canonicalization). Used for open-ended prompts that ask for an
/// "Answer: ..." reply.
double p_t_first_token(const ChoiceDistribution& dist, const std::vector<std::string>& targets);

}  // namespace cascade
