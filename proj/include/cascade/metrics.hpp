#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cascade/cost_model.hpp"
#include "cascade/router.hpp"

namespace cascade {

struct ClassMetrics {
  std::string label;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct EvalReport {
  std::size_t n = 0;
  double accuracy = 0.0;
  // Macro averages over the label set; absent for open-ended runs.
  std::optional<double> macro_precision;
  std::optional<double> macro_recall;
  std::optional<double> macro_f1;
  std::vector<ClassMetrics> per_class;
  // Accuracy minus baseline accuracy, in percentage points.
  std::optional<double> pd;
  std::optional<std::string> pd_baseline;
  std::optional<double> hallucination_rate;
  std::optional<CostReport> cost;
};

/// Accuracy from the decisions' correctness labels; per-class precision,
/// recall and F1 (0 when a denominator is 0) averaged without weights over
/// `label_set`. Pass an empty label set to skip the macro metrics.
EvalReport classification_metrics(const std::vector<DecisionRecord>& decisions,
                                  const std::vector<std::string>& label_set);

/// Fraction of responses labeled factually incorrect. Abstentions stay in the
/// denominator and never count as incorrect.
double hallucination_rate(const std::vector<DecisionRecord>& decisions);

/// Accuracy of one model answering every query of the trace on its own.
double standalone_accuracy(const TraceFile& trace, const std::string& model_id);

/// Sets report.pd (percentage points) against a named baseline accuracy.
void attach_pd(EvalReport& report, double baseline_accuracy, const std::string& baseline_name);

nlohmann::json to_json(const EvalReport& report);

struct SweepRow {
  double tau = 0.0;
  bool with_pik = false;
  double accuracy = 0.0;
  double pd = 0.0;  // percentage points vs. the final model alone
  std::optional<double> reduced_cc;
  std::size_t escalated = 0;  // queries not retained by the first stage
  std::vector<std::size_t> stage_visits;
};

/// One replay per (ablation, tau) cell with tau_t set on every stage. With
/// `with_and_without_pik`, rows for the configured P(IK) gates come first,
/// then the same taus with P(IK) disabled; otherwise only the configuration
/// as given. Taus keep the caller's order.
std::vector<SweepRow> threshold_sweep(const TraceFile& trace, const CascadeConfig& config,
                                      const std::vector<double>& taus, bool with_and_without_pik,
                                      const PikRegistry& piks = {});

nlohmann::json to_json(const SweepRow& row);

}  // namespace cascade
