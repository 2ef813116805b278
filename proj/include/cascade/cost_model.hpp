#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cascade/router.hpp"
#include "cascade/trace.hpp"

namespace cascade {

// Add-multiply operations for one forward pass with the parameter count
// expanded from the architecture: 2 * (12 * n_layer * d_model^2)
// + 2 * n_layer * n_ctx * d_model.
double forward_flops_full(std::int64_t n_layer, std::int64_t n_ctx, std::int64_t d_model);

// Same quantity written in terms of N: 2N + 2 * n_ctx * sqrt(N * n_layer / 12).
double forward_flops_from_params(double param_count, std::int64_t n_layer, std::int64_t n_ctx);

// Large-N approximation: 2N.
double forward_flops_approx(std::int64_t param_count);

struct StageCount {
  std::string model_id;
  std::int64_t k = 0;  // queries evaluated by the model
};

// Sum over stages of 2 * N_i * k_i, in exact integer arithmetic.
std::int64_t chain_cc(const std::vector<StageCount>& counts, const std::vector<ModelSpec>& registry);

double usd_cost(std::int64_t tokens_in, std::int64_t tokens_out, const ModelSpec& spec);

// 1 - value / baseline.
double reduced_fraction(double value, double baseline);

inline double to_gflops(std::int64_t flops) { return static_cast<double>(flops) / 1e9; }

struct CostOptions {
  // Default billing charges each query once, at the stage that answered it
  // (stage counts then sum to the query count). With bill_every_visit, every
  // stage a query passed through is charged.
  bool bill_every_visit = false;
  // Bill 2 * (probe parameter count) per P(IK)-gated stage visit.
  bool include_probe_cost = false;
};

struct CostReport {
  std::vector<StageCount> stage_counts;
  // Undefined when any billed stage has no published parameter count.
  std::optional<std::int64_t> cc_flops;
  std::optional<std::int64_t> cc_baseline_flops;
  std::optional<double> reduced_cc;
  std::int64_t tokens_in = 0;
  std::int64_t tokens_out = 0;
  // Output tokens billed to the chain's final model, against that model
  // answering every query alone.
  std::int64_t final_stage_tokens_out = 0;
  std::optional<std::int64_t> baseline_tokens_out;
  std::optional<double> reduced_tokens;
  double usd = 0.0;
  std::optional<double> usd_baseline;
  std::optional<double> reduced_usd;
  bool tokens_incomplete = false;  // some observation had no usage data
};

/// Cost of a routed run. The baseline is the chain's final model processing
/// every query; its token figures need that model's observation on every
/// query of the trace. Abstained queries bill every stage they visited.
CostReport cost_report(const std::vector<DecisionRecord>& decisions, const TraceFile& trace,
                       const CascadeConfig& config, const PikRegistry& piks = {}, const CostOptions& options = {});

nlohmann::json to_json(const CostReport& report);

}  // namespace cascade
