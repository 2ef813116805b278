#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cascade/pik.hpp"
#include "cascade/trace.hpp"

namespace cascade {

inline constexpr double kDefaultTauT = 0.9;
inline constexpr double kDefaultTauIk = 0.5;

// Configuration problems (bad thresholds, unsorted chain, ...). The CLI maps
// these to the usage exit code.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A routing failure tied to one stage (missing observation, backend down).
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

struct StagePolicy {
  std::string model_id;
  double tau_t = kDefaultTauT;
  double tau_ik = kDefaultTauIk;
  bool use_pik = false;
  std::optional<std::string> pik_model_ref;

  bool operator==(const StagePolicy&) const = default;
};

struct CascadeConfig {
  std::vector<StagePolicy> stages;
  bool final_stage_unconditional = true;
  TaskKind task_kind = TaskKind::multiple_choice;
  std::vector<std::string> answer_target_tokens = {"Answer"};

  /// Structural checks: thresholds in range, unique ids, pik refs present.
  void validate() const;
  /// Additionally checks that every stage is registered and the chain is
  /// sorted ascending by parameter count, with api_only models last.
  void validate(const std::vector<ModelSpec>& registry) const;
  const StagePolicy& final_stage() const { return stages.back(); }

  bool operator==(const CascadeConfig&) const = default;
};

nlohmann::json to_json(const CascadeConfig& config);
CascadeConfig cascade_config_from_json(const nlohmann::json& j);
CascadeConfig read_cascade_config(const std::filesystem::path& path);

enum class Gate { pass, fail_pik, fail_pt, final };
std::string to_string(Gate gate);
Gate parse_gate(const std::string& s);

struct StageVisit {
  std::string model_id;
  std::optional<double> p_ik;
  // Absent only on an unconditional final stage that lacks the distribution.
  std::optional<double> p_t;
  bool retained = false;
  Gate gate = Gate::pass;

  bool operator==(const StageVisit&) const = default;
};

struct StageSkip {
  std::string model_id;
  std::string reason;
  bool operator==(const StageSkip&) const = default;
};

struct DecisionRecord {
  std::string query_id;
  std::vector<StageVisit> visited;
  std::vector<StageSkip> skipped;
  std::string answering_model;
  std::string answer;
  std::optional<std::string> gold;
  std::optional<bool> correct;
  std::optional<Factuality> factuality;
  // True only when the final stage is gated and fails: nobody answered.
  bool abstained = false;

  /// 0-based index into the chain of the answering stage.
  std::size_t answering_index(const CascadeConfig& config) const;
  bool operator==(const DecisionRecord&) const = default;
};

nlohmann::json to_json(const DecisionRecord& d);
DecisionRecord decision_from_json(const nlohmann::json& j);
void write_decisions(const std::vector<DecisionRecord>& decisions, const std::filesystem::path& path);
std::vector<DecisionRecord> read_decisions(const std::filesystem::path& path);

struct StageOutcome {
  bool retain = false;
  Gate gate = Gate::pass;
  std::optional<double> p_ik;
  std::optional<double> p_t;
  std::string answer;
};

/// Gate logic for one stage: P(IK) first (when enabled), then P(T). Retains
/// only when both pass. P(T) is still computed after a P(IK) failure so that
/// the record carries it for diagnostics.
StageOutcome decide_stage(const ModelObservation& obs, const StagePolicy& policy, const CascadeConfig& config,
                          const std::vector<std::string>& choice_labels, const PikModel* pik);

using PikRegistry = std::map<std::string, PikModel>;

/// Loads the probe referenced by every use_pik stage; relative refs resolve
/// against `base_dir`.
PikRegistry load_pik_registry(const CascadeConfig& config, const std::filesystem::path& base_dir);

struct ReplayOptions {
  // Throw if a decision's correctness cannot be determined.
  bool require_labels = false;
};

DecisionRecord route_query(const QueryTrace& query, const CascadeConfig& config, const PikRegistry& piks,
                           const ReplayOptions& options = {});

/// Offline routing over recorded observations, in file order. A stage only
/// needs an observation if the query actually reaches it.
std::vector<DecisionRecord> route_replay(const TraceFile& trace, const CascadeConfig& config,
                                         const PikRegistry& piks, const ReplayOptions& options = {});

/// Queries that visited each stage (k of the compute-cost formula), in chain order.
std::vector<std::size_t> stage_visit_counts(const std::vector<DecisionRecord>& decisions,
                                            const CascadeConfig& config);
/// Queries answered by each stage, in chain order.
std::vector<std::size_t> stage_answer_counts(const std::vector<DecisionRecord>& decisions,
                                             const CascadeConfig& config);

// ---- live routing ----

struct CompletionRequest {
  std::string prompt;
  TaskKind task_kind = TaskKind::multiple_choice;
  std::vector<std::string> choice_labels;
  bool need_hidden_state = false;
};

// Anything that turns a prompt into a ModelObservation: an HTTP backend, a
// scripted mock, or a recorded trace.
class CompletionBackend {
 public:
  virtual ~CompletionBackend() = default;
  virtual ModelObservation complete(const CompletionRequest& request) = 0;
  virtual bool reachable() { return true; }
};

using BackendRegistry = std::map<std::string, std::shared_ptr<CompletionBackend>>;

enum class FailurePolicy { escalate, abort };

struct LiveQuery {
  std::string query_id;
  std::string prompt;
  TaskKind task_kind = TaskKind::multiple_choice;
  std::vector<std::string> choice_labels;
  std::optional<std::string> gold_answer;
};

struct LiveRouteResult {
  DecisionRecord decision;
  QueryTrace trace;        // the observations gathered, ready for replay
  std::size_t upstream_calls = 0;
};

/// Same gate logic as route_replay, issuing backend calls stage by stage and
/// stopping as soon as a stage retains.
LiveRouteResult route_live(const LiveQuery& query, const CascadeConfig& config, const BackendRegistry& backends,
                           const PikRegistry& piks, FailurePolicy on_failure = FailurePolicy::abort);

}  // namespace cascade
