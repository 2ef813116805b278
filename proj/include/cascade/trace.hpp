#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace cascade {

inline constexpr const char* kTraceFormatVersion = "1.0";

enum class ModelKind { open_weights, api_only };
enum class TaskKind { multiple_choice, open_ended };
enum class Factuality { correct, incorrect, abstain };
enum class HiddenEncoding { array, base64 };

std::string to_string(ModelKind kind);
std::string to_string(TaskKind kind);
std::string to_string(Factuality f);
ModelKind parse_model_kind(const std::string& s);
TaskKind parse_task_kind(const std::string& s);
Factuality parse_factuality(const std::string& s);

// Raised for any invariant violation in the data model. `line` is the 1-based
// trace line when the error came from a file, 0 otherwise.
class TraceError : public std::runtime_error {
 public:
  TraceError(const std::string& what, std::size_t line = 0, std::string field = {});
  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

struct ModelSpec {
  std::string model_id;
  std::optional<std::int64_t> param_count;
  std::optional<int> n_layer;
  std::optional<int> d_model;
  double price_in = 0.0;   // USD per 1M input tokens
  double price_out = 0.0;  // USD per 1M output tokens
  ModelKind kind = ModelKind::open_weights;

  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

struct TokenProb {
  std::string token;
  double prob = 0.0;
  bool operator==(const TokenProb&) const = default;
};

// Probabilities over (a subset of) the vocabulary for one token position.
// Backends may report only the top-K mass, so the sum can be below one.
struct ChoiceDistribution {
  std::vector<TokenProb> entries;

  void validate() const;
  double total_mass() const;
  bool operator==(const ChoiceDistribution&) const = default;
};

inline constexpr double kProbSumTolerance = 1e-9;

struct ModelObservation {
  std::string model_id;
  std::string answer_text;
  ChoiceDistribution choice_dist;
  std::optional<ChoiceDistribution> first_token_dist;
  std::optional<std::vector<float>> hidden_state;
  std::optional<bool> correct;
  std::optional<Factuality> factuality;
  std::int64_t tokens_in = 0;
  std::int64_t tokens_out = 0;
  // Set when the backend did not report usage; token counts are then zero.
  bool tokens_unknown = false;
  std::optional<double> latency_ms;

  bool operator==(const ModelObservation&) const = default;
};

struct QueryTrace {
  std::string query_id;
  std::string prompt;
  std::optional<std::string> gold_answer;
  TaskKind task_kind = TaskKind::multiple_choice;
  std::vector<std::string> choice_labels;
  std::map<std::string, ModelObservation> observations;
  // Stages whose backend failed during live routing and were escalated past.
  std::vector<std::string> skipped_stages;

  const ModelObservation* find(const std::string& model_id) const;
  bool operator==(const QueryTrace&) const = default;
};

struct TraceHeader {
  std::string format_version = kTraceFormatVersion;
  std::vector<ModelSpec> models;
  std::map<std::string, int> hidden_dims;
  // 1-based layer the extractor captured hidden states from, when known.
  std::map<std::string, int> hidden_layers;
  std::string dataset_name;
  HiddenEncoding hidden_encoding = HiddenEncoding::array;

  const ModelSpec* find_model(const std::string& model_id) const;
  void validate() const;
  bool operator==(const TraceHeader&) const = default;
};

struct TraceFile {
  TraceHeader header;
  std::vector<QueryTrace> records;

  bool operator==(const TraceFile&) const = default;
};

// Checks one record against the header; throws TraceError tagged with `line`.
void validate_record(const QueryTrace& record, const TraceHeader& header, std::size_t line = 0);
void validate_trace(const TraceFile& trace);

// JSON mapping. Parsing functions throw TraceError naming the offending field.
nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ChoiceDistribution& dist);
ChoiceDistribution choice_dist_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TraceHeader& header);
TraceHeader header_from_json(const nlohmann::json& j);
nlohmann::json to_json(const QueryTrace& record, HiddenEncoding encoding);
QueryTrace record_from_json(const nlohmann::json& j);

std::string encode_hidden_base64(const std::vector<float>& values);
std::vector<float> decode_hidden_base64(const std::string& text);

TraceFile read_trace(const std::filesystem::path& path);
void write_trace(const TraceFile& trace, const std::filesystem::path& path);

// Model registry (pricing file): either a bare JSON list of ModelSpec or an
// object {"models": [...], "provenance": "..."}.
std::vector<ModelSpec> read_model_registry(const std::filesystem::path& path);

}  // namespace cascade
