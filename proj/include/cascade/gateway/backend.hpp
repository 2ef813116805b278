#pragma once

#include <chrono>
#include <functional>
#include <mutex>
#include <random>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cascade/router.hpp"
#include "json.hpp"

namespace cascade::gateway {

struct BackendEndpoint {
  std::string model_id;
  std::string base_url;          // http://host:port, optionally with a path prefix
  std::string upstream_model;    // "model" field sent upstream; defaults to model_id
  std::string api_key_env;       // name of the variable holding the key, never the key
  int timeout_ms = 30000;
  int max_retries = 2;
  bool supports_logprobs = true;
  bool supports_hidden_states = false;
  std::optional<int> hidden_dim;

  void validate() const;
};

nlohmann::json to_json(const BackendEndpoint& e);
BackendEndpoint endpoint_from_json(const nlohmann::json& j);

struct RetryPolicy {
  std::chrono::milliseconds base{250};
  double factor = 2.0;
  bool full_jitter = true;
  std::uint64_t seed = 0;
  // Injection point for tests; defaults to std::this_thread::sleep_for.
  std::function<void(std::chrono::milliseconds)> sleep;

  /// Upper bound of the delay before retry `attempt` (1-based): base * factor^(attempt-1).
  std::chrono::milliseconds cap(int attempt) const;
};

struct CompletionSettings {
  int top_logprobs = 20;
  int max_tokens = 16;
};

enum class BackendErrorKind { timeout, unreachable, http_status, protocol };

class BackendError : public std::runtime_error {
 public:
  BackendError(std::string model_id, BackendErrorKind kind, const std::string& what, int status = 0)
      : std::runtime_error(what), model_id_(std::move(model_id)), kind_(kind), status_(status) {}
  const std::string& model_id() const noexcept { return model_id_; }
  BackendErrorKind kind() const noexcept { return kind_; }
  int status() const noexcept { return status_; }
  bool retryable() const noexcept {
    return kind_ == BackendErrorKind::timeout || kind_ == BackendErrorKind::unreachable ||
           (kind_ == BackendErrorKind::http_status && (status_ == 429 || status_ >= 500));
  }

 private:
  std::string model_id_;
  BackendErrorKind kind_;
  int status_;
};

std::string to_string(BackendErrorKind kind);

/// Request body for an OpenAI-compatible chat completion with per-token
/// log-probabilities. `return_hidden_state` is the hidden-state extension
/// understood by self-hosted servers.
nlohmann::json build_chat_request(const BackendEndpoint& endpoint, const CompletionRequest& request,
                                  const CompletionSettings& settings);

struct ParsedCompletion {
  ModelObservation observation;
  std::vector<std::string> warnings;
};

/// Converts a chat-completion response into an observation: the first
/// generated token's top-K log-probabilities become a ChoiceDistribution
/// (exponentiated); usage fills the token counts. Missing logprobs are an
/// error when the endpoint claims to support them.
ParsedCompletion parse_chat_response(const BackendEndpoint& endpoint, const nlohmann::json& response,
                                     bool need_hidden_state);

class HttpBackend : public CompletionBackend {
 public:
  HttpBackend(BackendEndpoint endpoint, CompletionSettings settings = {}, RetryPolicy retry = {});

  ModelObservation complete(const CompletionRequest& request) override;
  bool reachable() override;

  const BackendEndpoint& endpoint() const { return endpoint_; }
  // Warnings from the most recent call (e.g. missing usage block).
  std::vector<std::string> last_warnings() const;

 private:
  std::string chat_path() const;

  BackendEndpoint endpoint_;
  CompletionSettings settings_;
  RetryPolicy retry_;
  std::string origin_;
  std::string path_prefix_;
  mutable std::mutex mutex_;
  std::mt19937_64 jitter_rng_;
  std::vector<std::string> warnings_;
};

}  // namespace cascade::gateway
