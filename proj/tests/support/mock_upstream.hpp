#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "cascade/gateway/backend.hpp"
#include "cascade/router.hpp"

namespace httplib {
class Server;
}

namespace testsupport {

struct ScriptedReply {
  std::vector<std::pair<std::string, double>> top_logprobs;  // token, logprob
  std::string content;
  std::optional<std::vector<float>> hidden_state;
  bool omit_usage = false;
  int prompt_tokens = 12;
  int completion_tokens = 1;
};

// Helper: a reply whose first token distribution is `probs` (converted to
// logprobs), answering with the most likely token.
ScriptedReply reply_from_probs(const std::vector<std::pair<std::string, double>>& probs,
                               std::optional<std::vector<float>> hidden = std::nullopt);

// OpenAI-style chat completion server on 127.0.0.1 with an ephemeral port.
// Replies are scripted per (model, prompt); unscripted prompts fall back to
// the per-model default or 404.
class MockUpstream {
 public:
  MockUpstream();
  ~MockUpstream();

  int port() const { return port_; }
  std::string base_url() const;

  void script(const std::string& model, const std::string& prompt, ScriptedReply reply);
  void script_default(const std::string& model, ScriptedReply reply);
  // The next n requests for `model` fail with `status`.
  void fail_next(const std::string& model, int n, int status = 503);
  // Every request for `model` sleeps this long first.
  void set_delay(const std::string& model, int ms);

  std::size_t calls(const std::string& model) const;
  std::size_t calls(const std::string& model, const std::string& prompt) const;
  std::size_t total_calls() const;
  nlohmann::json last_request(const std::string& model) const;

 private:
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = -1;
  mutable std::mutex mutex_;
  std::map<std::pair<std::string, std::string>, ScriptedReply> replies_;
  std::map<std::string, ScriptedReply> defaults_;
  std::map<std::string, std::pair<int, int>> failures_;  // remaining, status
  std::map<std::string, int> delays_;
  std::map<std::pair<std::string, std::string>, std::size_t> calls_;
  std::map<std::string, nlohmann::json> last_;
};

// In-process backend: prompt -> observation, or a scripted error.
class ScriptedBackend : public cascade::CompletionBackend {
 public:
  explicit ScriptedBackend(std::string model_id) : model_id_(std::move(model_id)) {}

  void set(const std::string& prompt, cascade::ModelObservation obs);
  void fail_with(cascade::gateway::BackendErrorKind kind);
  void set_reachable(bool r) { reachable_ = r; }

  cascade::ModelObservation complete(const cascade::CompletionRequest& request) override;
  bool reachable() override { return reachable_; }
  std::size_t calls() const { return calls_.load(); }

 private:
  std::string model_id_;
  std::mutex mutex_;
  std::map<std::string, cascade::ModelObservation> replies_;
  std::optional<cascade::gateway::BackendErrorKind> failure_;
  bool reachable_ = true;
  std::atomic<std::size_t> calls_{0};
};

}  // namespace testsupport
