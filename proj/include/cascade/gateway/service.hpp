#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cascade/gateway/backend.hpp"
#include "cascade/gateway/trace_appender.hpp"
#include "cascade/router.hpp"

namespace httplib {
class Server;
}

namespace cascade::gateway {

struct GatewayConfig {
  CascadeConfig cascade;
  std::vector<ModelSpec> models;
  std::vector<BackendEndpoint> endpoints;
  PikRegistry piks;
  FailurePolicy on_backend_failure = FailurePolicy::abort;
  CompletionSettings completion;
  std::string listen = "127.0.0.1:8080";
  std::filesystem::path trace_out = "gateway_trace.jsonl";
  std::string dataset_name = "live";
  std::size_t queue_capacity = 1024;

  const BackendEndpoint* endpoint(const std::string& model_id) const;
  /// Cross-checks chain, registry, and endpoints; throws ConfigError.
  void validate() const;
};

/// Reads the gateway JSON config. Relative paths (model registry, probe refs,
/// trace output) resolve against the config file's directory.
GatewayConfig read_gateway_config(const std::filesystem::path& path);

/// The config as served by GET /v1/config: no credential values, only the
/// names of the variables that hold them.
nlohmann::json redacted_config(const GatewayConfig& config);

struct RouteRequest {
  std::optional<std::string> query_id;
  std::string prompt;
  TaskKind task_kind = TaskKind::multiple_choice;
  std::vector<std::string> choice_labels;
  std::optional<std::string> gold_answer;
  std::optional<double> tau_t;   // overrides every stage
  std::optional<double> tau_ik;  // overrides every stage
};

RouteRequest route_request_from_json(const nlohmann::json& j);

struct RouteResponse {
  std::string query_id;
  std::string answer;
  std::string answering_model;
  std::vector<StageVisit> stages;
  std::vector<StageSkip> skipped;
  std::int64_t tokens_in = 0;
  std::int64_t tokens_out = 0;
  bool tokens_incomplete = false;
  double usd_estimate = 0.0;
  std::size_t upstream_calls = 0;
};

nlohmann::json to_json(const RouteResponse& r);

// Raised when the trace queue is full; maps to a retryable 503.
class Overloaded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CascadeService {
 public:
  CascadeService(GatewayConfig config, BackendRegistry backends, std::shared_ptr<TraceAppender> appender);

  RouteResponse route(const RouteRequest& request);
  nlohmann::json health();
  const GatewayConfig& config() const { return config_; }
  TraceAppender* appender() const { return appender_.get(); }

 private:
  GatewayConfig config_;
  BackendRegistry backends_;
  std::shared_ptr<TraceAppender> appender_;
  std::atomic<std::uint64_t> next_id_{1};
};

/// Builds HTTP backends for every endpoint in the config.
BackendRegistry make_http_backends(const GatewayConfig& config, RetryPolicy retry = {});

/// Header for the live output trace: registry models and declared hidden dims.
TraceHeader live_trace_header(const GatewayConfig& config);

/// POST /v1/route, GET /v1/health, GET /v1/config over cpp-httplib.
class GatewayServer {
 public:
  explicit GatewayServer(std::shared_ptr<CascadeService> service, bool log_requests = true);
  ~GatewayServer();

  /// Binds host:port (port 0 picks a free one). Returns the bound port or -1.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after a successful bind().
  bool listen();
  void stop();
  void wait_until_ready() const;

 private:
  void log(const nlohmann::json& entry) const;

  std::shared_ptr<CascadeService> service_;
  std::unique_ptr<httplib::Server> server_;
  bool log_requests_;
};

std::pair<std::string, int> split_listen_address(const std::string& listen);

}  // namespace cascade::gateway
