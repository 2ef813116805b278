#include "cascade/gateway/service.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <set>

#include <fmt/format.h>

#include "cascade/cost_model.hpp"
#include "httplib.h"

using nlohmann::json;

namespace cascade::gateway {

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_relative() ? base / path : path;
}

json error_body(const std::string& kind, const std::string& message, const std::optional<std::string>& stage) {
  return {{"error", {{"kind", kind}, {"message", message}, {"stage", stage ? json(*stage) : json(nullptr)}}}};
}

}  // namespace

const BackendEndpoint* GatewayConfig::endpoint(const std::string& model_id) const {
  for (const auto& e : endpoints) {
    if (e.model_id == model_id) return &e;
  }
  return nullptr;
}

void GatewayConfig::validate() const {
  cascade.validate(models);
  std::set<std::string> ids;
  for (const auto& e : endpoints) {
    e.validate();
    if (!ids.insert(e.model_id).second) throw ConfigError("gateway config: duplicate endpoint " + e.model_id);
  }
  for (std::size_t i = 0; i < cascade.stages.size(); ++i) {
    const StagePolicy& s = cascade.stages[i];
    const BackendEndpoint* e = endpoint(s.model_id);
    if (!e) throw ConfigError("gateway config: no endpoint for stage " + s.model_id);
    if (s.use_pik) {
      if (!e->supports_hidden_states) {
        throw ConfigError("gateway config: stage " + s.model_id + " uses P(IK) but its endpoint has no hidden states");
      }
      auto pik = piks.find(s.model_id);
      if (pik == piks.end()) throw ConfigError("gateway config: no P(IK) model loaded for " + s.model_id);
      if (pik->second.input_dim() != *e->hidden_dim) {
        throw ConfigError(fmt::format("gateway config: P(IK) model for {} expects {} inputs, endpoint declares {}",
                                      s.model_id, pik->second.input_dim(), *e->hidden_dim));
      }
    }
    if (!e->supports_logprobs && i + 1 != cascade.stages.size()) {
      throw ConfigError("gateway config: stage " + s.model_id + " returns no logprobs and may only be final");
    }
  }
  if (queue_capacity == 0) throw ConfigError("gateway config: queue_capacity must be positive");
  if (completion.top_logprobs < 1) throw ConfigError("gateway config: top_logprobs must be >= 1");
  if (completion.max_tokens < 1) throw ConfigError("gateway config: max_tokens must be >= 1");
  split_listen_address(listen);
}

std::pair<std::string, int> split_listen_address(const std::string& listen) {
  const auto colon = listen.rfind(':');
  if (colon == std::string::npos) throw ConfigError("listen address must be host:port, got '" + listen + "'");
  int port = -1;
  try {
    port = std::stoi(listen.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("invalid port in listen address '" + listen + "'");
  }
  if (port < 0 || port > 65535) throw ConfigError("invalid port in listen address '" + listen + "'");
  return {listen.substr(0, colon), port};
}

GatewayConfig read_gateway_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open gateway config " + path.string());
  const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  GatewayConfig c;
  try {
    json j = json::parse(in);
    if (j.contains("cascade")) {
      c.cascade = cascade_config_from_json(j["cascade"]);
    } else {
      c.cascade = read_cascade_config(resolve(base, j.at("cascade_config").get<std::string>()));
    }
    if (j.contains("models")) {
      for (const auto& m : j["models"]) c.models.push_back(model_spec_from_json(m));
      for (const auto& m : c.models) m.validate();
    } else {
      c.models = read_model_registry(resolve(base, j.at("model_registry").get<std::string>()));
    }
    for (const auto& e : j.at("endpoints")) c.endpoints.push_back(endpoint_from_json(e));
    const std::string policy = j.value("on_backend_failure", "abort");
    if (policy == "escalate") {
      c.on_backend_failure = FailurePolicy::escalate;
    } else if (policy != "abort") {
      throw ConfigError("gateway config: on_backend_failure must be 'escalate' or 'abort'");
    }
    c.completion.top_logprobs = j.value("top_logprobs", 20);
    c.completion.max_tokens = j.value("max_tokens", 16);
    c.listen = j.value("listen", c.listen);
    c.trace_out = resolve(base, j.value("trace_out", c.trace_out.string()));
    c.dataset_name = j.value("dataset_name", c.dataset_name);
    c.queue_capacity = j.value("queue_capacity", c.queue_capacity);
    c.piks = load_pik_registry(c.cascade, base);
  } catch (const json::exception& e) {
    throw ConfigError("gateway config " + path.string() + ": " + e.what());
  } catch (const TraceError& e) {
    throw ConfigError("gateway config " + path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("gateway config " + path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

json redacted_config(const GatewayConfig& c) {
  json endpoints = json::array();
  for (const auto& e : c.endpoints) {
    json ej = to_json(e);
    const char* key = e.api_key_env.empty() ? nullptr : std::getenv(e.api_key_env.c_str());
    ej["api_key"] = (key && *key) ? "<redacted>" : "<unset>";
    endpoints.push_back(std::move(ej));
  }
  json models = json::array();
  for (const auto& m : c.models) models.push_back(to_json(m));
  return {{"cascade", to_json(c.cascade)},
          {"models", models},
          {"endpoints", endpoints},
          {"on_backend_failure", c.on_backend_failure == FailurePolicy::escalate ? "escalate" : "abort"},
          {"top_logprobs", c.completion.top_logprobs},
          {"max_tokens", c.completion.max_tokens},
          {"listen", c.listen},
          {"trace_out", c.trace_out.string()},
          {"queue_capacity", c.queue_capacity}};
}

RouteRequest route_request_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("request body must be a JSON object");
  RouteRequest r;
  if (j.contains("query_id") && !j["query_id"].is_null()) r.query_id = j["query_id"].get<std::string>();
  r.prompt = j.at("prompt").get<std::string>();
  if (r.prompt.empty()) throw std::invalid_argument("prompt is empty");
  if (j.contains("task_kind")) r.task_kind = parse_task_kind(j["task_kind"].get<std::string>());
  if (j.contains("choice_labels") && !j["choice_labels"].is_null()) {
    r.choice_labels = j["choice_labels"].get<std::vector<std::string>>();
  }
  if (r.task_kind == TaskKind::multiple_choice && r.choice_labels.empty()) {
    throw std::invalid_argument("multiple_choice requests need choice_labels");
  }
  if (j.contains("gold_answer") && !j["gold_answer"].is_null()) r.gold_answer = j["gold_answer"].get<std::string>();
  if (j.contains("config_override") && j["config_override"].is_object()) {
    const json& o = j["config_override"];
    if (o.contains("tau_t")) r.tau_t = o["tau_t"].get<double>();
    if (o.contains("tau_ik")) r.tau_ik = o["tau_ik"].get<double>();
  }
  return r;
}

json to_json(const RouteResponse& r) {
  json stages = json::array();
  for (const auto& v : r.stages) {
    stages.push_back({{"model_id", v.model_id},
                      {"p_ik", v.p_ik ? json(*v.p_ik) : json(nullptr)},
                      {"p_t", v.p_t ? json(*v.p_t) : json(nullptr)},
                      {"retained", v.retained},
                      {"gate", to_string(v.gate)}});
  }
  json skipped = json::array();
  for (const auto& s : r.skipped) skipped.push_back({{"model_id", s.model_id}, {"reason", s.reason}});
  return {{"query_id", r.query_id},
          {"answer", r.answer},
          {"answering_model", r.answering_model},
          {"stages", stages},
          {"skipped", skipped},
          {"tokens", {{"in", r.tokens_in}, {"out", r.tokens_out}, {"incomplete", r.tokens_incomplete}}},
          {"usd_estimate", r.usd_estimate},
          {"upstream_calls", r.upstream_calls}};
}

CascadeService::CascadeService(GatewayConfig config, BackendRegistry backends, std::shared_ptr<TraceAppender> appender)
    : config_(std::move(config)), backends_(std::move(backends)), appender_(std::move(appender)) {
  config_.validate();
  for (const auto& s : config_.cascade.stages) {
    if (!backends_.count(s.model_id)) throw ConfigError("no backend for stage " + s.model_id);
  }
}

RouteResponse CascadeService::route(const RouteRequest& request) {
  CascadeConfig cascade = config_.cascade;
  cascade.task_kind = request.task_kind;
  for (auto& s : cascade.stages) {
    if (request.tau_t) s.tau_t = *request.tau_t;
    if (request.tau_ik) s.tau_ik = *request.tau_ik;
  }
  cascade.validate();

  LiveQuery query;
  query.query_id = request.query_id ? *request.query_id : fmt::format("q-{:06d}", next_id_.fetch_add(1));
  query.prompt = request.prompt;
  query.task_kind = request.task_kind;
  query.choice_labels = request.choice_labels;
  query.gold_answer = request.gold_answer;

  if (appender_ && !appender_->try_reserve()) throw Overloaded("trace queue is full; retry later");
  LiveRouteResult live;
  try {
    live = route_live(query, cascade, backends_, config_.piks, config_.on_backend_failure);
    if (appender_) validate_record(live.trace, appender_->header());
  } catch (...) {
    if (appender_) appender_->cancel();
    throw;
  }

  RouteResponse r;
  r.query_id = query.query_id;
  r.answer = live.decision.answer;
  r.answering_model = live.decision.answering_model;
  r.stages = live.decision.visited;
  r.skipped = live.decision.skipped;
  r.upstream_calls = live.upstream_calls;
  for (const auto& [id, obs] : live.trace.observations) {
    r.tokens_in += obs.tokens_in;
    r.tokens_out += obs.tokens_out;
    r.tokens_incomplete = r.tokens_incomplete || obs.tokens_unknown;
    for (const auto& m : config_.models) {
      if (m.model_id == id) r.usd_estimate += usd_cost(obs.tokens_in, obs.tokens_out, m);
    }
  }
  if (appender_) appender_->commit(std::move(live.trace));
  return r;
}

json CascadeService::health() {
  json backends = json::array();
  bool all = true;
  for (const auto& s : config_.cascade.stages) {
    const bool ok = backends_.at(s.model_id)->reachable();
    all = all && ok;
    backends.push_back({{"model_id", s.model_id}, {"reachable", ok}});
  }
  return {{"status", "ok"}, {"all_backends_reachable", all}, {"backends", backends}};
}

BackendRegistry make_http_backends(const GatewayConfig& config, RetryPolicy retry) {
  BackendRegistry registry;
  for (const auto& e : config.endpoints) {
    registry.emplace(e.model_id, std::make_shared<HttpBackend>(e, config.completion, retry));
  }
  return registry;
}

TraceHeader live_trace_header(const GatewayConfig& config) {
  TraceHeader h;
  h.models = config.models;
  h.dataset_name = config.dataset_name;
  for (const auto& e : config.endpoints) {
    if (e.hidden_dim && h.find_model(e.model_id)) h.hidden_dims[e.model_id] = *e.hidden_dim;
  }
  return h;
}

GatewayServer::GatewayServer(std::shared_ptr<CascadeService> service, bool log_requests)
    : service_(std::move(service)), server_(std::make_unique<httplib::Server>()), log_requests_(log_requests) {
  // httplib defaults to SO_REUSEPORT, which lets a second gateway share a busy
  // port silently. Plain SO_REUSEADDR makes that a bind failure.
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  server_->Post("/v1/route", [this](const httplib::Request& req, httplib::Response& res) {
    const auto started = std::chrono::steady_clock::now();
    json entry{{"method", "POST"}, {"path", "/v1/route"}};
    try {
      RouteRequest request;
      try {
        request = route_request_from_json(json::parse(req.body));
      } catch (const json::exception& e) {
        throw std::invalid_argument(e.what());
      } catch (const TraceError& e) {
        throw std::invalid_argument(e.what());
      }
      RouteResponse response = service_->route(request);
      res.status = 200;
      res.set_content(to_json(response).dump(), "application/json");
      entry["query_id"] = response.query_id;
      entry["answering_model"] = response.answering_model;
      entry["upstream_calls"] = response.upstream_calls;
    } catch (const StageError& e) {
      res.status = 502;
      res.set_content(error_body("upstream", e.what(), e.stage()).dump(), "application/json");
      entry["error"] = e.what();
    } catch (const Overloaded& e) {
      res.status = 503;
      res.set_header("Retry-After", "1");
      res.set_content(error_body("overloaded", e.what(), std::nullopt).dump(), "application/json");
      entry["error"] = e.what();
    } catch (const std::invalid_argument& e) {
      res.status = 400;
      res.set_content(error_body("bad_request", e.what(), std::nullopt).dump(), "application/json");
      entry["error"] = e.what();
    } catch (const ConfigError& e) {
      res.status = 400;
      res.set_content(error_body("bad_request", e.what(), std::nullopt).dump(), "application/json");
      entry["error"] = e.what();
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(error_body("internal", e.what(), std::nullopt).dump(), "application/json");
      entry["error"] = e.what();
    }
    entry["status"] = res.status;
    entry["latency_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    log(entry);
  });
  server_->Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(service_->health().dump(), "application/json");
    log({{"method", "GET"}, {"path", "/v1/health"}, {"status", 200}});
  });
  server_->Get("/v1/config", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(redacted_config(service_->config()).dump(), "application/json");
    log({{"method", "GET"}, {"path", "/v1/config"}, {"status", 200}});
  });
}

GatewayServer::~GatewayServer() { stop(); }

int GatewayServer::bind(const std::string& host, int port) {
  if (port == 0) return server_->bind_to_any_port(host);
  return server_->bind_to_port(host, port) ? port : -1;
}

bool GatewayServer::listen() { return server_->listen_after_bind(); }

void GatewayServer::stop() {
  if (server_ && server_->is_running()) server_->stop();
}

void GatewayServer::wait_until_ready() const { server_->wait_until_ready(); }

void GatewayServer::log(const json& entry) const {
  if (!log_requests_) return;
  json line = entry;
  line["ts"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::system_clock::now().time_since_epoch())
                   .count();
  std::cerr << line.dump() + "\n";
}

}  // namespace cascade::gateway
