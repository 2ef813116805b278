#include "cascade/gateway/backend.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

#include <fmt/format.h>

#include "httplib.h"

using nlohmann::json;

namespace cascade::gateway {

void BackendEndpoint::validate() const {
  if (model_id.empty()) throw ConfigError("endpoint: empty model_id");
  if (base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0) {
    throw ConfigError("endpoint " + model_id + ": base_url must start with http:// or https://");
  }
  if (timeout_ms <= 0) throw ConfigError("endpoint " + model_id + ": timeout_ms must be positive");
  if (max_retries < 0) throw ConfigError("endpoint " + model_id + ": max_retries must be >= 0");
  if (hidden_dim && *hidden_dim <= 0) throw ConfigError("endpoint " + model_id + ": hidden_dim must be positive");
  if (supports_hidden_states && !hidden_dim) {
    throw ConfigError("endpoint " + model_id + ": supports_hidden_states requires hidden_dim");
  }
}

json to_json(const BackendEndpoint& e) {
  return {{"model_id", e.model_id},
          {"base_url", e.base_url},
          {"upstream_model", e.upstream_model},
          {"api_key_env", e.api_key_env},
          {"timeout_ms", e.timeout_ms},
          {"max_retries", e.max_retries},
          {"supports_logprobs", e.supports_logprobs},
          {"supports_hidden_states", e.supports_hidden_states},
          {"hidden_dim", e.hidden_dim ? json(*e.hidden_dim) : json(nullptr)}};
}

BackendEndpoint endpoint_from_json(const json& j) {
  try {
    BackendEndpoint e;
    e.model_id = j.at("model_id").get<std::string>();
    e.base_url = j.at("base_url").get<std::string>();
    e.upstream_model = j.value("upstream_model", e.model_id);
    e.api_key_env = j.value("api_key_env", "");
    e.timeout_ms = j.value("timeout_ms", 30000);
    e.max_retries = j.value("max_retries", 2);
    e.supports_logprobs = j.value("supports_logprobs", true);
    e.supports_hidden_states = j.value("supports_hidden_states", false);
    if (j.contains("hidden_dim") && !j["hidden_dim"].is_null()) e.hidden_dim = j["hidden_dim"].get<int>();
    e.validate();
    return e;
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("endpoint: ") + ex.what());
  }
}

std::chrono::milliseconds RetryPolicy::cap(int attempt) const {
  const double ms = static_cast<double>(base.count()) * std::pow(factor, attempt - 1);
  return std::chrono::milliseconds(static_cast<std::int64_t>(std::llround(ms)));
}

std::string to_string(BackendErrorKind kind) {
  switch (kind) {
    case BackendErrorKind::timeout: return "timeout";
    case BackendErrorKind::unreachable: return "unreachable";
    case BackendErrorKind::http_status: return "http_status";
    case BackendErrorKind::protocol: return "protocol";
  }
  return "";
}

json build_chat_request(const BackendEndpoint& endpoint, const CompletionRequest& request,
                        const CompletionSettings& settings) {
  json body{{"model", endpoint.upstream_model.empty() ? endpoint.model_id : endpoint.upstream_model},
            {"messages", json::array({{{"role", "user"}, {"content", request.prompt}}})},
            {"temperature", 0},
            {"max_tokens", settings.max_tokens}};
  if (endpoint.supports_logprobs) {
    body["logprobs"] = true;
    body["top_logprobs"] = settings.top_logprobs;
  }
  if (request.need_hidden_state) body["return_hidden_state"] = true;
  return body;
}

ParsedCompletion parse_chat_response(const BackendEndpoint& endpoint, const json& response, bool need_hidden_state) {
  auto protocol_error = [&](const std::string& what) {
    return BackendError(endpoint.model_id, BackendErrorKind::protocol, endpoint.model_id + ": " + what);
  };
  ParsedCompletion out;
  ModelObservation& obs = out.observation;
  obs.model_id = endpoint.model_id;
  if (!response.is_object() || !response.contains("choices") || !response["choices"].is_array() ||
      response["choices"].empty()) {
    throw protocol_error("response has no choices");
  }
  const json& choice = response["choices"][0];
  if (choice.contains("message") && choice["message"].is_object()) {
    const json& content = choice["message"].value("content", json(nullptr));
    if (content.is_string()) obs.answer_text = content.get<std::string>();
  } else if (choice.contains("text") && choice["text"].is_string()) {
    obs.answer_text = choice["text"].get<std::string>();
  }

  const json* top = nullptr;
  if (choice.contains("logprobs") && choice["logprobs"].is_object()) {
    const json& lp = choice["logprobs"];
    if (lp.contains("content") && lp["content"].is_array() && !lp["content"].empty()) {
      const json& first = lp["content"][0];
      if (first.contains("top_logprobs") && first["top_logprobs"].is_array()) top = &first["top_logprobs"];
    }
  }
  if (top) {
    ChoiceDistribution dist;
    for (const auto& entry : *top) {
      if (!entry.contains("token") || !entry.contains("logprob") || !entry["logprob"].is_number()) {
        throw protocol_error("malformed top_logprobs entry");
      }
      const std::string token = entry["token"].get<std::string>();
      const double p = std::min(1.0, std::exp(entry["logprob"].get<double>()));
      // Distinct vocabulary ids can decode to the same text; their mass adds.
      auto it = std::find_if(dist.entries.begin(), dist.entries.end(),
                             [&](const TokenProb& t) { return t.token == token; });
      if (it != dist.entries.end()) {
        it->prob = std::min(1.0, it->prob + p);
      } else {
        dist.entries.push_back({token, p});
      }
    }
    const double mass = dist.total_mass();
    if (mass > 1.0 + kProbSumTolerance) {
      if (mass > 1.0 + 1e-6) throw protocol_error(fmt::format("top_logprobs mass {} exceeds 1", mass));
      for (auto& e : dist.entries) e.prob /= mass;  // rounding in the upstream logprobs
    }
    obs.choice_dist = dist;
    obs.first_token_dist = std::move(dist);
  } else if (endpoint.supports_logprobs) {
    throw protocol_error("response carries no logprobs although the endpoint is configured to return them");
  }

  if (response.contains("usage") && response["usage"].is_object()) {
    const json& usage = response["usage"];
    obs.tokens_in = usage.value("prompt_tokens", std::int64_t{0});
    obs.tokens_out = usage.value("completion_tokens", std::int64_t{0});
  } else {
    obs.tokens_unknown = true;
    out.warnings.push_back(endpoint.model_id + ": response has no usage block; token counts unknown");
  }

  // Without a configured dimension the vector cannot be recorded in a trace.
  if (endpoint.hidden_dim && response.contains("hidden_state") && response["hidden_state"].is_array()) {
    std::vector<float> hs;
    hs.reserve(response["hidden_state"].size());
    for (const auto& v : response["hidden_state"]) {
      if (!v.is_number()) throw protocol_error("hidden_state must be numeric");
      hs.push_back(static_cast<float>(v.get<double>()));
    }
    if (hs.size() != static_cast<std::size_t>(*endpoint.hidden_dim)) {
      throw protocol_error(fmt::format("hidden_state length {} != configured {}", hs.size(), *endpoint.hidden_dim));
    }
    obs.hidden_state = std::move(hs);
  } else if (need_hidden_state) {
    throw protocol_error("hidden state requested but not returned");
  }
  return out;
}

HttpBackend::HttpBackend(BackendEndpoint endpoint, CompletionSettings settings, RetryPolicy retry)
    : endpoint_(std::move(endpoint)), settings_(settings), retry_(std::move(retry)), jitter_rng_(retry_.seed) {
  endpoint_.validate();
  if (!retry_.sleep) retry_.sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  const auto scheme_end = endpoint_.base_url.find("://");
  const auto path_start = endpoint_.base_url.find('/', scheme_end + 3);
  origin_ = endpoint_.base_url.substr(0, path_start);
  if (path_start != std::string::npos) path_prefix_ = endpoint_.base_url.substr(path_start);
  while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
}

std::string HttpBackend::chat_path() const {
  const bool has_v1 = path_prefix_.size() >= 3 && path_prefix_.compare(path_prefix_.size() - 3, 3, "/v1") == 0;
  return path_prefix_ + (has_v1 ? "/chat/completions" : "/v1/chat/completions");
}

std::vector<std::string> HttpBackend::last_warnings() const {
  std::lock_guard lock(mutex_);
  return warnings_;
}

ModelObservation HttpBackend::complete(const CompletionRequest& request) {
  const std::string body = build_chat_request(endpoint_, request, settings_).dump();
  httplib::Headers headers;
  if (!endpoint_.api_key_env.empty()) {
    if (const char* key = std::getenv(endpoint_.api_key_env.c_str()); key && *key) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
  }
  const auto timeout = std::chrono::milliseconds(endpoint_.timeout_ms);

  for (int attempt = 0;; ++attempt) {
    if (attempt > 0) {
      auto delay = retry_.cap(attempt);
      if (retry_.full_jitter) {
        std::lock_guard lock(mutex_);
        std::uniform_int_distribution<std::int64_t> pick(0, delay.count());
        delay = std::chrono::milliseconds(pick(jitter_rng_));
      }
      retry_.sleep(delay);
    }
    const auto started = std::chrono::steady_clock::now();
    try {
      httplib::Client client(origin_);
      client.set_connection_timeout(timeout);
      client.set_read_timeout(timeout);
      client.set_write_timeout(timeout);
      auto res = client.Post(chat_path(), headers, body, "application/json");
      if (!res) {
        const auto err = res.error();
        // a peer that drops the socket also surfaces as Read; only call it a
        // timeout if the clock actually ran out
        const bool ran_out = std::chrono::steady_clock::now() - started >= timeout;
        const bool timed_out = err == httplib::Error::ConnectionTimeout ||
                               ((err == httplib::Error::Read || err == httplib::Error::Write) && ran_out);
        throw BackendError(endpoint_.model_id, timed_out ? BackendErrorKind::timeout : BackendErrorKind::unreachable,
                           endpoint_.model_id + ": " + httplib::to_string(err));
      }
      if (res->status < 200 || res->status >= 300) {
        throw BackendError(endpoint_.model_id, BackendErrorKind::http_status,
                           fmt::format("{}: upstream returned HTTP {}", endpoint_.model_id, res->status), res->status);
      }
      json parsed;
      try {
        parsed = json::parse(res->body);
      } catch (const json::parse_error&) {
        throw BackendError(endpoint_.model_id, BackendErrorKind::protocol, endpoint_.model_id + ": response is not JSON");
      }
      ParsedCompletion pc = parse_chat_response(endpoint_, parsed, request.need_hidden_state);
      pc.observation.latency_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
      {
        std::lock_guard lock(mutex_);
        warnings_ = pc.warnings;
      }
      return pc.observation;
    } catch (const BackendError& e) {
      if (!e.retryable() || attempt >= endpoint_.max_retries) throw;
    }
  }
}

bool HttpBackend::reachable() {
  httplib::Client client(origin_);
  const auto timeout = std::chrono::milliseconds(std::min(endpoint_.timeout_ms, 2000));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  std::string path = chat_path();
  path.replace(path.size() - std::string("/chat/completions").size(), std::string::npos, "/models");
  auto res = client.Get(path);
  return static_cast<bool>(res);
}

}  // namespace cascade::gateway
