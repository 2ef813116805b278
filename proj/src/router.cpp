#include "cascade/router.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <fmt/format.h>

#include "cascade/confidence.hpp"

using nlohmann::json;

namespace cascade {

namespace {

bool in_unit_interval(double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; }

const PikModel* lookup_pik(const StagePolicy& policy, const PikRegistry& piks) {
  if (!policy.use_pik) return nullptr;
  auto it = piks.find(policy.model_id);
  if (it == piks.end()) throw StageError(policy.model_id, "no P(IK) model loaded for stage " + policy.model_id);
  return &it->second;
}

// Unconditional final stage: record whatever confidence values are
// computable, never fail.
StageOutcome final_stage_outcome(const ModelObservation& obs, const StagePolicy& policy, const CascadeConfig& config,
                                 const std::vector<std::string>& labels, const PikModel* pik) {
  StageOutcome out;
  out.retain = true;
  out.gate = Gate::final;
  if (pik && obs.hidden_state && obs.hidden_state->size() == static_cast<std::size_t>(pik->input_dim())) {
    out.p_ik = pik_infer(*pik, *obs.hidden_state);
  }
  if (config.task_kind == TaskKind::multiple_choice) {
    PtResult pt = p_t_multiple_choice(obs.choice_dist, labels);
    out.p_t = pt.p_t;
    out.answer = pt.chosen_label;
  } else {
    if (obs.first_token_dist) out.p_t = p_t_first_token(*obs.first_token_dist, config.answer_target_tokens);
    out.answer = obs.answer_text;
  }
  (void)policy;
  return out;
}

bool is_skipped(const QueryTrace& q, const std::string& model_id) {
  return std::find(q.skipped_stages.begin(), q.skipped_stages.end(), model_id) != q.skipped_stages.end();
}

std::optional<bool> observed_correctness(const ModelObservation& obs, const QueryTrace& q, const std::string& answer,
                                         TaskKind kind) {
  if (obs.correct) return obs.correct;
  if (kind == TaskKind::multiple_choice && q.gold_answer) return canonical_token(*q.gold_answer) == answer;
  return std::nullopt;
}

std::optional<double> opt_number(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<double>();
}

}  // namespace

std::string to_string(Gate gate) {
  switch (gate) {
    case Gate::pass: return "pass";
    case Gate::fail_pik: return "fail_pik";
    case Gate::fail_pt: return "fail_pt";
    case Gate::final: return "final";
  }
  return "";
}

Gate parse_gate(const std::string& s) {
  if (s == "pass") return Gate::pass;
  if (s == "fail_pik") return Gate::fail_pik;
  if (s == "fail_pt") return Gate::fail_pt;
  if (s == "final") return Gate::final;
  throw std::invalid_argument("unknown gate '" + s + "'");
}

void CascadeConfig::validate() const {
  if (stages.empty()) throw ConfigError("cascade config: at least one stage is required");
  std::set<std::string> ids;
  for (const auto& s : stages) {
    if (s.model_id.empty()) throw ConfigError("cascade config: stage with empty model_id");
    if (!ids.insert(s.model_id).second) throw ConfigError("cascade config: duplicate stage " + s.model_id);
    if (!in_unit_interval(s.tau_t)) throw ConfigError(fmt::format("cascade config: tau_t {} outside [0,1]", s.tau_t));
    if (!in_unit_interval(s.tau_ik)) {
      throw ConfigError(fmt::format("cascade config: tau_ik {} outside [0,1]", s.tau_ik));
    }
    if (s.use_pik && !s.pik_model_ref) {
      throw ConfigError("cascade config: stage " + s.model_id + " has use_pik but no pik_model_ref");
    }
  }
  if (task_kind == TaskKind::open_ended && answer_target_tokens.empty()) {
    throw ConfigError("cascade config: open_ended tasks need answer_target_tokens");
  }
}

void CascadeConfig::validate(const std::vector<ModelSpec>& registry) const {
  validate();
  std::optional<std::int64_t> prev;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& id = stages[i].model_id;
    auto it = std::find_if(registry.begin(), registry.end(), [&](const ModelSpec& m) { return m.model_id == id; });
    if (it == registry.end()) throw ConfigError("cascade config: stage " + id + " is not in the model registry");
    const bool last = i + 1 == stages.size();
    if ((it->kind == ModelKind::api_only || !it->param_count) && !last) {
      throw ConfigError("cascade config: api_only model " + id + " may only be the final stage");
    }
    if (it->param_count) {
      if (prev && *it->param_count < *prev) {
        throw ConfigError("cascade config: stages must be sorted ascending by parameter count (" + id + ")");
      }
      prev = it->param_count;
    }
  }
}

json to_json(const CascadeConfig& c) {
  json stages = json::array();
  for (const auto& s : c.stages) {
    json sj{{"model_id", s.model_id}, {"tau_t", s.tau_t}, {"tau_ik", s.tau_ik}, {"use_pik", s.use_pik}};
    sj["pik_model_ref"] = s.pik_model_ref ? json(*s.pik_model_ref) : json(nullptr);
    stages.push_back(std::move(sj));
  }
  return {{"stages", stages},
          {"task_kind", to_string(c.task_kind)},
          {"answer_target_tokens", c.answer_target_tokens},
          {"final_stage_unconditional", c.final_stage_unconditional}};
}

CascadeConfig cascade_config_from_json(const json& j) {
  try {
    CascadeConfig c;
    for (const auto& sj : j.at("stages")) {
      StagePolicy s;
      s.model_id = sj.at("model_id").get<std::string>();
      s.tau_t = sj.value("tau_t", kDefaultTauT);
      s.tau_ik = sj.value("tau_ik", kDefaultTauIk);
      s.use_pik = sj.value("use_pik", false);
      if (sj.contains("pik_model_ref") && !sj["pik_model_ref"].is_null()) {
        s.pik_model_ref = sj["pik_model_ref"].get<std::string>();
      }
      c.stages.push_back(std::move(s));
    }
    if (j.contains("task_kind")) c.task_kind = parse_task_kind(j["task_kind"].get<std::string>());
    if (j.contains("answer_target_tokens") && !j["answer_target_tokens"].is_null()) {
      c.answer_target_tokens = j["answer_target_tokens"].get<std::vector<std::string>>();
    }
    c.final_stage_unconditional = j.value("final_stage_unconditional", true);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("cascade config: ") + e.what());
  } catch (const TraceError& e) {
    throw ConfigError(std::string("cascade config: ") + e.what());
  }
}

CascadeConfig read_cascade_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open cascade config " + path.string());
  try {
    return cascade_config_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("cascade config " + path.string() + ": " + e.what());
  }
}

std::size_t DecisionRecord::answering_index(const CascadeConfig& config) const {
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    if (config.stages[i].model_id == answering_model) return i;
  }
  throw std::out_of_range("answering model " + answering_model + " is not in the chain");
}

json to_json(const DecisionRecord& d) {
  json visited = json::array();
  for (const auto& v : d.visited) {
    visited.push_back({{"model_id", v.model_id},
                       {"p_ik", v.p_ik ? json(*v.p_ik) : json(nullptr)},
                       {"p_t", v.p_t ? json(*v.p_t) : json(nullptr)},
                       {"retained", v.retained},
                       {"gate", to_string(v.gate)}});
  }
  json j{{"query_id", d.query_id}, {"visited", visited}, {"answering_model", d.answering_model},
         {"answer", d.answer}};
  if (!d.skipped.empty()) {
    j["skipped"] = json::array();
    for (const auto& s : d.skipped) j["skipped"].push_back({{"model_id", s.model_id}, {"reason", s.reason}});
  }
  j["gold"] = d.gold ? json(*d.gold) : json(nullptr);
  j["correct"] = d.correct ? json(*d.correct) : json(nullptr);
  if (d.factuality) j["factuality"] = to_string(*d.factuality);
  if (d.abstained) j["abstained"] = true;
  return j;
}

DecisionRecord decision_from_json(const json& j) {
  DecisionRecord d;
  d.query_id = j.at("query_id").get<std::string>();
  for (const auto& v : j.at("visited")) {
    StageVisit s;
    s.model_id = v.at("model_id").get<std::string>();
    s.p_ik = opt_number(v, "p_ik");
    s.p_t = opt_number(v, "p_t");
    s.retained = v.at("retained").get<bool>();
    s.gate = parse_gate(v.at("gate").get<std::string>());
    d.visited.push_back(std::move(s));
  }
  if (j.contains("skipped")) {
    for (const auto& s : j["skipped"]) d.skipped.push_back({s.at("model_id").get<std::string>(), s.value("reason", "")});
  }
  d.answering_model = j.at("answering_model").get<std::string>();
  d.answer = j.at("answer").get<std::string>();
  if (j.contains("gold") && !j["gold"].is_null()) d.gold = j["gold"].get<std::string>();
  if (j.contains("correct") && !j["correct"].is_null()) d.correct = j["correct"].get<bool>();
  if (j.contains("factuality")) d.factuality = parse_factuality(j["factuality"].get<std::string>());
  d.abstained = j.value("abstained", false);
  return d;
}

void write_decisions(const std::vector<DecisionRecord>& decisions, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write decisions file " + path.string());
  for (const auto& d : decisions) out << to_json(d).dump() << '\n';
}

std::vector<DecisionRecord> read_decisions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open decisions file " + path.string());
  std::vector<DecisionRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(decision_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(fmt::format("{}:{}: {}", path.string(), n, e.what()));
    }
  }
  return out;
}

StageOutcome decide_stage(const ModelObservation& obs, const StagePolicy& policy, const CascadeConfig& config,
                          const std::vector<std::string>& choice_labels, const PikModel* pik) {
  if (obs.model_id != policy.model_id) {
    throw StageError(policy.model_id, "observation from " + obs.model_id + " passed to stage " + policy.model_id);
  }
  StageOutcome out;
  if (policy.use_pik) {
    if (!pik) throw StageError(policy.model_id, "stage " + policy.model_id + " uses P(IK) but no probe was supplied");
    if (!obs.hidden_state) {
      throw StageError(policy.model_id, "stage " + policy.model_id + " uses P(IK) but the observation has no hidden state");
    }
    out.p_ik = pik_infer(*pik, *obs.hidden_state);
  }
  if (config.task_kind == TaskKind::multiple_choice) {
    PtResult pt = p_t_multiple_choice(obs.choice_dist, choice_labels);
    out.p_t = pt.p_t;
    out.answer = pt.chosen_label;
  } else {
    if (!obs.first_token_dist) {
      throw StageError(policy.model_id, "open-ended stage " + policy.model_id + " has no first_token_dist");
    }
    out.p_t = p_t_first_token(*obs.first_token_dist, config.answer_target_tokens);
    out.answer = obs.answer_text;
  }
  if (out.p_ik && *out.p_ik < policy.tau_ik) {
    out.gate = Gate::fail_pik;
  } else if (*out.p_t < policy.tau_t) {
    out.gate = Gate::fail_pt;
  } else {
    out.gate = Gate::pass;
    out.retain = true;
  }
  return out;
}

PikRegistry load_pik_registry(const CascadeConfig& config, const std::filesystem::path& base_dir) {
  PikRegistry piks;
  for (const auto& s : config.stages) {
    if (!s.use_pik) continue;
    std::filesystem::path ref(*s.pik_model_ref);
    if (ref.is_relative()) ref = base_dir / ref;
    piks.emplace(s.model_id, load_pik_model(ref));
  }
  return piks;
}

DecisionRecord route_query(const QueryTrace& query, const CascadeConfig& config, const PikRegistry& piks,
                           const ReplayOptions& options) {
  DecisionRecord d;
  d.query_id = query.query_id;
  d.gold = query.gold_answer;
  const auto& labels = query.choice_labels;
  if (config.task_kind == TaskKind::multiple_choice && labels.empty()) {
    throw StageError("", "query " + query.query_id + " has no choice_labels");
  }

  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    const StagePolicy& policy = config.stages[i];
    const bool last = i + 1 == config.stages.size();
    const ModelObservation* obs = query.find(policy.model_id);
    if (!obs) {
      if (is_skipped(query, policy.model_id) && !last) {
        d.skipped.push_back({policy.model_id, "backend unavailable"});
        continue;
      }
      throw StageError(policy.model_id,
                       fmt::format("query {}: no observation for stage {}", query.query_id, policy.model_id));
    }
    const PikModel* pik = lookup_pik(policy, piks);
    StageOutcome outcome = (last && config.final_stage_unconditional)
                               ? final_stage_outcome(*obs, policy, config, labels, pik)
                               : decide_stage(*obs, policy, config, labels, pik);
    d.visited.push_back({policy.model_id, outcome.p_ik, outcome.p_t, outcome.retain, outcome.gate});
    if (outcome.retain) {
      d.answering_model = policy.model_id;
      d.answer = outcome.answer;
      d.correct = observed_correctness(*obs, query, outcome.answer, config.task_kind);
      d.factuality = obs->factuality;
      break;
    }
    if (last) {
      d.abstained = true;
      d.correct = false;
      d.factuality = Factuality::abstain;
    }
  }
  if (options.require_labels && !d.correct) {
    throw StageError(d.answering_model, "query " + query.query_id + " has no correctness label and no gold answer");
  }
  return d;
}

std::vector<DecisionRecord> route_replay(const TraceFile& trace, const CascadeConfig& config, const PikRegistry& piks,
                                         const ReplayOptions& options) {
  config.validate();
  std::vector<DecisionRecord> out;
  out.reserve(trace.records.size());
  for (const auto& q : trace.records) out.push_back(route_query(q, config, piks, options));
  return out;
}

std::vector<std::size_t> stage_visit_counts(const std::vector<DecisionRecord>& decisions,
                                            const CascadeConfig& config) {
  std::vector<std::size_t> counts(config.stages.size(), 0);
  for (const auto& d : decisions) {
    for (const auto& v : d.visited) {
      for (std::size_t i = 0; i < config.stages.size(); ++i) {
        if (config.stages[i].model_id == v.model_id) ++counts[i];
      }
    }
  }
  return counts;
}

std::vector<std::size_t> stage_answer_counts(const std::vector<DecisionRecord>& decisions,
                                             const CascadeConfig& config) {
  std::vector<std::size_t> counts(config.stages.size(), 0);
  for (const auto& d : decisions) {
    if (!d.abstained) ++counts[d.answering_index(config)];
  }
  return counts;
}

LiveRouteResult route_live(const LiveQuery& query, const CascadeConfig& config, const BackendRegistry& backends,
                           const PikRegistry& piks, FailurePolicy on_failure) {
  LiveRouteResult result;
  QueryTrace& trace = result.trace;
  trace.query_id = query.query_id;
  trace.prompt = query.prompt;
  trace.gold_answer = query.gold_answer;
  trace.task_kind = query.task_kind;
  trace.choice_labels = query.choice_labels;

  CompletionRequest request{query.prompt, query.task_kind, query.choice_labels, false};
  std::vector<std::pair<std::string, std::string>> failures;
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    const StagePolicy& policy = config.stages[i];
    const bool last = i + 1 == config.stages.size();
    auto backend = backends.find(policy.model_id);
    if (backend == backends.end() || !backend->second) {
      throw StageError(policy.model_id, "no backend configured for stage " + policy.model_id);
    }
    request.need_hidden_state = policy.use_pik;
    ModelObservation obs;
    try {
      ++result.upstream_calls;
      obs = backend->second->complete(request);
    } catch (const std::exception& e) {
      if (on_failure == FailurePolicy::escalate && !last) {
        trace.skipped_stages.push_back(policy.model_id);
        failures.emplace_back(policy.model_id, e.what());
        continue;
      }
      throw StageError(policy.model_id, "stage " + policy.model_id + " failed: " + e.what());
    }
    obs.model_id = policy.model_id;
    if (!obs.correct && query.task_kind == TaskKind::multiple_choice && query.gold_answer) {
      obs.correct = canonical_token(*query.gold_answer) ==
                    p_t_multiple_choice(obs.choice_dist, query.choice_labels).chosen_label;
    }
    trace.observations[policy.model_id] = obs;

    if (last && config.final_stage_unconditional) break;
    if (decide_stage(obs, policy, config, query.choice_labels, lookup_pik(policy, piks)).retain) break;
  }
  // Replaying what was gathered yields the decision, so live and offline
  // routing share one code path.
  result.decision = route_query(trace, config, piks);
  for (auto& skip : result.decision.skipped) {
    for (const auto& [model, why] : failures) {
      if (model == skip.model_id) skip.reason = why;
    }
  }
  return result;
}

}  // namespace cascade
