#include "cascade/cost_model.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include <fmt/format.h>

using nlohmann::json;

namespace cascade {

namespace {

std::int64_t checked_mul(std::int64_t a, std::int64_t b) {
  std::int64_t r = 0;
  if (__builtin_mul_overflow(a, b, &r)) throw std::overflow_error("compute cost overflows 64-bit integer");
  return r;
}

std::int64_t checked_add(std::int64_t a, std::int64_t b) {
  std::int64_t r = 0;
  if (__builtin_add_overflow(a, b, &r)) throw std::overflow_error("compute cost overflows 64-bit integer");
  return r;
}

const ModelSpec* find_spec(const std::vector<ModelSpec>& registry, const std::string& id) {
  for (const auto& m : registry) {
    if (m.model_id == id) return &m;
  }
  return nullptr;
}

}  // namespace

double forward_flops_full(std::int64_t n_layer, std::int64_t n_ctx, std::int64_t d_model) {
  if (n_layer <= 0 || d_model <= 0 || n_ctx < 0) {
    throw std::invalid_argument("forward_flops_full: n_layer and d_model must be positive, n_ctx non-negative");
  }
  const double L = static_cast<double>(n_layer), d = static_cast<double>(d_model);
  const double params = 12.0 * L * d * d;
  return 2.0 * params + 2.0 * L * static_cast<double>(n_ctx) * d;
}

double forward_flops_from_params(double param_count, std::int64_t n_layer, std::int64_t n_ctx) {
  if (!(param_count > 0) || n_layer <= 0 || n_ctx < 0) {
    throw std::invalid_argument("forward_flops_from_params: invalid argument");
  }
  return 2.0 * param_count +
         2.0 * static_cast<double>(n_ctx) * std::sqrt(param_count * static_cast<double>(n_layer) / 12.0);
}

double forward_flops_approx(std::int64_t param_count) {
  if (param_count <= 0) throw std::invalid_argument("forward_flops_approx: parameter count must be positive");
  return 2.0 * static_cast<double>(param_count);
}

std::int64_t chain_cc(const std::vector<StageCount>& counts, const std::vector<ModelSpec>& registry) {
  std::int64_t total = 0;
  for (const auto& c : counts) {
    if (c.k < 0) throw std::invalid_argument("chain_cc: negative query count for " + c.model_id);
    const ModelSpec* spec = find_spec(registry, c.model_id);
    if (!spec) throw std::invalid_argument("chain_cc: unknown model " + c.model_id);
    if (!spec->param_count) {
      throw std::domain_error("chain_cc: " + c.model_id +
                              " has no published parameter count; use token accounting instead");
    }
    total = checked_add(total, checked_mul(2, checked_mul(*spec->param_count, c.k)));
  }
  return total;
}

double usd_cost(std::int64_t tokens_in, std::int64_t tokens_out, const ModelSpec& spec) {
  if (tokens_in < 0 || tokens_out < 0) throw std::invalid_argument("usd_cost: negative token count");
  return static_cast<double>(tokens_in) / 1e6 * spec.price_in + static_cast<double>(tokens_out) / 1e6 * spec.price_out;
}

double reduced_fraction(double value, double baseline) {
  if (!(baseline > 0)) throw std::invalid_argument("reduced_fraction: baseline must be positive");
  return 1.0 - value / baseline;
}

CostReport cost_report(const std::vector<DecisionRecord>& decisions, const TraceFile& trace,
                       const CascadeConfig& config, const PikRegistry& piks, const CostOptions& options) {
  const auto& registry = trace.header.models;
  CostReport r;

  // Which visited stages of a decision are charged.
  auto billed = [&](const DecisionRecord& d, const StageVisit& v) {
    return options.bill_every_visit || d.abstained || v.retained;
  };
  std::vector<std::int64_t> counts(config.stages.size(), 0);
  std::vector<std::int64_t> pik_visits(config.stages.size(), 0);
  for (const auto& d : decisions) {
    for (const auto& v : d.visited) {
      for (std::size_t i = 0; i < config.stages.size(); ++i) {
        if (config.stages[i].model_id != v.model_id) continue;
        if (billed(d, v)) ++counts[i];
        if (v.p_ik) ++pik_visits[i];
      }
    }
  }
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    r.stage_counts.push_back({config.stages[i].model_id, counts[i]});
  }

  const std::string& final_id = config.final_stage().model_id;
  const ModelSpec* final_spec = find_spec(registry, final_id);
  if (!final_spec) throw std::invalid_argument("cost_report: final model " + final_id + " not in trace header");

  try {
    std::vector<StageCount> charged;
    for (const auto& c : r.stage_counts) {
      if (c.k > 0) charged.push_back(c);
    }
    std::int64_t cc = chain_cc(charged, registry);
    if (options.include_probe_cost) {
      for (std::size_t i = 0; i < config.stages.size(); ++i) {
        auto pik = piks.find(config.stages[i].model_id);
        if (config.stages[i].use_pik && pik != piks.end()) {
          cc = checked_add(cc, checked_mul(2 * pik->second.parameter_count(), pik_visits[i]));
        }
      }
    }
    r.cc_flops = cc;
  } catch (const std::domain_error&) {
    // api_only stage on the billed path: compute cost is undefined.
  }
  if (final_spec->param_count) {
    r.cc_baseline_flops =
        checked_mul(2, checked_mul(*final_spec->param_count, static_cast<std::int64_t>(decisions.size())));
    if (r.cc_flops && *r.cc_baseline_flops > 0) {
      r.reduced_cc = reduced_fraction(static_cast<double>(*r.cc_flops), static_cast<double>(*r.cc_baseline_flops));
    }
  }

  std::unordered_map<std::string, const QueryTrace*> by_id;
  by_id.reserve(trace.records.size());
  for (const auto& q : trace.records) by_id.emplace(q.query_id, &q);

  for (const auto& d : decisions) {
    auto it = by_id.find(d.query_id);
    if (it == by_id.end()) throw std::invalid_argument("cost_report: decision for unknown query " + d.query_id);
    for (const auto& v : d.visited) {
      if (!billed(d, v)) continue;
      const ModelObservation* obs = it->second->find(v.model_id);
      if (!obs) continue;
      const ModelSpec* spec = find_spec(registry, v.model_id);
      if (!spec) throw std::invalid_argument("cost_report: model " + v.model_id + " not in trace header");
      r.tokens_in += obs->tokens_in;
      r.tokens_out += obs->tokens_out;
      r.tokens_incomplete = r.tokens_incomplete || obs->tokens_unknown;
      if (v.model_id == final_id) r.final_stage_tokens_out += obs->tokens_out;
      r.usd += usd_cost(obs->tokens_in, obs->tokens_out, *spec);
    }
  }

  std::int64_t base_in = 0, base_out = 0;
  bool complete = true;
  for (const auto& d : decisions) {
    const ModelObservation* obs = by_id.at(d.query_id)->find(final_id);
    if (!obs) {
      complete = false;
      break;
    }
    base_in += obs->tokens_in;
    base_out += obs->tokens_out;
  }
  if (complete) {
    r.baseline_tokens_out = base_out;
    r.usd_baseline = usd_cost(base_in, base_out, *final_spec);
    if (base_out > 0) {
      r.reduced_tokens = reduced_fraction(static_cast<double>(r.final_stage_tokens_out), static_cast<double>(base_out));
    }
    if (*r.usd_baseline > 0) r.reduced_usd = reduced_fraction(r.usd, *r.usd_baseline);
  }
  return r;
}

json to_json(const CostReport& r) {
  auto opt = [](const auto& v) { return v ? json(*v) : json(nullptr); };
  json counts = json::array();
  for (const auto& c : r.stage_counts) counts.push_back({{"model_id", c.model_id}, {"k", c.k}});
  return {{"stage_counts", counts},
          {"cc_flops", opt(r.cc_flops)},
          {"cc_baseline_flops", opt(r.cc_baseline_flops)},
          {"cc_gflops", r.cc_flops ? json(to_gflops(*r.cc_flops)) : json(nullptr)},
          {"reduced_cc", opt(r.reduced_cc)},
          {"tokens_in", r.tokens_in},
          {"tokens_out", r.tokens_out},
          {"final_stage_tokens_out", r.final_stage_tokens_out},
          {"baseline_tokens_out", opt(r.baseline_tokens_out)},
          {"reduced_tokens", opt(r.reduced_tokens)},
          {"usd", r.usd},
          {"usd_baseline", opt(r.usd_baseline)},
          {"reduced_usd", opt(r.reduced_usd)},
          {"tokens_incomplete", r.tokens_incomplete}};
}

}  // namespace cascade
