#include "cascade/cli.hpp"

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "cascade/confidence.hpp"
#include "cascade/cost_model.hpp"
#include "cascade/gateway/service.hpp"
#include "cascade/metrics.hpp"
#include "cascade/pik.hpp"
#include "cascade/router.hpp"
#include "cascade/stats.hpp"
#include "cascade/trace.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cascade::cli {

namespace {

// Errors the user fixes by changing the invocation.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string format = "table";
  std::uint64_t seed = 0;
  bool quiet = false;
};

std::size_t display_width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

void print_table(std::ostream& out, const std::vector<std::string>& head,
                 const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w(head.size());
  for (std::size_t i = 0; i < head.size(); ++i) w[i] = display_width(head[i]);
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size() && i < w.size(); ++i) w[i] = std::max(w[i], display_width(r[i]));
  }
  auto line = [&](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      s += cells[i];
      if (i + 1 < cells.size()) s += std::string(w[i] - display_width(cells[i]) + 2, ' ');
    }
    out << s << '\n';
  };
  line(head);
  std::size_t total = 0;
  for (auto x : w) total += x + 2;
  out << std::string(total > 2 ? total - 2 : 0, '-') << '\n';
  for (const auto& r : rows) line(r);
}

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

void print_csv(std::ostream& out, const std::vector<std::string>& head,
               const std::vector<std::vector<std::string>>& rows) {
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << csv_cell(cells[i]);
    out << '\n';
  };
  line(head);
  for (const auto& r : rows) line(r);
}

void print_rows(std::ostream& out, const Globals& g, const std::vector<std::string>& head,
                const std::vector<std::vector<std::string>>& rows) {
  if (g.format == "csv") {
    print_csv(out, head, rows);
  } else {
    print_table(out, head, rows);
  }
}

std::string pct(std::optional<double> x) { return x ? fmt::format("{:.2f}%", *x * 100.0) : "--"; }
std::string signed_pp(std::optional<double> pp) { return pp ? fmt::format("{:+.2f}%", *pp) : "--"; }

std::string chain_name(const CascadeConfig& config) {
  std::string s;
  for (const auto& st : config.stages) s += (s.empty() ? "" : " → ") + st.model_id;
  return s;
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) parts.push_back(item);
  return parts;
}

std::int64_t parse_int(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    throw UsageError("invalid integer for " + what + ": '" + s + "'");
  }
  if (pos != s.size()) throw UsageError("invalid integer for " + what + ": '" + s + "'");
  return v;
}

double parse_double(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw UsageError("invalid number for " + what + ": '" + s + "'");
  }
  if (pos != s.size()) throw UsageError("invalid number for " + what + ": '" + s + "'");
  return v;
}

std::pair<std::string, std::string> split_assignment(const std::string& s, const std::string& what) {
  auto eq = s.rfind('=');
  if (eq == std::string::npos || eq == 0) throw UsageError(what + " expects MODEL=VALUE, got '" + s + "'");
  return {s.substr(0, eq), s.substr(eq + 1)};
}

std::pair<std::int64_t, std::int64_t> parse_token_pair(const std::string& s, const std::string& what) {
  auto parts = split(s, ':');
  if (parts.size() != 2) throw UsageError(what + " expects IN:OUT, got '" + s + "'");
  auto in = parse_int(parts[0], what), out = parse_int(parts[1], what);
  if (in < 0 || out < 0) throw UsageError(what + ": token counts must be non-negative");
  return {in, out};
}

const ModelSpec& spec_for(const std::vector<ModelSpec>& registry, const std::string& id) {
  for (const auto& m : registry) {
    if (m.model_id == id) return m;
  }
  throw UsageError("model " + id + " is not in the pricing table");
}

CascadeConfig load_config_checked(const fs::path& path) {
  try {
    return read_cascade_config(path);
  } catch (const TraceError& e) {
    throw ConfigError(e.what());
  }
}

std::vector<std::string> default_labels(const TraceFile& trace, const CascadeConfig& config) {
  if (config.task_kind != TaskKind::multiple_choice || trace.records.empty()) return {};
  return trace.records.front().choice_labels;
}

// ---- replay ----

struct ReplayArgs {
  std::string trace, config, out, decisions_out, labels;
  bool include_probe_cost = false, bill_every_visit = false;
};

int cmd_replay(const ReplayArgs& a, const Globals& g, std::ostream& out) {
  CascadeConfig config = load_config_checked(a.config);
  TraceFile trace = read_trace(a.trace);
  config.validate(trace.header.models);
  PikRegistry piks = load_pik_registry(config, fs::path(a.config).parent_path());

  auto decisions = route_replay(trace, config, piks, {.require_labels = true});
  std::vector<std::string> labels = a.labels.empty() ? default_labels(trace, config) : split(a.labels, ',');
  EvalReport report = classification_metrics(decisions, labels);
  const std::string& final_id = config.final_stage().model_id;
  try {
    attach_pd(report, standalone_accuracy(trace, final_id), final_id);
  } catch (const std::exception&) {
    // final model did not see every query: no baseline
  }
  bool factual = !decisions.empty() &&
                 std::all_of(decisions.begin(), decisions.end(), [](const auto& d) { return d.factuality.has_value(); });
  if (factual) report.hallucination_rate = hallucination_rate(decisions);
  report.cost = cost_report(decisions, trace, config, piks,
                            {.bill_every_visit = a.bill_every_visit, .include_probe_cost = a.include_probe_cost});

  auto answers = stage_answer_counts(decisions, config);
  auto visits = stage_visit_counts(decisions, config);
  json j{{"chain", chain_name(config)}, {"report", to_json(report)}};
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    j["stage_answers"][config.stages[i].model_id] = answers[i];
    j["stage_visits"][config.stages[i].model_id] = visits[i];
  }
  if (!a.out.empty()) write_json_file(a.out, j);
  if (!a.decisions_out.empty()) write_decisions(decisions, a.decisions_out);

  if (g.format == "json") {
    out << j.dump(2) << '\n';
    return kExitOk;
  }
  std::vector<std::string> head{"LLM(s)", "Acc.", "PD", "Reduced CC", "P", "R", "F1"};
  std::vector<std::string> row{chain_name(config), pct(report.accuracy), signed_pp(report.pd),
                               pct(report.cost->reduced_cc), pct(report.macro_precision),
                               pct(report.macro_recall), pct(report.macro_f1)};
  if (report.hallucination_rate) {
    head.push_back("Halluc.");
    row.push_back(pct(report.hallucination_rate));
  }
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    head.push_back("k(" + config.stages[i].model_id + ")");
    row.push_back(std::to_string(answers[i]));
  }
  print_rows(out, g, head, {row});
  if (g.format == "table" && !g.quiet) {
    const auto& c = *report.cost;
    if (c.cc_flops) {
      out << fmt::format("compute: {} FLOPs ({:.2f} GFLOPs)", *c.cc_flops, to_gflops(*c.cc_flops));
      if (c.cc_baseline_flops) {
        out << fmt::format(" vs {} alone {} FLOPs ({:.2f} GFLOPs)", final_id, *c.cc_baseline_flops,
                           to_gflops(*c.cc_baseline_flops));
      }
      out << '\n';
    } else {
      out << "compute: undefined (a billed stage has no parameter count)\n";
    }
    out << fmt::format("tokens: in {} out {}{}; usd {:.6f}", c.tokens_in, c.tokens_out,
                       c.tokens_incomplete ? " (incomplete)" : "", c.usd);
    if (c.reduced_usd) out << fmt::format(" (reduced {})", pct(c.reduced_usd));
    out << '\n';
  }
  return kExitOk;
}

// ---- sweep ----

struct SweepArgs {
  std::string trace, config, taus, out;
  bool ablation = false;
};

int cmd_sweep(const SweepArgs& a, const Globals& g, std::ostream& out) {
  std::vector<double> taus;
  for (const auto& t : split(a.taus, ',')) {
    if (!t.empty()) taus.push_back(parse_double(t, "--taus"));
  }
  if (taus.empty()) throw UsageError("--taus: at least one threshold is required");
  for (double t : taus) {
    if (!(t >= 0.0 && t <= 1.0)) throw UsageError(fmt::format("--taus: {} is outside [0, 1]", t));
  }
  CascadeConfig config = load_config_checked(a.config);
  TraceFile trace = read_trace(a.trace);
  config.validate(trace.header.models);
  PikRegistry piks = load_pik_registry(config, fs::path(a.config).parent_path());
  auto rows = threshold_sweep(trace, config, taus, a.ablation, piks);

  json j = json::array();
  for (const auto& r : rows) j.push_back(to_json(r));
  if (!a.out.empty()) write_json_file(a.out, j);
  if (g.format == "json") {
    out << j.dump(2) << '\n';
    return kExitOk;
  }
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    cells.push_back({chain_name(config) + (r.with_pik ? " (w/ P(IK))" : " (w/o P(IK))"),
                     fmt::format("P(T) >= {:g}%", r.tau * 100.0), pct(r.accuracy), signed_pp(r.pd),
                     pct(r.reduced_cc), std::to_string(r.escalated)});
  }
  print_rows(out, g, {"Setting", "Threshold", "Acc.", "PD", "Reduced CC", "Escalated"}, cells);
  return kExitOk;
}

// ---- train-pik ----

struct TrainArgs {
  std::string trace, model, out, report;
  PikTrainConfig cfg;
};

int cmd_train_pik(TrainArgs a, const Globals& g, std::ostream& out, std::ostream& err) {
  TraceFile trace = read_trace(a.trace);
  if (!trace.header.find_model(a.model)) throw UsageError("model " + a.model + " is not in the trace header");
  a.cfg.seed = g.seed;
  a.cfg.validate();

  std::vector<PikSample> samples;
  std::size_t unlabeled = 0;
  for (const auto& q : trace.records) {
    const ModelObservation* obs = q.find(a.model);
    if (!obs || !obs->hidden_state) continue;
    std::optional<bool> label = obs->correct;
    if (!label && q.gold_answer && q.task_kind == TaskKind::multiple_choice && !q.choice_labels.empty()) {
      auto pt = p_t_multiple_choice(obs->choice_dist, q.choice_labels);
      label = pt.matched && pt.chosen_label == canonical_token(*q.gold_answer);
    }
    if (!label) {
      ++unlabeled;
      continue;
    }
    samples.push_back({*obs->hidden_state, *label});
  }
  if (samples.empty()) {
    throw std::domain_error("trace has no labeled hidden states for " + a.model +
                            "; re-run extraction with hidden-state capture");
  }
  if (unlabeled && !g.quiet) err << fmt::format("warning: skipped {} records without a correctness label\n", unlabeled);

  auto result = pik_train(samples, a.cfg, trace.header.dataset_name, a.model);
  save_pik_model(result.model, a.out);
  auto sizes = split_sizes(samples.size(), a.cfg);
  json rep{{"model_id", a.model},
           {"n_samples", samples.size()},
           {"split", {{"train", sizes.train}, {"val", sizes.val}, {"test", sizes.test}}},
           {"seed", a.cfg.seed},
           {"best_epoch", result.best_epoch},
           {"epochs_run", result.epochs_run},
           {"test", to_json(result.test_report)},
           {"weights", a.out}};
  if (!a.report.empty()) write_json_file(a.report, rep);
  if (g.format == "json") {
    out << rep.dump(2) << '\n';
  } else {
    print_rows(out, g, {"Model", "Samples", "Best epoch", "Test acc.", "Test F1", "Test AUROC"},
               {{a.model, std::to_string(samples.size()), std::to_string(result.best_epoch),
                 pct(result.test_report.accuracy), pct(result.test_report.f1),
                 result.test_report.auroc ? fmt::format("{:.4f}", *result.test_report.auroc) : "--"}});
  }
  return kExitOk;
}

// ---- cost ----

struct CostArgs {
  std::string pricing, trace, config, baseline_model, baseline_tokens;
  std::vector<std::string> counts, stage_tokens;
  bool include_probe_cost = false, bill_every_visit = false;
};

int print_cost_report(const CostReport& c, const std::string& label, const Globals& g, std::ostream& out) {
  if (g.format == "json") {
    out << to_json(c).dump(2) << '\n';
    return kExitOk;
  }
  std::vector<std::vector<std::string>> rows;
  auto flops = [](std::optional<std::int64_t> f) { return f ? std::to_string(*f) : std::string("--"); };
  auto gflops = [](std::optional<std::int64_t> f) {
    return f ? fmt::format("{:.2f}", to_gflops(*f)) : std::string("--");
  };
  rows.push_back({label, flops(c.cc_flops), gflops(c.cc_flops), gflops(c.cc_baseline_flops), pct(c.reduced_cc),
                  pct(c.reduced_tokens), fmt::format("{:.6f}", c.usd),
                  c.usd_baseline ? fmt::format("{:.6f}", *c.usd_baseline) : "--", pct(c.reduced_usd)});
  print_rows(out, g,
             {"Chain", "CC (FLOPs)", "CC (GFLOPs)", "Baseline (GFLOPs)", "Reduced CC", "Reduced tokens", "USD",
              "USD baseline", "Reduced cost"},
             rows);
  return kExitOk;
}

int cmd_cost(const CostArgs& a, const Globals& g, std::ostream& out, std::ostream& err) {
  if (!a.trace.empty() || !a.config.empty()) {
    if (a.trace.empty() || a.config.empty()) throw UsageError("--trace and --config go together");
    CascadeConfig config = load_config_checked(a.config);
    TraceFile trace = read_trace(a.trace);
    if (!a.pricing.empty()) trace.header.models = read_model_registry(a.pricing);
    config.validate(trace.header.models);
    PikRegistry piks = load_pik_registry(config, fs::path(a.config).parent_path());
    auto decisions = route_replay(trace, config, piks);
    auto report = cost_report(decisions, trace, config, piks,
                              {.bill_every_visit = a.bill_every_visit, .include_probe_cost = a.include_probe_cost});
    return print_cost_report(report, chain_name(config), g, out);
  }
  if (a.pricing.empty()) throw UsageError("--pricing is required without --trace/--config");
  if (a.counts.empty() && a.stage_tokens.empty()) throw UsageError("give --counts and/or --stage-tokens");
  auto registry = read_model_registry(a.pricing);

  CostReport r;
  std::string label;
  std::int64_t total_queries = 0;
  for (const auto& s : a.counts) {
    auto [id, k] = split_assignment(s, "--counts");
    spec_for(registry, id);
    r.stage_counts.push_back({id, parse_int(k, "--counts")});
    if (r.stage_counts.back().k < 0) throw UsageError("--counts: negative count for " + id);
    total_queries += r.stage_counts.back().k;
    label += (label.empty() ? "" : " → ") + id;
  }

  // Baseline: the named model, else the largest model of the chain.
  std::string base_id = a.baseline_model;
  if (base_id.empty()) {
    std::vector<std::string> ids;
    for (const auto& c : r.stage_counts) ids.push_back(c.model_id);
    for (const auto& s : a.stage_tokens) ids.push_back(split_assignment(s, "--stage-tokens").first);
    for (const auto& id : ids) {
      const auto& spec = spec_for(registry, id);
      if (base_id.empty()) {
        base_id = id;
        continue;
      }
      const auto& cur = spec_for(registry, base_id);
      bool bigger = spec.kind == ModelKind::api_only ||
                    (cur.kind != ModelKind::api_only && spec.param_count && cur.param_count &&
                     *spec.param_count > *cur.param_count);
      if (bigger) base_id = id;
    }
  }
  const ModelSpec& base = spec_for(registry, base_id);

  if (!r.stage_counts.empty()) {
    try {
      r.cc_flops = chain_cc(r.stage_counts, registry);
    } catch (const std::domain_error& e) {
      if (!g.quiet) err << "note: " << e.what() << '\n';
    }
    if (base.param_count) {
      r.cc_baseline_flops = chain_cc({{base_id, total_queries}}, registry);
      if (r.cc_flops && *r.cc_baseline_flops > 0) {
        r.reduced_cc = reduced_fraction(static_cast<double>(*r.cc_flops), static_cast<double>(*r.cc_baseline_flops));
      }
    }
  }

  for (const auto& s : a.stage_tokens) {
    auto [id, pair] = split_assignment(s, "--stage-tokens");
    auto [tin, tout] = parse_token_pair(pair, "--stage-tokens");
    r.tokens_in += tin;
    r.tokens_out += tout;
    if (id == base_id) r.final_stage_tokens_out += tout;
    r.usd += usd_cost(tin, tout, spec_for(registry, id));
    if (a.counts.empty()) label += (label.empty() ? "" : " → ") + id;
  }
  if (!a.baseline_tokens.empty()) {
    auto [bin, bout] = parse_token_pair(a.baseline_tokens, "--baseline-tokens");
    r.baseline_tokens_out = bout;
    r.usd_baseline = usd_cost(bin, bout, base);
    if (bout > 0) {
      r.reduced_tokens =
          reduced_fraction(static_cast<double>(r.final_stage_tokens_out), static_cast<double>(bout));
    }
    if (*r.usd_baseline > 0) r.reduced_usd = reduced_fraction(r.usd, *r.usd_baseline);
  }
  return print_cost_report(r, label, g, out);
}

// ---- mcnemar ----

struct McNemarArgs {
  std::string a, b, name;
  std::vector<std::int64_t> discordant;
  std::int64_t small_threshold = kMcNemarSmallThreshold;
};

int cmd_mcnemar(const McNemarArgs& m, const Globals& g, std::ostream& out) {
  std::int64_t b = 0, c = 0;
  if (!m.discordant.empty()) {
    if (!m.a.empty() || !m.b.empty()) throw UsageError("use either --discordant or --a/--b");
    b = m.discordant.at(0);
    c = m.discordant.at(1);
    if (b < 0 || c < 0) throw UsageError("--discordant: counts must be non-negative");
  } else {
    if (m.a.empty() || m.b.empty()) throw UsageError("give --a and --b decision files, or --discordant B C");
    std::tie(b, c) = discordant_counts(read_decisions(m.a), read_decisions(m.b));
  }
  auto r = mcnemar(b, c, m.small_threshold);
  if (g.format == "json") {
    out << to_json(r).dump(2) << '\n';
    return kExitOk;
  }
  std::string name = m.name.empty() ? (m.a.empty() ? "A vs B" : fs::path(m.a).stem().string() + " vs " +
                                                                   fs::path(m.b).stem().string())
                                    : m.name;
  print_rows(out, g, {"Comparison", "b", "c", "Chi-squared", "p-value", "Method"},
             {{name, std::to_string(r.b), std::to_string(r.c),
               r.statistic ? fmt::format("{:.2f}", *r.statistic) : "--", fmt::format("{:.4f}", r.p_value),
               to_string(r.method)}});
  return kExitOk;
}

// ---- validate-trace ----

int cmd_validate(const std::string& path, const Globals& g, std::ostream& out) {
  TraceFile trace = read_trace(path);
  std::vector<std::string> ids;
  for (const auto& m : trace.header.models) ids.push_back(m.model_id);
  if (g.format == "json") {
    out << json{{"valid", true}, {"records", trace.records.size()}, {"models", ids},
                {"dataset_name", trace.header.dataset_name}}
               .dump(2)
        << '\n';
  } else if (!g.quiet) {
    out << fmt::format("ok: {} records, models: {}\n", trace.records.size(), fmt::join(ids, ", "));
  }
  return kExitOk;
}

// ---- serve ----

std::atomic<gateway::GatewayServer*> g_server{nullptr};

extern "C" void on_signal(int) {
  if (auto* s = g_server.load()) s->stop();
}

struct ServeArgs {
  std::string config, listen, trace_out;
};

int cmd_serve(const ServeArgs& a, const Globals& g, std::ostream& out) {
  gateway::GatewayConfig config;
  try {
    config = gateway::read_gateway_config(a.config);
  } catch (const TraceError& e) {
    throw ConfigError(e.what());
  }
  if (!a.listen.empty()) config.listen = a.listen;
  if (!a.trace_out.empty()) config.trace_out = a.trace_out;
  config.validate();
  auto [host, port] = gateway::split_listen_address(config.listen);

  gateway::RetryPolicy retry;
  retry.seed = g.seed;
  auto backends = gateway::make_http_backends(config, retry);
  auto appender =
      std::make_shared<gateway::TraceAppender>(config.trace_out, gateway::live_trace_header(config), config.queue_capacity);
  auto service = std::make_shared<gateway::CascadeService>(config, backends, appender);
  gateway::GatewayServer server(service, !g.quiet);
  int bound = server.bind(host, port);
  if (bound < 0) throw std::runtime_error("cannot bind " + config.listen + " (address in use?)");
  if (!g.quiet) out << fmt::format("listening on {}:{}", host, bound) << std::endl;

  g_server.store(&server);
  auto prev_int = std::signal(SIGINT, on_signal);
  auto prev_term = std::signal(SIGTERM, on_signal);
  server.listen();
  std::signal(SIGINT, prev_int);
  std::signal(SIGTERM, prev_term);
  g_server.store(nullptr);
  appender->close();
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Confidence-gated LLM cascade router: offline replay, evaluation, and an HTTP gateway", "cascade"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--format", g.format, "Output format")->check(CLI::IsMember({"table", "json", "csv"}));
  app.add_option("--seed", g.seed, "Seed for training and retry jitter");
  app.add_flag("--quiet", g.quiet, "Suppress informational output");

  ReplayArgs rp;
  auto* replay = app.add_subcommand("replay", "Route a recorded trace and report accuracy and cost");
  replay->add_option("--trace", rp.trace, "Trace JSONL")->required();
  replay->add_option("--config", rp.config, "Cascade config JSON")->required();
  replay->add_option("--out", rp.out, "Write the JSON report here");
  replay->add_option("--decisions-out", rp.decisions_out, "Write per-query decisions (JSONL)");
  replay->add_option("--labels", rp.labels, "Comma-separated label set for macro metrics");
  replay->add_flag("--include-probe-cost", rp.include_probe_cost, "Bill P(IK) probe FLOPs");
  replay->add_flag("--bill-every-visit", rp.bill_every_visit, "Charge every visited stage, not only the answering one");

  SweepArgs sw;
  auto* sweep = app.add_subcommand("sweep", "Replay over a list of P(T) thresholds");
  sweep->add_option("--trace", sw.trace, "Trace JSONL")->required();
  sweep->add_option("--config", sw.config, "Cascade config JSON")->required();
  sweep->add_option("--taus", sw.taus, "Comma-separated thresholds, e.g. 0.95,0.9,0.8")->required();
  sweep->add_flag("--ablation", sw.ablation, "Also run every threshold with P(IK) disabled");
  sweep->add_option("--out", sw.out, "Write the JSON rows here");

  TrainArgs tr;
  auto* train = app.add_subcommand("train-pik", "Train a P(IK) probe on a model's hidden states");
  train->add_option("--trace", tr.trace, "Trace JSONL with hidden states")->required();
  train->add_option("--model", tr.model, "Model whose hidden states to use")->required();
  train->add_option("--out", tr.out, "Weights JSON output")->required();
  train->add_option("--report", tr.report, "Training report JSON output");
  train->add_option("--hidden-width", tr.cfg.hidden_width, "Hidden layer width");
  train->add_option("--epochs", tr.cfg.epochs, "Maximum epochs");
  train->add_option("--batch-size", tr.cfg.batch_size, "Mini-batch size");
  train->add_option("--lr", tr.cfg.learning_rate, "Adam learning rate");
  train->add_option("--patience", tr.cfg.early_stop_patience, "Early-stop patience in epochs");

  CostArgs co;
  auto* cost = app.add_subcommand("cost", "Compute cost and token pricing of a routing outcome");
  cost->add_option("--pricing", co.pricing, "Model registry with parameter counts and prices");
  cost->add_option("--counts", co.counts, "MODEL=K queries billed to a stage (repeatable)");
  cost->add_option("--stage-tokens", co.stage_tokens, "MODEL=IN:OUT tokens billed to a stage (repeatable)");
  cost->add_option("--baseline-tokens", co.baseline_tokens, "IN:OUT tokens of the baseline model alone");
  cost->add_option("--baseline-model", co.baseline_model, "Baseline model (default: the largest given)");
  cost->add_option("--trace", co.trace, "Compute from a replay of this trace instead");
  cost->add_option("--config", co.config, "Cascade config for --trace");
  cost->add_flag("--include-probe-cost", co.include_probe_cost, "Bill P(IK) probe FLOPs");
  cost->add_flag("--bill-every-visit", co.bill_every_visit, "Charge every visited stage");

  McNemarArgs mc;
  auto* mcn = app.add_subcommand("mcnemar", "McNemar's test between two decision files");
  mcn->add_option("--a", mc.a, "Decisions JSONL of system A");
  mcn->add_option("--b", mc.b, "Decisions JSONL of system B");
  mcn->add_option("--discordant", mc.discordant, "Discordant counts B C directly")->expected(2);
  mcn->add_option("--small-threshold", mc.small_threshold, "Use the exact test below this many discordant pairs");
  mcn->add_option("--name", mc.name, "Row label");

  std::string validate_path;
  auto* validate = app.add_subcommand("validate-trace", "Check a trace file against the format");
  validate->add_option("--trace", validate_path, "Trace JSONL")->required();

  ServeArgs sv;
  auto* serve = app.add_subcommand("serve", "Run the HTTP gateway");
  serve->add_option("--config", sv.config, "Gateway config JSON")->required();
  serve->add_option("--listen", sv.listen, "host:port (overrides the config)");
  serve->add_option("--trace-out", sv.trace_out, "Live trace output (overrides the config)");

  std::vector<std::string> argv_store{"cascade"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    if (const auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front()) {
      err << "see: cascade " << sub->get_name() << " --help\n";
    } else {
      err << "see: cascade --help\n";
    }
    return kExitUsage;
  }

  try {
    if (*replay) return cmd_replay(rp, g, out);
    if (*sweep) return cmd_sweep(sw, g, out);
    if (*train) return cmd_train_pik(tr, g, out, err);
    if (*cost) return cmd_cost(co, g, out, err);
    if (*mcn) return cmd_mcnemar(mc, g, out);
    if (*validate) return cmd_validate(validate_path, g, out);
    if (*serve) return cmd_serve(sv, g, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitDomainError;
  }
  return kExitUsage;
}

}  // namespace cascade::cli
