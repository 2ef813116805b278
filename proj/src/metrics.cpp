#include "cascade/metrics.hpp"

#include <algorithm>
#include <future>
#include <stdexcept>

#include "cascade/confidence.hpp"

using nlohmann::json;

namespace cascade {

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

EvalReport classification_metrics(const std::vector<DecisionRecord>& decisions,
                                  const std::vector<std::string>& label_set) {
  EvalReport r;
  r.n = decisions.size();
  std::size_t correct = 0;
  for (const auto& d : decisions) {
    if (!d.correct) throw std::invalid_argument("classification_metrics: unlabeled decision " + d.query_id);
    if (*d.correct) ++correct;
  }
  r.accuracy = ratio(correct, r.n);
  if (label_set.empty()) return r;

  std::vector<std::string> gold;
  gold.reserve(decisions.size());
  for (const auto& d : decisions) {
    if (!d.gold) throw std::invalid_argument("classification_metrics: decision " + d.query_id + " has no gold label");
    std::string g = canonical_token(*d.gold);
    if (std::find(label_set.begin(), label_set.end(), g) == label_set.end()) {
      throw std::invalid_argument("classification_metrics: gold label '" + g + "' outside the label set");
    }
    gold.push_back(std::move(g));
  }

  double sum_p = 0, sum_r = 0, sum_f = 0;
  for (const auto& label : label_set) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < decisions.size(); ++i) {
      const bool predicted = !decisions[i].abstained && decisions[i].answer == label;
      const bool actual = gold[i] == label;
      if (predicted && actual) ++tp;
      else if (predicted) ++fp;
      else if (actual) ++fn;
    }
    ClassMetrics m{label, ratio(tp, tp + fp), ratio(tp, tp + fn), 0.0};
    if (m.precision + m.recall > 0) m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
    sum_p += m.precision;
    sum_r += m.recall;
    sum_f += m.f1;
    r.per_class.push_back(std::move(m));
  }
  const double k = static_cast<double>(label_set.size());
  r.macro_precision = sum_p / k;
  r.macro_recall = sum_r / k;
  r.macro_f1 = sum_f / k;
  return r;
}

double hallucination_rate(const std::vector<DecisionRecord>& decisions) {
  if (decisions.empty()) return 0.0;
  std::size_t incorrect = 0;
  for (const auto& d : decisions) {
    if (!d.factuality) throw std::invalid_argument("hallucination_rate: decision " + d.query_id + " has no factuality label");
    if (*d.factuality == Factuality::incorrect) ++incorrect;
  }
  return ratio(incorrect, decisions.size());
}

double standalone_accuracy(const TraceFile& trace, const std::string& model_id) {
  if (trace.records.empty()) throw std::invalid_argument("standalone_accuracy: empty trace");
  std::size_t correct = 0;
  for (const auto& q : trace.records) {
    const ModelObservation* obs = q.find(model_id);
    if (!obs) throw std::invalid_argument("standalone_accuracy: query " + q.query_id + " has no " + model_id + " observation");
    bool ok = false;
    if (obs->correct) {
      ok = *obs->correct;
    } else if (q.task_kind == TaskKind::multiple_choice && q.gold_answer) {
      ok = p_t_multiple_choice(obs->choice_dist, q.choice_labels).chosen_label == canonical_token(*q.gold_answer);
    } else {
      throw std::invalid_argument("standalone_accuracy: query " + q.query_id + " is unlabeled");
    }
    if (ok) ++correct;
  }
  return ratio(correct, trace.records.size());
}

void attach_pd(EvalReport& report, double baseline_accuracy, const std::string& baseline_name) {
  report.pd = (report.accuracy - baseline_accuracy) * 100.0;
  report.pd_baseline = baseline_name;
}

json to_json(const EvalReport& r) {
  auto opt = [](const auto& v) { return v ? json(*v) : json(nullptr); };
  json per_class = json::array();
  for (const auto& m : r.per_class) {
    per_class.push_back({{"label", m.label}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}});
  }
  return {{"n", r.n},
          {"accuracy", r.accuracy},
          {"macro_precision", opt(r.macro_precision)},
          {"macro_recall", opt(r.macro_recall)},
          {"macro_f1", opt(r.macro_f1)},
          {"per_class", per_class},
          {"pd", opt(r.pd)},
          {"pd_baseline", opt(r.pd_baseline)},
          {"hallucination_rate", opt(r.hallucination_rate)},
          {"cost", r.cost ? to_json(*r.cost) : json(nullptr)}};
}

std::vector<SweepRow> threshold_sweep(const TraceFile& trace, const CascadeConfig& config,
                                      const std::vector<double>& taus, bool with_and_without_pik,
                                      const PikRegistry& piks) {
  if (taus.empty()) throw std::invalid_argument("threshold_sweep: no tau values");
  config.validate();
  const double baseline = standalone_accuracy(trace, config.final_stage().model_id);
  const bool config_uses_pik =
      std::any_of(config.stages.begin(), config.stages.end(), [](const StagePolicy& s) { return s.use_pik; });

  struct Cell {
    double tau;
    bool with_pik;
  };
  std::vector<Cell> cells;
  if (with_and_without_pik) {
    for (double t : taus) cells.push_back({t, true});
    for (double t : taus) cells.push_back({t, false});
  } else {
    for (double t : taus) cells.push_back({t, config_uses_pik});
  }

  auto run_cell = [&](const Cell& cell) {
    CascadeConfig c = config;
    for (auto& s : c.stages) {
      s.tau_t = cell.tau;
      if (!cell.with_pik) s.use_pik = false;
    }
    c.validate();
    const auto decisions = route_replay(trace, c, piks, {.require_labels = true});
    const EvalReport metrics = classification_metrics(decisions, {});
    const CostReport cost = cost_report(decisions, trace, c, piks);
    SweepRow row;
    row.tau = cell.tau;
    row.with_pik = cell.with_pik;
    row.accuracy = metrics.accuracy;
    row.pd = (metrics.accuracy - baseline) * 100.0;
    row.reduced_cc = cost.reduced_cc;
    row.stage_visits = stage_visit_counts(decisions, c);
    for (const auto& d : decisions) {
      if (d.visited.empty() || !d.visited.front().retained || d.answering_model != c.stages.front().model_id) {
        ++row.escalated;
      }
    }
    return row;
  };

  // Cells are independent; results land in cell order regardless of timing.
  std::vector<std::future<SweepRow>> futures;
  futures.reserve(cells.size());
  for (const auto& cell : cells) futures.push_back(std::async(std::launch::async, run_cell, cell));
  std::vector<SweepRow> rows;
  rows.reserve(cells.size());
  for (auto& f : futures) rows.push_back(f.get());
  return rows;
}

json to_json(const SweepRow& row) {
  return {{"tau", row.tau},
          {"with_pik", row.with_pik},
          {"accuracy", row.accuracy},
          {"pd", row.pd},
          {"reduced_cc", row.reduced_cc ? json(*row.reduced_cc) : json(nullptr)},
          {"escalated", row.escalated},
          {"stage_visits", row.stage_visits}};
}

}  // namespace cascade
