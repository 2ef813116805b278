#include <cmath>
#include <random>

#include "doctest.h"
#include "cascade/gateway/backend.hpp"
#include "cascade/metrics.hpp"
#include "cascade/router.hpp"
#include "support/mock_upstream.hpp"
#include "support/oracle.hpp"
#include "support/synthetic.hpp"
#include "support/tempdir.hpp"

using namespace cascade;

namespace {

const std::vector<std::string> ABCD = {"A", "B", "C", "D"};

// Single affine layer with zero weights: output sigmoid(bias) for any input.
PikModel constant_pik(double p, int dim = 2) {
  PikModel m;
  DenseLayer l;
  l.in = dim;
  l.out = 1;
  l.weights.assign(static_cast<std::size_t>(dim), 0.0);
  l.bias = {std::log(p / (1 - p))};
  m.layers = {l};
  return m;
}

ModelObservation mc_obs(const std::string& model, std::initializer_list<TokenProb> dist) {
  ModelObservation o;
  o.model_id = model;
  o.choice_dist.entries = dist;
  o.hidden_state = std::vector<float>{0.0f, 0.0f};
  o.answer_text = "x";
  o.tokens_in = 10;
  o.tokens_out = 1;
  return o;
}

CascadeConfig two_stage(double tau_t = 0.9) {
  CascadeConfig c;
  c.stages = {{"8B", tau_t, 0.5, false, std::nullopt}, {"70B", tau_t, 0.5, false, std::nullopt}};
  return c;
}

QueryTrace mc_query(const std::string& id, const std::string& gold) {
  QueryTrace q;
  q.query_id = id;
  q.prompt = "prompt " + id;
  q.gold_answer = gold;
  q.choice_labels = ABCD;
  return q;
}

}  // namespace

TEST_CASE("gate examples") {
  CascadeConfig c = two_stage();
  StagePolicy p{"8B", 0.9, 0.5, true, "probe.json"};
  PikModel knows = constant_pik(0.9);

  auto obs = mc_obs("8B", {{"A", 0.95}, {"B", 0.05}});
  auto out = decide_stage(obs, p, c, ABCD, &knows);
  CHECK(out.retain);
  CHECK(out.gate == Gate::pass);
  CHECK(out.p_ik.value() == doctest::Approx(0.9));
  CHECK(out.answer == "A");

  obs = mc_obs("8B", {{"A", 0.5}, {"B", 0.3}});
  out = decide_stage(obs, p, c, ABCD, &knows);
  CHECK_FALSE(out.retain);
  CHECK(out.gate == Gate::fail_pt);

  PikModel unsure = constant_pik(0.2);
  obs = mc_obs("8B", {{"A", 0.99}});
  out = decide_stage(obs, p, c, ABCD, &unsure);
  CHECK_FALSE(out.retain);
  CHECK(out.gate == Gate::fail_pik);
  CHECK(out.p_t.value() == 0.99);  // still recorded

  // thresholds are inclusive
  p.use_pik = false;
  obs = mc_obs("8B", {{"C", 0.9}});
  CHECK(decide_stage(obs, p, c, ABCD, nullptr).retain);
}

TEST_CASE("missing probe or hidden state is a stage error") {
  CascadeConfig c = two_stage();
  StagePolicy p{"8B", 0.9, 0.5, true, "probe.json"};
  auto obs = mc_obs("8B", {{"A", 0.95}});
  CHECK_THROWS_AS(decide_stage(obs, p, c, ABCD, nullptr), StageError);
  PikModel pk = constant_pik(0.9);
  obs.hidden_state.reset();
  CHECK_THROWS_AS(decide_stage(obs, p, c, ABCD, &pk), StageError);
}

TEST_CASE("ten-query two-stage example: 4 retained at stage 1, 6 at stage 2") {
  TraceFile t;
  t.header.models = {testsupport::registry_spec("8B"), testsupport::registry_spec("70B")};
  const double stage1[] = {0.95, 0.5, 0.91, 0.2, 0.9, 0.89, 0.99, 0.1, 0.3, 0.6};
  for (int i = 0; i < 10; ++i) {
    QueryTrace q = mc_query("q" + std::to_string(i), "A");
    q.observations["8B"] = mc_obs("8B", {{"A", stage1[i]}});
    q.observations["70B"] = mc_obs("70B", {{"B", 0.7}});
    t.records.push_back(q);
  }
  CascadeConfig c = two_stage();
  auto d = route_replay(t, c, {});
  auto oracle = testsupport::oracle_replay(t, c, {});
  CHECK(stage_answer_counts(d, c) == std::vector<std::size_t>{4, 6});
  CHECK(oracle.answered == std::vector<std::int64_t>{4, 6});
  CHECK(stage_visit_counts(d, c) == std::vector<std::size_t>{10, 6});
  // stage-1 answers are right, stage-2 answers are wrong
  auto r = classification_metrics(d, ABCD);
  CHECK(r.accuracy == doctest::Approx(0.4));
}

TEST_CASE("single-stage chain reproduces the model's standalone accuracy") {
  testsupport::SyntheticOptions o;
  o.chain = {"70B"};
  o.n_queries = 300;
  TraceFile t = testsupport::make_trace(o);
  CascadeConfig c;
  c.stages = {{"70B", 0.99, 0.5, false, std::nullopt}};
  auto d = route_replay(t, c, {});
  for (const auto& x : d) CHECK(x.answering_model == "70B");
  CHECK(classification_metrics(d, ABCD).accuracy == standalone_accuracy(t, "70B"));
}

TEST_CASE("replay agrees with the brute-force oracle on random traces") {
  std::mt19937_64 rng(2024);
  for (int seed = 0; seed < 20; ++seed) {
    testsupport::SyntheticOptions o;
    o.seed = 1000 + seed;
    o.n_queries = 200;
    o.hidden_dim = seed % 2 ? 6 : 0;
    o.explicit_correct = seed % 3 == 0;
    o.chain = seed % 4 == 0 ? std::vector<std::string>{"8B", "70B"} : std::vector<std::string>{"3B", "8B", "70B"};
    TraceFile t = testsupport::make_trace(o);
    auto rc = testsupport::random_cascade(rng, o.chain, o.hidden_dim, true);
    auto d = route_replay(t, rc.config, rc.piks);
    auto oracle = testsupport::oracle_replay(t, rc.config, rc.piks);
    REQUIRE(d.size() == oracle.decisions.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto& od = oracle.decisions[i];
      CHECK(d[i].answering_model == od.answering_model);
      CHECK(d[i].abstained == od.abstained);
      CHECK(d[i].correct.value() == od.correct);
      if (!od.abstained) CHECK(d[i].answer == od.answer);
      REQUIRE(d[i].visited.size() == od.visits.size());
      for (std::size_t v = 0; v < od.visits.size(); ++v) {
        CHECK(to_string(d[i].visited[v].gate) == od.visits[v].gate);
        CHECK(d[i].visited[v].p_t.value() == od.visits[v].p_t);
      }
    }
  }
}

TEST_CASE("per-query answering stage is monotone in tau_t") {
  testsupport::SyntheticOptions o;
  o.seed = 77;
  o.n_queries = 500;
  TraceFile t = testsupport::make_trace(o);
  const double taus[] = {0.0, 0.5, 0.7, 0.9, 0.95, 1.0};
  std::vector<std::size_t> prev(t.records.size(), 0);
  for (double tau : taus) {
    CascadeConfig c;
    for (const auto& id : o.chain) c.stages.push_back({id, tau, 0.5, false, std::nullopt});
    auto d = route_replay(t, c, {});
    for (std::size_t i = 0; i < d.size(); ++i) {
      CHECK(d[i].answering_index(c) >= prev[i]);
      prev[i] = d[i].answering_index(c);
    }
    if (tau == 0.0) CHECK(stage_answer_counts(d, c)[0] == t.records.size());
  }
}

TEST_CASE("replay only needs observations for stages a query reaches") {
  TraceFile t;
  t.header.models = {testsupport::registry_spec("8B"), testsupport::registry_spec("70B")};
  QueryTrace q = mc_query("q0", "A");
  q.observations["8B"] = mc_obs("8B", {{"A", 0.95}});
  t.records.push_back(q);
  CascadeConfig c = two_stage();
  CHECK(route_replay(t, c, {})[0].answering_model == "8B");
  t.records[0].observations["8B"] = mc_obs("8B", {{"A", 0.5}});
  CHECK_THROWS_AS(route_replay(t, c, {}), StageError);
}

TEST_CASE("skipped stages replay as skips") {
  TraceFile t;
  t.header.models = {testsupport::registry_spec("3B"), testsupport::registry_spec("8B"),
                     testsupport::registry_spec("70B")};
  QueryTrace q = mc_query("q0", "B");
  q.observations["3B"] = mc_obs("3B", {{"A", 0.2}});
  q.observations["70B"] = mc_obs("70B", {{"B", 0.6}});
  q.skipped_stages = {"8B"};
  t.records.push_back(q);
  CascadeConfig c;
  c.stages = {{"3B", 0.9, 0.5, false, {}}, {"8B", 0.9, 0.5, false, {}}, {"70B", 0.9, 0.5, false, {}}};
  auto d = route_replay(t, c, {});
  CHECK(d[0].answering_model == "70B");
  REQUIRE(d[0].skipped.size() == 1);
  CHECK(d[0].skipped[0].model_id == "8B");
  CHECK(d[0].correct.value());
}

TEST_CASE("abstain mode when the final stage is gated") {
  TraceFile t;
  t.header.models = {testsupport::registry_spec("8B"), testsupport::registry_spec("70B")};
  QueryTrace q = mc_query("q0", "A");
  q.observations["8B"] = mc_obs("8B", {{"A", 0.5}});
  q.observations["70B"] = mc_obs("70B", {{"A", 0.6}});
  t.records.push_back(q);
  CascadeConfig c = two_stage();
  c.final_stage_unconditional = false;
  auto d = route_replay(t, c, {});
  CHECK(d[0].abstained);
  CHECK_FALSE(d[0].correct.value());
  CHECK(d[0].factuality == Factuality::abstain);
  c.final_stage_unconditional = true;
  d = route_replay(t, c, {});
  CHECK(d[0].answering_model == "70B");
  CHECK(d[0].visited.back().gate == Gate::final);
}

TEST_CASE("open-ended routing uses the first-token target mass") {
  TraceFile t;
  t.header.models = {testsupport::registry_spec("8B"), testsupport::registry_spec("70B")};
  QueryTrace q;
  q.query_id = "q0";
  q.prompt = "Who wrote it?";
  q.task_kind = TaskKind::open_ended;
  for (const char* id : {"8B", "70B"}) {
    ModelObservation o;
    o.model_id = id;
    o.answer_text = std::string("Answer: ") + id;
    o.first_token_dist = ChoiceDistribution{{{"Answer", 0.6}, {" Answer", 0.35}}};
    o.correct = std::string(id) == "8B";
    o.tokens_in = 5;
    o.tokens_out = 3;
    q.observations[id] = o;
  }
  t.records.push_back(q);
  CascadeConfig c = two_stage();
  c.task_kind = TaskKind::open_ended;
  auto d = route_replay(t, c, {});
  CHECK(d[0].answering_model == "8B");
  CHECK(d[0].answer == "Answer: 8B");
  CHECK(d[0].visited[0].p_t.value() == doctest::Approx(0.95));
  CHECK(d[0].correct.value());
}

TEST_CASE("config validation") {
  auto reg = testsupport::paper_registry();
  CascadeConfig c;
  CHECK_THROWS_AS(c.validate(), ConfigError);  // no stages
  c.stages = {{"70B", 0.9, 0.5, false, {}}, {"8B", 0.9, 0.5, false, {}}};
  CHECK_NOTHROW(c.validate());
  CHECK_THROWS_AS(c.validate(reg), ConfigError);  // not ascending
  c.stages = {{"GPT-4o", 0.9, 0.5, false, {}}, {"70B", 0.9, 0.5, false, {}}};
  CHECK_THROWS_AS(c.validate(reg), ConfigError);  // api_only must be last
  c.stages = {{"70B", 0.9, 0.5, false, {}}, {"GPT-4o", 0.9, 0.5, false, {}}};
  CHECK_NOTHROW(c.validate(reg));
  c.stages = {{"8B", 1.5, 0.5, false, {}}};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.stages = {{"8B", 0.9, -0.1, false, {}}};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.stages = {{"8B", 0.9, 0.5, true, std::nullopt}};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.stages = {{"8B", 0.9, 0.5, false, {}}, {"8B", 0.9, 0.5, false, {}}};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.stages = {{"13B", 0.9, 0.5, false, {}}};
  CHECK_THROWS_AS(c.validate(reg), ConfigError);
}

TEST_CASE("config and decisions serialize losslessly") {
  testsupport::TempDir dir;
  CascadeConfig c;
  c.stages = {{"3B", 0.8, 0.4, true, "p3.json"}, {"70B", 0.95, 0.5, false, {}}};
  c.answer_target_tokens = {"Answer", " Answer"};
  CHECK(cascade_config_from_json(to_json(c)) == c);

  testsupport::SyntheticOptions o;
  o.n_queries = 50;
  o.with_factuality = true;
  TraceFile t = testsupport::make_trace(o);
  CascadeConfig c3;
  for (const auto& id : o.chain) c3.stages.push_back({id, 0.8, 0.5, false, {}});
  auto d = route_replay(t, c3, {});
  write_decisions(d, dir / "d.jsonl");
  CHECK(read_decisions(dir / "d.jsonl") == d);
}

// ---- live routing against scripted in-process backends ----

namespace {

struct LiveFixture {
  std::shared_ptr<testsupport::ScriptedBackend> b3 = std::make_shared<testsupport::ScriptedBackend>("3B");
  std::shared_ptr<testsupport::ScriptedBackend> b8 = std::make_shared<testsupport::ScriptedBackend>("8B");
  std::shared_ptr<testsupport::ScriptedBackend> b70 = std::make_shared<testsupport::ScriptedBackend>("70B");
  BackendRegistry reg{{"3B", b3}, {"8B", b8}, {"70B", b70}};
  CascadeConfig config;
  LiveFixture() {
    config.stages = {{"3B", 0.9, 0.5, false, {}}, {"8B", 0.9, 0.5, false, {}}, {"70B", 0.9, 0.5, false, {}}};
  }
  LiveQuery query(const std::string& prompt) { return {"q", prompt, TaskKind::multiple_choice, ABCD, "A"}; }
};

}  // namespace

TEST_CASE("live routing issues one call per reached stage") {
  LiveFixture f;
  f.b3->set("easy", mc_obs("3B", {{"A", 0.95}}));
  auto r = route_live(f.query("easy"), f.config, f.reg, {});
  CHECK(r.upstream_calls == 1);
  CHECK(f.b3->calls() == 1);
  CHECK(f.b8->calls() == 0);
  CHECK(r.decision.answering_model == "3B");
  CHECK(r.trace.observations.size() == 1);
  CHECK(r.decision.correct.value());

  f.b3->set("hard", mc_obs("3B", {{"A", 0.4}}));
  f.b8->set("hard", mc_obs("8B", {{"B", 0.5}}));
  f.b70->set("hard", mc_obs("70B", {{"C", 0.3}}));
  r = route_live(f.query("hard"), f.config, f.reg, {});
  CHECK(r.upstream_calls == 3);
  CHECK(r.decision.answering_model == "70B");
  CHECK(r.decision.answer == "C");
  CHECK_FALSE(r.decision.correct.value());
}

TEST_CASE("backend failure: escalate skips the stage, abort raises") {
  LiveFixture f;
  f.b3->set("q", mc_obs("3B", {{"A", 0.4}}));
  f.b8->fail_with(gateway::BackendErrorKind::timeout);
  f.b70->set("q", mc_obs("70B", {{"A", 0.8}}));
  auto r = route_live(f.query("q"), f.config, f.reg, {}, FailurePolicy::escalate);
  CHECK(r.decision.answering_model == "70B");
  CHECK(r.upstream_calls == 3);
  REQUIRE(r.decision.skipped.size() == 1);
  CHECK(r.decision.skipped[0].model_id == "8B");
  CHECK(r.decision.skipped[0].reason.find("scripted failure") != std::string::npos);
  CHECK(r.trace.skipped_stages == std::vector<std::string>{"8B"});

  try {
    route_live(f.query("q"), f.config, f.reg, {}, FailurePolicy::abort);
    FAIL("expected StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == "8B");
  }

  // the final stage failing always aborts
  f.b70->fail_with(gateway::BackendErrorKind::unreachable);
  CHECK_THROWS_AS(route_live(f.query("q"), f.config, f.reg, {}, FailurePolicy::escalate), StageError);
}

TEST_CASE("live result replays to the same decision") {
  LiveFixture f;
  f.b3->set("q", mc_obs("3B", {{"B", 0.5}}));
  f.b8->set("q", mc_obs("8B", {{"A", 0.92}}));
  auto r = route_live(f.query("q"), f.config, f.reg, {});
  TraceFile t;
  t.header.models = {testsupport::registry_spec("3B"), testsupport::registry_spec("8B"),
                     testsupport::registry_spec("70B")};
  t.records = {r.trace};
  CHECK(route_replay(t, f.config, {})[0] == r.decision);
}
