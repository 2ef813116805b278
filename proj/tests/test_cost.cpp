#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "cascade/cost_model.hpp"
#include "support/oracle.hpp"
#include "support/synthetic.hpp"

using namespace cascade;

namespace {
const auto REG = testsupport::paper_registry();
}

TEST_CASE("forward pass FLOPs") {
  CHECK(forward_flops_full(1, 1, 1) == 26.0);
  const double n8 = 12.0 * 32 * 4096.0 * 4096.0;
  CHECK(forward_flops_full(32, 0, 4096) == 2 * n8);
  CHECK(forward_flops_full(32, 0, 4096) == doctest::Approx(1.2885e10).epsilon(1e-4));
  CHECK(forward_flops_approx(3'000'000'000) == 6e9);
  CHECK(forward_flops_approx(70'000'000'000) == 1.4e11);
  CHECK_THROWS(forward_flops_full(0, 1, 1));
  CHECK_THROWS(forward_flops_full(1, -1, 1));
  CHECK_THROWS(forward_flops_approx(0));
}

TEST_CASE("the context term is a small correction at 2048 tokens") {
  const double full = forward_flops_full(32, 2048, 4096);
  const double approx = 2.0 * 12.0 * 32 * 4096.0 * 4096.0;
  const double gap = (full - approx) / approx;
  CHECK(gap == doctest::Approx(2048.0 / (12.0 * 4096.0)).epsilon(1e-12));
  CHECK(gap == doctest::Approx(0.0417).epsilon(1e-2));
}

TEST_CASE("architecture and parameter forms agree to 1e-9 relative") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const std::int64_t L = 1 + static_cast<std::int64_t>(rng() % 128);
    const std::int64_t ctx = static_cast<std::int64_t>(rng() % 32769);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng() % 16384);
    const double n = 12.0 * L * static_cast<double>(d) * static_cast<double>(d);
    const double a = forward_flops_full(L, ctx, d);
    const double b = forward_flops_from_params(n, L, ctx);
    CHECK(std::abs(a - b) / a <= 1e-9);
  }
}

TEST_CASE("chain compute cost from the published stage counts") {
  CHECK(chain_cc({{"3B", 487}, {"8B", 198}, {"70B", 745}}, REG) == 110'390'000'000'000);
  CHECK(chain_cc({{"8B", 594}, {"70B", 836}}, REG) == 126'544'000'000'000);
  CHECK(487 + 198 + 745 == 1430);
  CHECK(594 + 836 == 1430);
  CHECK(to_gflops(chain_cc({{"3B", 487}, {"8B", 198}, {"70B", 745}}, REG)) == 110390.0);
  CHECK(chain_cc({}, REG) == 0);
  // against the 70B-everywhere baseline
  const auto base = chain_cc({{"70B", 1430}}, REG);
  CHECK(base == 200'200'000'000'000);
  const double r = reduced_fraction(126'544e9, static_cast<double>(base));
  CHECK(r == doctest::Approx(0.3679).epsilon(1e-3));
  // the printed table figure (36.46%) is within a percentage point
  CHECK(std::abs(r - 0.3646) < 0.01);
}

TEST_CASE("chain compute cost errors") {
  CHECK_THROWS_AS(chain_cc({{"GPT-4o", 1}}, REG), std::domain_error);
  CHECK_THROWS_AS(chain_cc({{"13B", 1}}, REG), std::invalid_argument);
  CHECK_THROWS_AS(chain_cc({{"8B", -1}}, REG), std::invalid_argument);
  CHECK_THROWS_AS(chain_cc({{"70B", std::numeric_limits<std::int64_t>::max() / 4}}, REG), std::overflow_error);
}

TEST_CASE("token pricing") {
  const auto& gpt = testsupport::registry_spec("GPT-4o");
  CHECK(usd_cost(1'000'000, 0, gpt) == doctest::Approx(2.50));
  CHECK(usd_cost(0, 1'000'000, gpt) == doctest::Approx(10.00));
  CHECK(usd_cost(0, 0, gpt) == 0.0);
  CHECK(usd_cost(2'000'000, 1'000'000, testsupport::registry_spec("3B")) == doctest::Approx(0.32));
  CHECK_THROWS(usd_cost(-1, 0, gpt));
}

TEST_CASE("reduction fractions") {
  CHECK(std::abs(reduced_fraction(14505, 36225) * 100 - 59.96) <= 0.005);
  CHECK(std::abs(reduced_fraction(0.357, 0.928) * 100 - 61.53) <= 0.01);
  CHECK(reduced_fraction(5, 5) == 0.0);
  CHECK_THROWS(reduced_fraction(1, 0));
}

TEST_CASE("cost report on a routed trace matches the oracle") {
  testsupport::SyntheticOptions o;
  o.seed = 3;
  o.n_queries = 400;
  TraceFile t = testsupport::make_trace(o);
  CascadeConfig c;
  c.stages = {{"3B", 0.8, 0.5, false, {}}, {"8B", 0.9, 0.5, false, {}}, {"70B", 0.9, 0.5, false, {}}};
  auto d = route_replay(t, c, {});
  auto r = cost_report(d, t, c);
  auto oracle = testsupport::oracle_replay(t, c, {});
  CHECK(r.cc_flops.value() == oracle.cc);
  CHECK(r.cc_baseline_flops.value() == oracle.cc_baseline);
  CHECK(r.reduced_cc.value() == 1.0 - static_cast<double>(oracle.cc) / static_cast<double>(oracle.cc_baseline));
  std::int64_t k = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(r.stage_counts[i].k == oracle.answered[i]);
    k += r.stage_counts[i].k;
  }
  CHECK(k == 400);

  // billing every visit charges the visit counts instead
  auto every = cost_report(d, t, c, {}, {.bill_every_visit = true});
  for (std::size_t i = 0; i < 3; ++i) CHECK(every.stage_counts[i].k == oracle.visited[i]);
  CHECK(every.cc_flops.value() > r.cc_flops.value());

  // tokens: final-stage output against the final model answering everything
  std::int64_t base_out = 0, final_out = 0;
  for (std::size_t i = 0; i < t.records.size(); ++i) {
    base_out += t.records[i].observations.at("70B").tokens_out;
    if (d[i].answering_model == "70B") final_out += t.records[i].observations.at("70B").tokens_out;
  }
  CHECK(r.baseline_tokens_out.value() == base_out);
  CHECK(r.final_stage_tokens_out == final_out);
  CHECK(r.reduced_tokens.value() == doctest::Approx(1.0 - double(final_out) / double(base_out)));
  CHECK(r.usd > 0);
  CHECK(r.reduced_usd.value() < 1.0);
}

TEST_CASE("probe cost is optional and adds 2 * probe parameters per gated visit") {
  testsupport::SyntheticOptions o;
  o.seed = 4;
  o.n_queries = 50;
  o.chain = {"8B", "70B"};
  o.hidden_dim = 4;
  TraceFile t = testsupport::make_trace(o);
  CascadeConfig c;
  c.stages = {{"8B", 0.8, 0.5, true, "p.json"}, {"70B", 0.9, 0.5, false, {}}};
  PikRegistry piks{{"8B", testsupport::random_pik(4, 3, 1)}};
  auto d = route_replay(t, c, piks);
  auto plain = cost_report(d, t, c, piks);
  auto probed = cost_report(d, t, c, piks, {.include_probe_cost = true});
  CHECK(*probed.cc_flops - *plain.cc_flops == 2 * piks.at("8B").parameter_count() * 50);
}

TEST_CASE("api-only final stage: compute cost undefined, token cost defined") {
  testsupport::SyntheticOptions o;
  o.seed = 5;
  o.n_queries = 100;
  o.chain = {"70B", "GPT-4o"};
  TraceFile t = testsupport::make_trace(o);
  CascadeConfig c;
  c.stages = {{"70B", 0.9, 0.5, false, {}}, {"GPT-4o", 0.9, 0.5, false, {}}};
  auto d = route_replay(t, c, {});
  auto r = cost_report(d, t, c);
  CHECK_FALSE(r.cc_flops.has_value());
  CHECK_FALSE(r.reduced_cc.has_value());
  CHECK(r.usd_baseline.has_value());
  CHECK(r.reduced_usd.has_value());
}

TEST_CASE("zero decisions cost nothing") {
  TraceFile t;
  t.header.models = REG;
  CascadeConfig c;
  c.stages = {{"8B", 0.9, 0.5, false, {}}, {"70B", 0.9, 0.5, false, {}}};
  auto r = cost_report({}, t, c);
  CHECK(r.cc_flops.value() == 0);
  CHECK(r.usd == 0.0);
  CHECK_FALSE(r.reduced_cc.has_value());
}
