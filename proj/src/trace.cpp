#include "cascade/trace.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <fmt/format.h>

using nlohmann::json;

namespace cascade {

namespace {

std::string located(const std::string& what, std::size_t line, const std::string& field) {
  std::string out;
  if (line > 0) out += fmt::format("line {}: ", line);
  if (!field.empty()) out += fmt::format("field '{}': ", field);
  return out + what;
}

const json& require(const json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) throw TraceError("missing required field", 0, field);
  return *it;
}

std::string get_string(const json& j, const char* field) {
  const json& v = require(j, field);
  if (!v.is_string()) throw TraceError("expected a string", 0, field);
  return v.get<std::string>();
}

std::int64_t as_integer(const json& v, const char* field) {
  if (!v.is_number_integer()) throw TraceError("expected an integer", 0, field);
  return v.get<std::int64_t>();
}

double as_number(const json& v, const char* field) {
  if (!v.is_number()) throw TraceError("expected a number", 0, field);
  return v.get<double>();
}

bool has(const json& j, const char* field) {
  auto it = j.find(field);
  return it != j.end() && !it->is_null();
}

}  // namespace

TraceError::TraceError(const std::string& what, std::size_t line, std::string field)
    : std::runtime_error(located(what, line, field)), line_(line), field_(std::move(field)) {}

std::string to_string(ModelKind kind) {
  return kind == ModelKind::open_weights ? "open_weights" : "api_only";
}

std::string to_string(TaskKind kind) {
  return kind == TaskKind::multiple_choice ? "multiple_choice" : "open_ended";
}

std::string to_string(Factuality f) {
  switch (f) {
    case Factuality::correct: return "correct";
    case Factuality::incorrect: return "incorrect";
    case Factuality::abstain: return "abstain";
  }
  return "";
}

ModelKind parse_model_kind(const std::string& s) {
  if (s == "open_weights") return ModelKind::open_weights;
  if (s == "api_only") return ModelKind::api_only;
  throw TraceError("unknown model kind '" + s + "'", 0, "kind");
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "multiple_choice") return TaskKind::multiple_choice;
  if (s == "open_ended") return TaskKind::open_ended;
  throw TraceError("unknown task kind '" + s + "'", 0, "task_kind");
}

Factuality parse_factuality(const std::string& s) {
  if (s == "correct") return Factuality::correct;
  if (s == "incorrect") return Factuality::incorrect;
  if (s == "abstain") return Factuality::abstain;
  throw TraceError("unknown factuality label '" + s + "'", 0, "factuality");
}

void ModelSpec::validate() const {
  if (model_id.empty()) throw TraceError("model_id is empty", 0, "model_id");
  if (param_count) {
    if (*param_count <= 0) throw TraceError("must be positive for " + model_id, 0, "param_count");
  } else if (kind == ModelKind::open_weights) {
    throw TraceError("required for open_weights model " + model_id, 0, "param_count");
  }
  if (!(price_in >= 0.0) || !std::isfinite(price_in)) throw TraceError("must be >= 0", 0, "price_in");
  if (!(price_out >= 0.0) || !std::isfinite(price_out)) throw TraceError("must be >= 0", 0, "price_out");
  if (n_layer && *n_layer <= 0) throw TraceError("must be positive", 0, "n_layer");
  if (d_model && *d_model <= 0) throw TraceError("must be positive", 0, "d_model");
}

void ChoiceDistribution::validate() const {
  std::set<std::string_view> seen;
  double sum = 0.0;
  for (const auto& e : entries) {
    if (!std::isfinite(e.prob) || e.prob < 0.0 || e.prob > 1.0) {
      throw TraceError(fmt::format("probability {} for token '{}' outside [0,1]", e.prob, e.token), 0,
                       "choice_dist");
    }
    if (!seen.insert(e.token).second) {
      throw TraceError("duplicate token '" + e.token + "'", 0, "choice_dist");
    }
    sum += e.prob;
  }
  if (sum > 1.0 + kProbSumTolerance) {
    throw TraceError(fmt::format("probabilities sum to {:.17g} > 1", sum), 0, "choice_dist");
  }
}

double ChoiceDistribution::total_mass() const {
  double sum = 0.0;
  for (const auto& e : entries) sum += e.prob;
  return sum;
}

const ModelObservation* QueryTrace::find(const std::string& model_id) const {
  auto it = observations.find(model_id);
  return it == observations.end() ? nullptr : &it->second;
}

const ModelSpec* TraceHeader::find_model(const std::string& model_id) const {
  for (const auto& m : models) {
    if (m.model_id == model_id) return &m;
  }
  return nullptr;
}

void TraceHeader::validate() const {
  if (format_version != kTraceFormatVersion) {
    throw TraceError("unsupported format_version '" + format_version + "'", 0, "format_version");
  }
  std::set<std::string> ids;
  for (const auto& m : models) {
    m.validate();
    if (!ids.insert(m.model_id).second) throw TraceError("duplicate model " + m.model_id, 0, "models");
  }
  for (const auto& [id, dim] : hidden_dims) {
    if (!ids.count(id)) throw TraceError("unknown model_id '" + id + "'", 0, "hidden_dims");
    if (dim <= 0) throw TraceError("dimension must be positive for " + id, 0, "hidden_dims");
  }
  for (const auto& [id, layer] : hidden_layers) {
    if (!ids.count(id)) throw TraceError("unknown model_id '" + id + "'", 0, "hidden_layers");
    if (layer <= 0) throw TraceError("layer must be positive for " + id, 0, "hidden_layers");
  }
}

void validate_record(const QueryTrace& r, const TraceHeader& header, std::size_t line) {
  auto fail = [&](const std::string& what, const std::string& field) {
    throw TraceError(what, line, field);
  };
  if (r.query_id.empty()) fail("query_id is empty", "query_id");
  if (r.task_kind == TaskKind::multiple_choice && r.choice_labels.empty()) {
    fail("multiple_choice record requires choice_labels", "choice_labels");
  }
  if (r.observations.empty()) fail("no observations", "observations");
  for (const auto& id : r.skipped_stages) {
    if (!header.find_model(id)) fail("unknown model_id '" + id + "'", "skipped_stages");
  }
  for (const auto& [key, obs] : r.observations) {
    if (key != obs.model_id) fail("key '" + key + "' disagrees with model_id '" + obs.model_id + "'", "model_id");
    if (!header.find_model(key)) fail("unknown model_id '" + key + "'", "model_id");
    try {
      obs.choice_dist.validate();
    } catch (const TraceError& e) {
      fail(e.what(), "choice_dist");
    }
    if (obs.first_token_dist) {
      try {
        obs.first_token_dist->validate();
      } catch (const TraceError& e) {
        fail(e.what(), "first_token_dist");
      }
    }
    if (obs.hidden_state) {
      auto dim = header.hidden_dims.find(key);
      if (dim == header.hidden_dims.end()) fail("no hidden_dims entry for model '" + key + "'", "hidden_state");
      if (obs.hidden_state->size() != static_cast<std::size_t>(dim->second)) {
        fail(fmt::format("length {} does not match declared {} for model '{}'", obs.hidden_state->size(),
                         dim->second, key),
             "hidden_state");
      }
      for (float v : *obs.hidden_state) {
        if (!std::isfinite(v)) fail("non-finite value", "hidden_state");
      }
    }
    if (obs.tokens_in < 0) fail("must be >= 0", "tokens_in");
    if (obs.tokens_out < 0) fail("must be >= 0", "tokens_out");
    if (!obs.answer_text.empty() && !obs.tokens_unknown && obs.tokens_in + obs.tokens_out == 0) {
      fail("non-empty answer with zero token counts", "tokens_out");
    }
    if (obs.latency_ms && (!std::isfinite(*obs.latency_ms) || *obs.latency_ms < 0.0)) {
      fail("must be >= 0", "latency_ms");
    }
  }
}

void validate_trace(const TraceFile& trace) {
  trace.header.validate();
  std::size_t line = 1;
  for (const auto& r : trace.records) validate_record(r, trace.header, ++line);
}

json to_json(const ModelSpec& s) {
  json j;
  j["model_id"] = s.model_id;
  if (s.param_count) j["param_count"] = *s.param_count;
  if (s.n_layer) j["n_layer"] = *s.n_layer;
  if (s.d_model) j["d_model"] = *s.d_model;
  j["price_in"] = s.price_in;
  j["price_out"] = s.price_out;
  j["kind"] = to_string(s.kind);
  return j;
}

ModelSpec model_spec_from_json(const json& j) {
  if (!j.is_object()) throw TraceError("model spec must be an object", 0, "models");
  ModelSpec s;
  s.model_id = get_string(j, "model_id");
  if (has(j, "param_count")) {
    // Parameter counts are often written as 3e9; accept integral floats.
    const json& v = j["param_count"];
    if (v.is_number_integer()) {
      s.param_count = v.get<std::int64_t>();
    } else if (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>()) {
      s.param_count = static_cast<std::int64_t>(v.get<double>());
    } else {
      throw TraceError("expected an integer", 0, "param_count");
    }
  }
  if (has(j, "n_layer")) s.n_layer = static_cast<int>(as_integer(j["n_layer"], "n_layer"));
  if (has(j, "d_model")) s.d_model = static_cast<int>(as_integer(j["d_model"], "d_model"));
  if (has(j, "price_in")) s.price_in = as_number(j["price_in"], "price_in");
  if (has(j, "price_out")) s.price_out = as_number(j["price_out"], "price_out");
  s.kind = has(j, "kind") ? parse_model_kind(get_string(j, "kind")) : ModelKind::open_weights;
  return s;
}

json to_json(const ChoiceDistribution& d) {
  json arr = json::array();
  for (const auto& e : d.entries) arr.push_back({{"token", e.token}, {"prob", e.prob}});
  return arr;
}

ChoiceDistribution choice_dist_from_json(const json& j) {
  if (!j.is_array()) throw TraceError("expected an array of {token, prob}", 0, "choice_dist");
  ChoiceDistribution d;
  d.entries.reserve(j.size());
  for (const auto& e : j) {
    if (!e.is_object()) throw TraceError("entry must be an object", 0, "choice_dist");
    d.entries.push_back({get_string(e, "token"), as_number(require(e, "prob"), "prob")});
  }
  return d;
}

json to_json(const TraceHeader& h) {
  json j;
  j["format_version"] = h.format_version;
  j["dataset_name"] = h.dataset_name;
  j["models"] = json::array();
  for (const auto& m : h.models) j["models"].push_back(to_json(m));
  j["hidden_dims"] = h.hidden_dims;
  if (!h.hidden_layers.empty()) j["hidden_layers"] = h.hidden_layers;
  j["hidden_state_encoding"] = h.hidden_encoding == HiddenEncoding::base64 ? "base64" : "array";
  return j;
}

TraceHeader header_from_json(const json& j) {
  if (!j.is_object()) throw TraceError("header must be a JSON object");
  TraceHeader h;
  h.format_version = get_string(j, "format_version");
  if (h.format_version != kTraceFormatVersion) {
    throw TraceError("unsupported format_version '" + h.format_version + "'", 0, "format_version");
  }
  h.dataset_name = has(j, "dataset_name") ? get_string(j, "dataset_name") : "";
  const json& models = require(j, "models");
  if (!models.is_array()) throw TraceError("expected an array", 0, "models");
  for (const auto& m : models) h.models.push_back(model_spec_from_json(m));
  if (has(j, "hidden_dims")) {
    if (!j["hidden_dims"].is_object()) throw TraceError("expected an object", 0, "hidden_dims");
    for (const auto& [k, v] : j["hidden_dims"].items()) h.hidden_dims[k] = static_cast<int>(as_integer(v, "hidden_dims"));
  }
  if (has(j, "hidden_layers")) {
    if (!j["hidden_layers"].is_object()) throw TraceError("expected an object", 0, "hidden_layers");
    for (const auto& [k, v] : j["hidden_layers"].items()) {
      h.hidden_layers[k] = static_cast<int>(as_integer(v, "hidden_layers"));
    }
  }
  if (has(j, "hidden_state_encoding")) {
    std::string enc = get_string(j, "hidden_state_encoding");
    if (enc == "base64") {
      h.hidden_encoding = HiddenEncoding::base64;
    } else if (enc != "array") {
      throw TraceError("unknown encoding '" + enc + "'", 0, "hidden_state_encoding");
    }
  }
  return h;
}

std::string encode_hidden_base64(const std::vector<float>& values) {
  std::string raw(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) raw[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  std::string out(4 * ((raw.size() + 2) / 3) + 1, '\0');
  int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(raw.data()), static_cast<int>(raw.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<float> decode_hidden_base64(const std::string& text) {
  if (text.size() % 4 != 0) throw TraceError("base64 length is not a multiple of 4", 0, "hidden_state");
  std::string raw(text.size() / 4 * 3 + 1, '\0');
  int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(raw.data()),
                          reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw TraceError("invalid base64", 0, "hidden_state");
  // EVP_DecodeBlock keeps the zero bytes that padding stands for.
  std::size_t len = static_cast<std::size_t>(n);
  if (!text.empty() && text.back() == '=') --len;
  if (text.size() >= 2 && text[text.size() - 2] == '=') --len;
  if (len % 4 != 0) throw TraceError("decoded byte count is not a multiple of 4", 0, "hidden_state");
  std::vector<float> values(len / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i * 4 + b])) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
  return values;
}

json to_json(const QueryTrace& r, HiddenEncoding encoding) {
  json j;
  j["query_id"] = r.query_id;
  j["prompt"] = r.prompt;
  if (r.gold_answer) j["gold_answer"] = *r.gold_answer;
  j["task_kind"] = to_string(r.task_kind);
  if (!r.choice_labels.empty()) j["choice_labels"] = r.choice_labels;
  if (!r.skipped_stages.empty()) j["skipped_stages"] = r.skipped_stages;
  json obs = json::object();
  for (const auto& [id, o] : r.observations) {
    json oj;
    oj["model_id"] = o.model_id;
    oj["answer_text"] = o.answer_text;
    oj["choice_dist"] = to_json(o.choice_dist);
    if (o.first_token_dist) oj["first_token_dist"] = to_json(*o.first_token_dist);
    if (o.hidden_state) {
      if (encoding == HiddenEncoding::base64) {
        oj["hidden_state"] = encode_hidden_base64(*o.hidden_state);
      } else {
        oj["hidden_state"] = *o.hidden_state;
      }
    }
    if (o.correct) oj["correct"] = *o.correct;
    if (o.factuality) oj["factuality"] = to_string(*o.factuality);
    oj["tokens_in"] = o.tokens_in;
    oj["tokens_out"] = o.tokens_out;
    if (o.tokens_unknown) oj["tokens_unknown"] = true;
    if (o.latency_ms) oj["latency_ms"] = *o.latency_ms;
    obs[id] = std::move(oj);
  }
  j["observations"] = std::move(obs);
  return j;
}

QueryTrace record_from_json(const json& j) {
  if (!j.is_object()) throw TraceError("record must be a JSON object");
  QueryTrace r;
  r.query_id = get_string(j, "query_id");
  r.prompt = get_string(j, "prompt");
  if (has(j, "gold_answer")) r.gold_answer = get_string(j, "gold_answer");
  r.task_kind = parse_task_kind(get_string(j, "task_kind"));
  if (has(j, "choice_labels")) {
    const json& labels = j["choice_labels"];
    if (!labels.is_array()) throw TraceError("expected an array", 0, "choice_labels");
    for (const auto& l : labels) {
      if (!l.is_string()) throw TraceError("expected strings", 0, "choice_labels");
      r.choice_labels.push_back(l.get<std::string>());
    }
  }
  if (has(j, "skipped_stages")) {
    const json& s = j["skipped_stages"];
    if (!s.is_array()) throw TraceError("expected an array", 0, "skipped_stages");
    for (const auto& id : s) {
      if (!id.is_string()) throw TraceError("expected strings", 0, "skipped_stages");
      r.skipped_stages.push_back(id.get<std::string>());
    }
  }
  const json& obs = require(j, "observations");
  if (!obs.is_object()) throw TraceError("expected an object keyed by model_id", 0, "observations");
  for (const auto& [key, oj] : obs.items()) {
    if (!oj.is_object()) throw TraceError("observation must be an object", 0, "observations");
    ModelObservation o;
    o.model_id = get_string(oj, "model_id");
    o.answer_text = has(oj, "answer_text") ? get_string(oj, "answer_text") : "";
    try {
      o.choice_dist = choice_dist_from_json(require(oj, "choice_dist"));
    } catch (const TraceError& e) {
      throw TraceError(e.what(), 0, "choice_dist");
    }
    if (has(oj, "first_token_dist")) {
      try {
        o.first_token_dist = choice_dist_from_json(oj["first_token_dist"]);
      } catch (const TraceError& e) {
        throw TraceError(e.what(), 0, "first_token_dist");
      }
    }
    if (has(oj, "hidden_state")) {
      const json& hs = oj["hidden_state"];
      if (hs.is_string()) {
        o.hidden_state = decode_hidden_base64(hs.get<std::string>());
      } else if (hs.is_array()) {
        std::vector<float> values;
        values.reserve(hs.size());
        for (const auto& v : hs) values.push_back(static_cast<float>(as_number(v, "hidden_state")));
        o.hidden_state = std::move(values);
      } else {
        throw TraceError("expected a number array or base64 string", 0, "hidden_state");
      }
    }
    if (has(oj, "correct")) {
      if (!oj["correct"].is_boolean()) throw TraceError("expected a boolean", 0, "correct");
      o.correct = oj["correct"].get<bool>();
    }
    if (has(oj, "factuality")) o.factuality = parse_factuality(get_string(oj, "factuality"));
    o.tokens_in = as_integer(require(oj, "tokens_in"), "tokens_in");
    o.tokens_out = as_integer(require(oj, "tokens_out"), "tokens_out");
    if (has(oj, "tokens_unknown")) {
      if (!oj["tokens_unknown"].is_boolean()) throw TraceError("expected a boolean", 0, "tokens_unknown");
      o.tokens_unknown = oj["tokens_unknown"].get<bool>();
    }
    if (has(oj, "latency_ms")) o.latency_ms = as_number(oj["latency_ms"], "latency_ms");
    r.observations.emplace(key, std::move(o));
  }
  return r;
}

TraceFile read_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TraceError("cannot open trace file " + path.string());
  TraceFile trace;
  std::string text;
  std::size_t line = 0;
  bool have_header = false;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw TraceError(std::string("malformed JSON: ") + e.what(), line);
    }
    try {
      if (!have_header) {
        trace.header = header_from_json(j);
        trace.header.validate();
        have_header = true;
      } else {
        trace.records.push_back(record_from_json(j));
        validate_record(trace.records.back(), trace.header, line);
      }
    } catch (const TraceError& e) {
      if (e.line() != 0) throw;
      // Re-tag with the line; the message already names the field.
      throw TraceError(e.what(), line, e.field());
    }
  }
  if (!have_header) throw TraceError("trace file has no header line: " + path.string());
  return trace;
}

void write_trace(const TraceFile& trace, const std::filesystem::path& path) {
  validate_trace(trace);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw TraceError("cannot open for writing: " + path.string());
  out << to_json(trace.header).dump() << '\n';
  for (const auto& r : trace.records) out << to_json(r, trace.header.hidden_encoding).dump() << '\n';
  out.flush();
  if (!out) throw TraceError("write failed: " + path.string());
}

std::vector<ModelSpec> read_model_registry(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TraceError("cannot open model registry " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw TraceError(std::string("malformed JSON in model registry: ") + e.what());
  }
  const json* list = &j;
  if (j.is_object()) list = &require(j, "models");
  if (!list->is_array()) throw TraceError("expected a list of model specs", 0, "models");
  std::vector<ModelSpec> specs;
  std::set<std::string> ids;
  for (const auto& m : *list) {
    specs.push_back(model_spec_from_json(m));
    specs.back().validate();
    if (!ids.insert(specs.back().model_id).second) {
      throw TraceError("duplicate model " + specs.back().model_id, 0, "models");
    }
  }
  return specs;
}

}  // namespace cascade
