#include "cascade/pik.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include <fmt/format.h>

using nlohmann::json;

namespace cascade {

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

template <typename T>
double forward(const PikModel& model, std::span<const T> x) {
  if (static_cast<int>(x.size()) != model.input_dim()) {
    throw std::invalid_argument(
        fmt::format("pik_infer: input length {} does not match model input dim {}", x.size(), model.input_dim()));
  }
  std::vector<double> act(x.begin(), x.end());
  for (double v : act) {
    if (!std::isfinite(v)) throw std::invalid_argument("pik_infer: non-finite input");
  }
  std::vector<double> next;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const DenseLayer& layer = model.layers[l];
    next.assign(layer.out, 0.0);
    for (int o = 0; o < layer.out; ++o) {
      const double* w = &layer.weights[static_cast<std::size_t>(o) * layer.in];
      double z = layer.bias[o];
      for (int i = 0; i < layer.in; ++i) z += w[i] * act[i];
      next[o] = (l + 1 < model.layers.size()) ? std::max(z, 0.0) : z;
    }
    act.swap(next);
  }
  return sigmoid(act[0]);
}

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

ConfusionCounts confusion(std::span<const double> scores, const std::vector<bool>& labels, double threshold) {
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool pred = scores[i] >= threshold;
    if (pred && labels[i]) ++c.tp;
    else if (pred) ++c.fp;
    else if (labels[i]) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double f1_of(const ConfusionCounts& c) {
  std::size_t denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

PikEvalReport evaluate(std::span<const double> scores, const std::vector<bool>& labels, double threshold) {
  ConfusionCounts c = confusion(scores, labels, threshold);
  PikEvalReport r;
  r.accuracy = scores.empty() ? 0.0 : static_cast<double>(c.tp + c.tn) / static_cast<double>(scores.size());
  r.f1 = f1_of(c);
  bool has_pos = std::find(labels.begin(), labels.end(), true) != labels.end();
  bool has_neg = std::find(labels.begin(), labels.end(), false) != labels.end();
  if (has_pos && has_neg) r.auroc = auroc(scores, labels);
  return r;
}

// Adam moment buffers for one layer.
struct AdamState {
  std::vector<double> mw, vw, mb, vb;
};

}  // namespace

std::vector<int> PikModel::layer_sizes() const {
  std::vector<int> sizes;
  if (layers.empty()) return sizes;
  sizes.push_back(layers.front().in);
  for (const auto& l : layers) sizes.push_back(l.out);
  return sizes;
}

std::int64_t PikModel::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& l : layers) n += static_cast<std::int64_t>(l.weights.size() + l.bias.size());
  return n;
}

void PikModel::validate() const {
  if (layers.empty()) throw std::invalid_argument("PikModel: no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const DenseLayer& layer = layers[l];
    if (layer.in <= 0 || layer.out <= 0) throw std::invalid_argument("PikModel: non-positive layer size");
    if (layer.weights.size() != static_cast<std::size_t>(layer.in) * layer.out ||
        layer.bias.size() != static_cast<std::size_t>(layer.out)) {
      throw std::invalid_argument(fmt::format("PikModel: layer {} shape mismatch", l));
    }
    if (l > 0 && layers[l - 1].out != layer.in) {
      throw std::invalid_argument(fmt::format("PikModel: layer {} input does not chain from previous output", l));
    }
    for (double w : layer.weights) {
      if (!std::isfinite(w)) throw std::invalid_argument("PikModel: non-finite weight");
    }
    for (double b : layer.bias) {
      if (!std::isfinite(b)) throw std::invalid_argument("PikModel: non-finite bias");
    }
  }
  if (layers.back().out != 1) throw std::invalid_argument("PikModel: output dimension must be 1");
}

void PikTrainConfig::validate() const {
  if (train_frac <= 0 || val_frac <= 0 || test_frac <= 0 ||
      std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
    throw std::invalid_argument("PikTrainConfig: split fractions must be positive and sum to 1");
  }
  if (hidden_width <= 0 || epochs <= 0 || batch_size <= 0 || early_stop_patience <= 0) {
    throw std::invalid_argument("PikTrainConfig: counts must be positive");
  }
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("PikTrainConfig: learning_rate must be positive");
  }
}

SplitSizes split_sizes(std::size_t n, const PikTrainConfig& config) {
  SplitSizes s;
  s.train = static_cast<std::size_t>(std::floor(config.train_frac * static_cast<double>(n) + 1e-9));
  s.val = static_cast<std::size_t>(std::floor(config.val_frac * static_cast<double>(n) + 1e-9));
  s.test = n - s.train - s.val;
  return s;
}

PikTrainResult pik_train(const std::vector<PikSample>& samples, const PikTrainConfig& config,
                         const std::string& trained_on, const std::string& source_model_id) {
  config.validate();
  if (samples.size() < 10) throw std::invalid_argument("pik_train: need at least 10 samples");
  const std::size_t dim = samples.front().hidden_state.size();
  if (dim == 0) throw std::invalid_argument("pik_train: empty hidden state");
  for (const auto& s : samples) {
    if (s.hidden_state.size() != dim) throw std::invalid_argument("pik_train: hidden-state dimension mismatch");
    for (float v : s.hidden_state) {
      if (!std::isfinite(v)) throw std::invalid_argument("pik_train: non-finite input");
    }
  }

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  const SplitSizes sizes = split_sizes(samples.size(), config);
  std::vector<std::size_t> train(order.begin(), order.begin() + sizes.train);
  std::vector<std::size_t> val(order.begin() + sizes.train, order.begin() + sizes.train + sizes.val);
  std::vector<std::size_t> test(order.begin() + sizes.train + sizes.val, order.end());

  std::size_t train_pos = 0;
  for (auto i : train) train_pos += samples[i].label ? 1 : 0;
  if (train_pos == 0 || train_pos == train.size()) {
    throw std::invalid_argument("pik_train: training split contains a single class");
  }

  PikModel model;
  model.trained_on = trained_on;
  model.source_model_id = source_model_id;
  const std::vector<int> sizes_chain = {static_cast<int>(dim), config.hidden_width, 1};
  for (std::size_t l = 0; l + 1 < sizes_chain.size(); ++l) {
    DenseLayer layer;
    layer.in = sizes_chain[l];
    layer.out = sizes_chain[l + 1];
    const bool is_output = l + 2 == sizes_chain.size();
    // He-uniform for relu layers. The sigmoid output starts at zero so the
    // untrained net contributes no random function of the inputs; the hidden
    // layer's random weights already break symmetry.
    const double limit = std::sqrt(6.0 / layer.in);
    std::uniform_real_distribution<double> init(-limit, limit);
    layer.weights.resize(static_cast<std::size_t>(layer.in) * layer.out);
    for (double& w : layer.weights) w = is_output ? 0.0 : init(rng);
    layer.bias.assign(layer.out, 0.0);
    model.layers.push_back(std::move(layer));
  }

  const std::size_t n_layers = model.layers.size();
  std::vector<AdamState> adam(n_layers);
  std::vector<DenseLayer> grads(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& layer = model.layers[l];
    adam[l].mw.assign(layer.weights.size(), 0.0);
    adam[l].vw.assign(layer.weights.size(), 0.0);
    adam[l].mb.assign(layer.bias.size(), 0.0);
    adam[l].vb.assign(layer.bias.size(), 0.0);
    grads[l] = layer;
  }
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t step = 0;

  auto scores_for = [&](const std::vector<std::size_t>& idx) {
    std::vector<double> s;
    s.reserve(idx.size());
    for (auto i : idx) s.push_back(forward<float>(model, samples[i].hidden_state));
    return s;
  };
  auto labels_for = [&](const std::vector<std::size_t>& idx) {
    std::vector<bool> y;
    y.reserve(idx.size());
    for (auto i : idx) y.push_back(samples[i].label);
    return y;
  };
  const std::vector<bool> val_labels = labels_for(val);

  // activations[l] is the input to layer l; activations.back() is the logit.
  std::vector<std::vector<double>> acts(n_layers + 1);
  std::vector<std::vector<double>> deltas(n_layers);

  PikModel best = model;
  double best_f1 = -1.0;
  int best_epoch = 0;
  int stale = 0;
  int epoch = 0;
  for (epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    for (std::size_t start = 0; start < train.size(); start += config.batch_size) {
      const std::size_t end = std::min(train.size(), start + static_cast<std::size_t>(config.batch_size));
      for (auto& g : grads) {
        std::fill(g.weights.begin(), g.weights.end(), 0.0);
        std::fill(g.bias.begin(), g.bias.end(), 0.0);
      }
      for (std::size_t b = start; b < end; ++b) {
        const PikSample& s = samples[train[b]];
        acts[0].assign(s.hidden_state.begin(), s.hidden_state.end());
        for (std::size_t l = 0; l < n_layers; ++l) {
          const DenseLayer& layer = model.layers[l];
          acts[l + 1].assign(layer.out, 0.0);
          for (int o = 0; o < layer.out; ++o) {
            const double* w = &layer.weights[static_cast<std::size_t>(o) * layer.in];
            double z = layer.bias[o];
            for (int i = 0; i < layer.in; ++i) z += w[i] * acts[l][i];
            acts[l + 1][o] = (l + 1 < n_layers) ? std::max(z, 0.0) : z;
          }
        }
        // d(BCE)/d(logit) = sigmoid(logit) - y.
        deltas[n_layers - 1] = {sigmoid(acts[n_layers][0]) - (s.label ? 1.0 : 0.0)};
        for (std::size_t l = n_layers; l-- > 0;) {
          const DenseLayer& layer = model.layers[l];
          DenseLayer& g = grads[l];
          for (int o = 0; o < layer.out; ++o) {
            const double d = deltas[l][o];
            g.bias[o] += d;
            double* gw = &g.weights[static_cast<std::size_t>(o) * layer.in];
            for (int i = 0; i < layer.in; ++i) gw[i] += d * acts[l][i];
          }
          if (l == 0) break;
          deltas[l - 1].assign(layer.in, 0.0);
          for (int o = 0; o < layer.out; ++o) {
            const double* w = &layer.weights[static_cast<std::size_t>(o) * layer.in];
            for (int i = 0; i < layer.in; ++i) deltas[l - 1][i] += w[i] * deltas[l][o];
          }
          for (int i = 0; i < layer.in; ++i) {
            if (acts[l][i] <= 0.0) deltas[l - 1][i] = 0.0;  // relu'
          }
        }
      }
      ++step;
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      const double corr1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double corr2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      auto update = [&](std::vector<double>& param, const std::vector<double>& grad, std::vector<double>& m,
                        std::vector<double>& v) {
        for (std::size_t k = 0; k < param.size(); ++k) {
          const double gk = grad[k] * inv_batch;
          m[k] = beta1 * m[k] + (1 - beta1) * gk;
          v[k] = beta2 * v[k] + (1 - beta2) * gk * gk;
          param[k] -= config.learning_rate * (m[k] / corr1) / (std::sqrt(v[k] / corr2) + eps);
        }
      };
      for (std::size_t l = 0; l < n_layers; ++l) {
        update(model.layers[l].weights, grads[l].weights, adam[l].mw, adam[l].vw);
        update(model.layers[l].bias, grads[l].bias, adam[l].mb, adam[l].vb);
      }
    }

    const std::vector<double> val_scores = scores_for(val);
    const double f1 = f1_of(confusion(val_scores, val_labels, 0.5));
    if (f1 > best_f1) {
      best_f1 = f1;
      best = model;
      best_epoch = epoch;
      stale = 0;
    } else if (++stale >= config.early_stop_patience) {
      break;
    }
  }

  PikTrainResult result;
  result.epochs_run = std::min(epoch, config.epochs);
  result.best_epoch = best_epoch;
  result.model = std::move(best);
  model = result.model;  // scores_for reads `model`
  result.test_report = evaluate(scores_for(test), labels_for(test), 0.5);
  return result;
}

double pik_infer(const PikModel& model, std::span<const float> hidden_state) {
  return forward<float>(model, hidden_state);
}

double pik_infer(const PikModel& model, std::span<const double> hidden_state) {
  return forward<double>(model, hidden_state);
}

double auroc(std::span<const double> scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with mid-ranks; a tied positive/negative pair scores 1/2.
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]]) {
        pos_rank_sum += mid_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auroc: need at least one positive and one negative");
  const double np = static_cast<double>(n_pos);
  const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

PikEvalReport pik_metrics(std::span<const double> scores, const std::vector<bool>& labels, double threshold) {
  if (scores.size() != labels.size()) throw std::invalid_argument("pik_metrics: length mismatch");
  for (double s : scores) {
    if (!std::isfinite(s)) throw std::invalid_argument("pik_metrics: non-finite score");
  }
  PikEvalReport r = evaluate(scores, labels, threshold);
  if (!r.auroc) throw std::invalid_argument("pik_metrics: AUROC needs both classes");
  return r;
}

json to_json(const PikModel& model) {
  json j;
  j["layer_sizes"] = model.layer_sizes();
  j["weights"] = json::array();
  j["biases"] = json::array();
  for (const auto& layer : model.layers) {
    json rows = json::array();
    for (int o = 0; o < layer.out; ++o) {
      auto first = layer.weights.begin() + static_cast<std::ptrdiff_t>(o) * layer.in;
      rows.push_back(std::vector<double>(first, first + layer.in));
    }
    j["weights"].push_back(std::move(rows));
    j["biases"].push_back(layer.bias);
  }
  j["activation"] = "relu";
  j["output"] = "sigmoid";
  j["trained_on"] = model.trained_on;
  j["source_model_id"] = model.source_model_id;
  return j;
}

PikModel pik_model_from_json(const json& j) {
  try {
    if (j.value("activation", "relu") != "relu") throw std::invalid_argument("PikModel: unsupported activation");
    if (j.value("output", "sigmoid") != "sigmoid") throw std::invalid_argument("PikModel: unsupported output");
    const auto sizes = j.at("layer_sizes").get<std::vector<int>>();
    const json& weights = j.at("weights");
    const json& biases = j.at("biases");
    if (sizes.size() < 2 || weights.size() != sizes.size() - 1 || biases.size() != sizes.size() - 1) {
      throw std::invalid_argument("PikModel: layer_sizes/weights/biases disagree");
    }
    PikModel model;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      DenseLayer layer;
      layer.in = sizes[l];
      layer.out = sizes[l + 1];
      const json& rows = weights[l];
      if (!rows.is_array() || rows.size() != static_cast<std::size_t>(layer.out)) {
        throw std::invalid_argument(fmt::format("PikModel: weights[{}] has wrong row count", l));
      }
      for (const auto& row : rows) {
        auto values = row.get<std::vector<double>>();
        if (values.size() != static_cast<std::size_t>(layer.in)) {
          throw std::invalid_argument(fmt::format("PikModel: weights[{}] has wrong column count", l));
        }
        layer.weights.insert(layer.weights.end(), values.begin(), values.end());
      }
      layer.bias = biases[l].get<std::vector<double>>();
      model.layers.push_back(std::move(layer));
    }
    model.trained_on = j.value("trained_on", "");
    model.source_model_id = j.value("source_model_id", "");
    model.validate();
    return model;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("PikModel: malformed JSON: ") + e.what());
  }
}

PikModel load_pik_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open P(IK) model " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("P(IK) model " + path.string() + ": " + e.what());
  }
  return pik_model_from_json(j);
}

void save_pik_model(const PikModel& model, const std::filesystem::path& path) {
  model.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write P(IK) model " + path.string());
  out << to_json(model).dump(1) << '\n';
}

json to_json(const PikEvalReport& r) {
  json j;
  j["accuracy"] = r.accuracy;
  j["f1"] = r.f1;
  j["auroc"] = r.auroc ? json(*r.auroc) : json(nullptr);
  return j;
}

}  // namespace cascade
