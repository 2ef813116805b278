#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace cascade {

// Dense layer, row-major: weights[o * in + i].
struct DenseLayer {
  int in = 0;
  int out = 0;
  std::vector<double> weights;
  std::vector<double> bias;

  bool operator==(const DenseLayer&) const = default;
};

// P(IK) probe: affine -> relu per hidden layer, affine -> sigmoid output.
struct PikModel {
  std::vector<DenseLayer> layers;
  std::string trained_on;
  std::string source_model_id;

  int input_dim() const { return layers.empty() ? 0 : layers.front().in; }
  std::vector<int> layer_sizes() const;
  std::int64_t parameter_count() const;
  void validate() const;

  bool operator==(const PikModel&) const = default;
};

struct PikTrainConfig {
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;
  std::uint64_t seed = 0;
  int hidden_width = 256;
  int epochs = 50;
  int batch_size = 64;
  double learning_rate = 1e-3;
  int early_stop_patience = 5;

  void validate() const;
};

struct PikEvalReport {
  double accuracy = 0.0;
  double f1 = 0.0;
  // Absent when the evaluated split holds a single class.
  std::optional<double> auroc;
};

struct PikSample {
  std::vector<float> hidden_state;
  bool label = false;  // true: the model answered correctly ("knows")
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

/// floor(train_frac * n) / floor(val_frac * n) / remainder.
SplitSizes split_sizes(std::size_t n, const PikTrainConfig& config);

struct PikTrainResult {
  PikModel model;
  PikEvalReport test_report;
  int best_epoch = 0;     // 1-based epoch whose weights were kept
  int epochs_run = 0;
};

/// Trains the probe. Deterministic for a given seed: one shuffle, fixed split,
/// mini-batch Adam on binary cross-entropy, checkpoint with the best validation
/// F1 kept, early stop after `early_stop_patience` epochs without improvement.
PikTrainResult pik_train(const std::vector<PikSample>& samples, const PikTrainConfig& config,
                         const std::string& trained_on = {}, const std::string& source_model_id = {});

double pik_infer(const PikModel& model, std::span<const float> hidden_state);
double pik_infer(const PikModel& model, std::span<const double> hidden_state);

/// Accuracy and F1 at `threshold` (score >= threshold predicts "knows") and the
/// rank-statistic AUROC with ties counted as one half.
PikEvalReport pik_metrics(std::span<const double> scores, const std::vector<bool>& labels, double threshold);

/// AUROC alone; throws if either class is missing.
double auroc(std::span<const double> scores, const std::vector<bool>& labels);

nlohmann::json to_json(const PikModel& model);
PikModel pik_model_from_json(const nlohmann::json& j);
PikModel load_pik_model(const std::filesystem::path& path);
void save_pik_model(const PikModel& model, const std::filesystem::path& path);

nlohmann::json to_json(const PikEvalReport& report);

}  // namespace cascade
