#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "smar/data.hpp"
#include "smar/error.hpp"
#include "smar/losses.hpp"
#include "smar/model.hpp"

namespace smar {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kMetricsSchemaVersion = 1;

struct TrainConfig {
  // Model.
  Index layers = 4;
  Index experts = 8;
  Index top_k = 2;
  Index hidden = 64;
  Index ffn_hidden = 128;
  Index classes = 8;
  // Objective.
  double d_min = 1.5;
  double d_max = 2.0;
  double alpha = 0.0;
  double beta = 0.01;
  // Optimization.
  double learning_rate = 0.05;
  double momentum = 0.9;
  Index steps = 1500;
  Index batch_size = 128;
  std::uint64_t seed = 1;
  Index smar_start_step = 0;
  bool modality_bias_enabled = true;
  bool load_balance_enabled = false;
  Index log_every = 50;
  Index eval_batches = 16;
  // Synthetic data.
  double vision_fraction = 0.8;
  Index dim_vision = 16;
  Index dim_text = 16;
  Index clusters_per_modality = 8;
  double cluster_spread = 0.5;
  double modality_gap = 2.0;

  void validate() const;
  ModelDims model_dims() const;
  SynthConfig synth_config() const;

  /// Canonical `key = value` text; parse(to_text()) round-trips exactly.
  std::string to_text() const;
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::string& path);
  /// Applies one `key=value` override.
  void set(const std::string& key, const std::string& value);
};

/// Routing summary of one layer on one batch.
struct LayerRouting {
  Index layer = 0;
  std::optional<double> d_sym_kl;
  double smar = 0.0;
  std::vector<double> shares_vision;  // selections / (K * N_v)
  std::vector<double> shares_text;
  std::vector<Index> selections_vision;
  std::vector<Index> selections_text;
  Index tokens_vision = 0;
  Index tokens_text = 0;
};

struct StepMetrics {
  Index step = 0;
  double main = 0.0;
  double balance = 0.0;
  double smar = 0.0;
  double total = 0.0;
  double accuracy = 0.0;
  std::vector<LayerRouting> layers;
};

/// Summarizes the routing of every layer in `fwd`. `band` fills per-layer
/// SMAR values when given.
std::vector<LayerRouting> summarize_routing(const ForwardResult& fwd,
                                            const std::vector<Modality>& modality,
                                            const std::optional<SmarBand>& band);

double accuracy(const Matrix& logits, const std::vector<int>& labels);

std::string metrics_to_json(const StepMetrics& m, const char* kind = "train");
StepMetrics metrics_from_json(const std::string& line);

class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, std::optional<StepMetrics> last)
      : Error(what), last_(std::move(last)) {}
  const std::optional<StepMetrics>& last_metrics() const { return last_; }

 private:
  std::optional<StepMetrics> last_;
};

struct TrainResult {
  MoeModel model;
  std::vector<StepMetrics> log;
};

/// SGD with momentum over the model's parameter list.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<NamedParameter> params, double lr, double momentum);
  void zero_grad();
  void step();

 private:
  std::vector<NamedParameter> params_;
  std::vector<Matrix> velocity_;
  double lr_;
  double momentum_;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

TrainResult train(const TrainConfig& cfg, const MetricsSink& sink = {});

/// Evaluation batches use step ids disjoint from training steps.
inline constexpr std::uint64_t kEvalStepBase = 1ull << 40;

struct EvalReport {
  /// batches[b][l] is layer l on evaluation batch b.
  std::vector<std::vector<LayerRouting>> batches;
  double accuracy = 0.0;

  bool empty() const { return batches.empty(); }
  /// d values per layer across batches, skipping undefined ones.
  std::vector<std::vector<double>> d_by_layer() const;
  std::vector<double> mean_d_by_layer() const;
};

EvalReport evaluate(const MoeModel& model, const TrainConfig& cfg, Index n_batches);

}  // namespace smar
