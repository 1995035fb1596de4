#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcnn/autodiff.hpp"
#include "pcnn/embedstore.hpp"
#include "pcnn/pairsampler.hpp"

namespace pcnn {

/// Shape of the comparator S. `blocks` is L (outer repeats), `self_layers` N
/// MHSA layers per branch and `cross_layers` M fusions per block. With L = 0
/// the model reduces to the 4-layer MLP on pooled token embeddings.
struct ComparatorConfig {
  std::size_t blocks = 1;
  std::size_t cross_layers = 1;
  std::size_t self_layers = 1;
  std::size_t heads = 4;
  std::size_t depth = 64;
  std::size_t tokens = 4;
  std::size_t mlp_width = 512;
  std::size_t mlp_hidden = 32;
  /// Std-dev of Gaussian noise added to token grids per training batch.
  double jitter = 0.0;
  /// Start the last MLP layer at zero so the initial score is exactly 0.5.
  bool zero_head = true;

  void validate() const;
  nlohmann::json to_json() const;
  static ComparatorConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ComparatorConfig&, const ComparatorConfig&) = default;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 256;
  double momentum = 0.9;
  double max_lr = 0.01;
  std::uint64_t seed = 42;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// One-cycle learning rate: cosine rise from max_lr/25 to max_lr over the
/// first 30% of steps, then cosine decay to max_lr/1e4.
class OneCycleSchedule {
 public:
  static constexpr double kWarmupFraction = 0.3;
  static constexpr double kDivFactor = 25.0;
  static constexpr double kFinalDivFactor = 1e4;

  OneCycleSchedule(double max_lr, std::size_t total_steps);
  double lr(std::size_t step) const;

 private:
  double max_lr_;
  std::size_t total_steps_;
  double warmup_end_;
};

/// A named learnable tensor.
struct Parameter {
  std::string name;
  nk::Tensor value;
};

class ComparatorModel {
 public:
  static ComparatorModel init(const ComparatorConfig& config, std::uint64_t seed);

  const ComparatorConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<nk::BatchNormStats>& batchnorm_stats() { return bn_; }
  const std::vector<nk::BatchNormStats>& batchnorm_stats() const { return bn_; }
  const nk::Tensor& parameter(const std::string& name) const;
  nk::Tensor& parameter(const std::string& name);

  std::size_t parameter_count() const;
  /// Closed-form count for a config; must match parameter_count().
  static std::size_t parameter_count(const ComparatorConfig& config);

  /// Builds the forward graph for a batch. grids are [B, T, D]. Returns the
  /// logits [B]. If `param_vars` is given the parameters are recorded as
  /// trainable leaves in parameters() order; otherwise as constants. Train
  /// mode updates the batch-norm running statistics.
  nk::Var logits(nk::Tape& tape, const nk::Tensor& grids1, const nk::Tensor& grids2,
                 nk::Mode mode, std::vector<nk::Var>* param_vars = nullptr);

  /// Eval-mode sigmoid score for one pair of T x D grids.
  double forward_pair(std::span<const float> grid1, std::span<const float> grid2) const;
  /// Eval-mode scores for many pairs, batched.
  std::vector<double> score(std::span<const std::span<const float>> first,
                            std::span<const std::span<const float>> second) const;

  /// Rounds every parameter and running statistic to float32 precision, the
  /// precision checkpoints are stored in.
  void quantize_to_f32();

  /// Binary blob of float32 values plus a JSON header holding config, layout,
  /// checksum and caller metadata.
  void save(const std::filesystem::path& header, const std::filesystem::path& blob,
            const nlohmann::json& metadata = {}) const;
  static ComparatorModel load(const std::filesystem::path& header,
                              const std::filesystem::path& blob,
                              nlohmann::json* metadata = nullptr);

 private:
  nk::Var build(nk::Tape& tape, const nk::Tensor& grids1, const nk::Tensor& grids2,
                nk::Mode mode, std::vector<nk::BatchNormStats>& stats,
                std::vector<nk::Var>* param_vars) const;

  ComparatorConfig config_;
  std::vector<Parameter> params_;
  std::vector<nk::BatchNormStats> bn_;
};

/// Packs grids into a [B, T, D] tensor.
nk::Tensor stack_grids(std::span<const std::span<const float>> grids, std::size_t tokens,
                       std::size_t depth);

struct BinaryMetrics {
  std::size_t true_positive = 0;
  std::size_t false_positive = 0;
  std::size_t true_negative = 0;
  std::size_t false_negative = 0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  /// Mean confidence per outcome: score for accepts, 1 - score for rejects.
  /// Zero when the category is empty.
  double correctly_accept = 0.0;
  double incorrectly_accept = 0.0;
  double correctly_reject = 0.0;
  double incorrectly_reject = 0.0;

  nlohmann::json to_json() const;
};

/// Positive prediction iff score > threshold.
BinaryMetrics evaluate_binary(std::span<const double> scores,
                              const std::vector<bool>& labels, double threshold = 0.5);

/// Scores every pair of `pairs` with the model (eval mode).
std::vector<double> score_pairs(const ComparatorModel& model, const PairSet& pairs,
                                const EmbeddingStore& store);

BinaryMetrics evaluate_binary(const ComparatorModel& model, const PairSet& pairs,
                              const EmbeddingStore& store, double threshold = 0.5);

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;
  double train_accuracy = 0.0;
  BinaryMetrics eval;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  std::size_t selected_epoch = 0;  // 1-based

  nlohmann::json to_json() const;
};

/// Index (0-based) of the maximal F1, earliest on ties.
std::size_t select_checkpoint(std::span<const double> f1_per_epoch);

struct TrainResult {
  ComparatorModel model;
  TrainReport report;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Momentum SGD on mean BCE with the one-cycle schedule; evaluates every epoch
/// and returns the checkpoint with the best eval F1. A trailing batch of one
/// pair is skipped (batch norm needs two rows).
TrainResult train(ComparatorModel model, const PairSet& train_pairs,
                  const PairSet& eval_pairs, const EmbeddingStore& store,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace pcnn
