#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcnn/classifier.hpp"
#include "pcnn/comparator.hpp"
#include "pcnn/embedstore.hpp"
#include "pcnn/pairsampler.hpp"
#include "pcnn/reranker.hpp"

namespace pcnn {

/// Generator for the synthetic benchmark. Classes are grouped into genera:
/// species of one genus sit `separation` apart, genera sit further apart by
/// `genus_separation`. The classifier confuses a query's top-1 with one of
/// the next `corruption_depth - 1` classes at `corruption_rate`.
struct SyntheticSpec {
  std::string name = "desk-cub";
  std::size_t classes = 20;
  std::size_t genera = 5;
  std::size_t train_per_class = 30;
  std::size_t test_per_class = 30;
  std::size_t depth = 64;
  std::size_t tokens = 4;
  double separation = 3.0;
  double genus_separation = 12.0;
  double token_noise = 1.0;
  double temperature = 40.0;
  double corruption_rate = 0.35;
  std::size_t corruption_depth = 4;
  std::uint64_t seed = 7;

  /// `q` is the largest sampler Q the data must support.
  void validate(std::size_t q = 1) const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

struct SyntheticData {
  EmbeddingStore store;
  std::vector<std::vector<double>> centroids;
};

SyntheticData synth_gen(const SyntheticSpec& spec);

/// Corrupted centroid classifier described by a SyntheticSpec.
SyntheticClassifier synthetic_classifier(const SyntheticSpec& spec,
                                         const std::vector<std::vector<double>>& centroids);

nlohmann::json sampler_to_json(const SamplerConfig& config);
SamplerConfig sampler_from_json(const nlohmann::json& j);

struct DatasetPaths {
  std::filesystem::path manifest;
  std::filesystem::path payload;
  std::filesystem::path train_probs;  // sidecar; matrix path is stored next to it
  std::filesystem::path test_probs;
};

struct ExperimentConfig {
  std::optional<SyntheticSpec> synthetic;
  std::optional<DatasetPaths> files;
  SamplerConfig sampler;
  ComparatorConfig comparator;
  TrainConfig train;
  RerankConfig rerank;
  std::vector<std::uint64_t> seeds{42};
  std::filesystem::path output_dir;

  void validate() const;
  nlohmann::json to_json() const;
  /// Relative paths are resolved against `base`.
  static ExperimentConfig from_json(const nlohmann::json& j,
                                    const std::filesystem::path& base = {});
  static ExperimentConfig load(const std::filesystem::path& path);
};

struct ExperimentData {
  EmbeddingStore store;
  ProbabilityTable train_probs;
  ProbabilityTable test_probs;
};

/// Builds (synthetic) or loads (files) the store and both probability tables.
ExperimentData load_experiment_data(const ExperimentConfig& config);

/// Matrix file that accompanies a probability sidecar: x.json -> x.f32.
std::filesystem::path matrix_path_for(const std::filesystem::path& sidecar);

struct SeedResult {
  std::uint64_t seed = 0;
  std::size_t train_pairs = 0;
  std::size_t eval_pairs = 0;
  std::size_t selected_epoch = 0;
  BinaryMetrics binary;
  RerankReport rerank;

  nlohmann::json to_json() const;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

MeanStd mean_std(const std::vector<double>& values);

struct RunResult {
  std::vector<SeedResult> seeds;
  std::vector<RankedResult> ranked;  // last seed
  ComparatorModel model;             // last seed

  nlohmann::json to_json(const ExperimentConfig& config) const;
};

using ProgressFn = std::function<void(const std::string&)>;

/// For each seed: sample -> train -> binary eval -> re-rank. The seed drives
/// model init, training order and the sampler; the dataset is fixed. When
/// `output_dir` is set, writes results.json, and per seed a checkpoint and the
/// RankedResult stream. Stage failures are rethrown naming the stage.
RunResult run(const ExperimentConfig& config, const ExperimentData& data,
              const ProgressFn& progress = {});

/// Machine-readable PCNN panels; throws Validation on any id unknown to
/// `store` or class id out of range.
nlohmann::json export_explanations(const std::vector<RankedResult>& results,
                                   const EmbeddingStore& store);

std::vector<RankedResult> load_ranked_jsonl(const std::filesystem::path& path);
void save_ranked_jsonl(const std::vector<RankedResult>& results,
                       const std::filesystem::path& path);

}  // namespace pcnn
