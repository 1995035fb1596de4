#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <unordered_map>
#include <vector>

#include "pcnn/embedstore.hpp"

namespace pcnn {

/// C(x): one probability per class for one query record.
struct ClassifierOutput {
  RecordId query = 0;
  std::vector<double> probs;
};

struct ClassScore {
  ClassId label = 0;
  double prob = 0.0;

  friend bool operator==(const ClassScore&, const ClassScore&) = default;
};

/// Classes in descending probability, ties by ascending class id.
using TopQPrediction = std::vector<ClassScore>;

TopQPrediction top_q(const ClassifierOutput& output, std::size_t q);

/// Validated table of classifier outputs for one split, keyed by record id.
class ProbabilityTable {
 public:
  ProbabilityTable(Split split, std::size_t num_classes,
                   std::vector<ClassifierOutput> rows, double tolerance = 1e-6);

  Split split() const { return split_; }
  std::size_t num_classes() const { return num_classes_; }
  std::size_t size() const { return rows_.size(); }
  const std::vector<ClassifierOutput>& rows() const { return rows_; }
  const ClassifierOutput& at(RecordId id) const;
  bool contains(RecordId id) const { return index_.contains(id); }

  /// Binary f32 matrix (rows in table order) plus a JSON sidecar carrying the
  /// split, shape, record ids and checksum.
  void save(const std::filesystem::path& sidecar,
            const std::filesystem::path& matrix) const;
  /// Rows must sum to 1 within 1e-4 with no negative entry; when `store` is
  /// given the row count must equal the split size.
  static ProbabilityTable load(const std::filesystem::path& sidecar,
                               const std::filesystem::path& matrix,
                               const EmbeddingStore* store = nullptr);

 private:
  Split split_;
  std::size_t num_classes_;
  std::vector<ClassifierOutput> rows_;
  std::unordered_map<RecordId, std::size_t> index_;
};

/// Fraction of `table` rows whose true class (from `store`) is in the top-q.
double topq_accuracy(const ProbabilityTable& table, const EmbeddingStore& store,
                     std::size_t q);

struct CorruptionConfig {
  double rate = 0.0;
  /// The top-1 logit is swapped with a uniformly chosen class ranked
  /// 2..depth.
  std::size_t depth = 10;
  std::uint64_t seed = 0;
};

/// Stand-in for a frozen classifier: softmax over -||pooled - centroid||^2 / tau,
/// optionally corrupted by a seeded top-1 logit swap.
class SyntheticClassifier {
 public:
  SyntheticClassifier(std::vector<std::vector<double>> centroids, double temperature,
                      CorruptionConfig corruption = {});

  ClassifierOutput predict(const EmbeddingRecord& record) const;
  ProbabilityTable predict_all(const EmbeddingStore& store, Split split) const;

  std::size_t num_classes() const { return centroids_.size(); }
  const std::vector<std::vector<double>>& centroids() const { return centroids_; }

 private:
  std::vector<std::vector<double>> centroids_;
  double temperature_;
  CorruptionConfig corruption_;
};

}  // namespace pcnn
