#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcnn/classifier.hpp"
#include "pcnn/comparator.hpp"
#include "pcnn/embedstore.hpp"
#include "pcnn/nnindex.hpp"

namespace pcnn {

/// Anything that scores (query, neighbor) pairs in [0, 1].
class PairScorer {
 public:
  virtual ~PairScorer() = default;
  virtual std::vector<double> score(
      const EmbeddingRecord& query,
      std::span<const EmbeddingRecord* const> neighbors) const = 0;
};

class ComparatorScorer final : public PairScorer {
 public:
  explicit ComparatorScorer(const ComparatorModel& model) : model_(model) {}
  std::vector<double> score(const EmbeddingRecord& query,
                            std::span<const EmbeddingRecord* const> neighbors) const override;

 private:
  const ComparatorModel& model_;
};

/// 1 when the two records share a ground-truth class, else 0.
class OracleScorer final : public PairScorer {
 public:
  std::vector<double> score(const EmbeddingRecord& query,
                            std::span<const EmbeddingRecord* const> neighbors) const override;
};

/// Cosine similarity of pooled vectors.
class CosineScorer final : public PairScorer {
 public:
  std::vector<double> score(const EmbeddingRecord& query,
                            std::span<const EmbeddingRecord* const> neighbors) const override;
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

enum class RerankMode { Hard, Soft };

std::string to_string(RerankMode mode);
RerankMode rerank_mode_from_string(const std::string& name);

struct RerankConfig {
  std::size_t k = 10;
  /// Neighbors averaged per class (ranks 1..n, distinct records).
  std::size_t n_neighbors = 1;
  RerankMode mode = RerankMode::Soft;
  /// Classes with C probability below this floor are not scored. 0 disables.
  double floor = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  static RerankConfig from_json(const nlohmann::json& j);
};

struct ClassDecision {
  ClassId label = 0;
  std::size_t c_rank = 0;  // 1-based position in C's ranking
  double c_prob = 0.0;
  std::optional<double> s_score;  // empty when skipped by the floor
  double final_score = 0.0;       // -inf when skipped
  std::vector<RecordId> neighbors;

  bool skipped() const { return !s_score.has_value(); }
};

struct RankedResult {
  RecordId query = 0;
  Split split = Split::Test;
  ClassId truth = 0;
  RerankMode mode = RerankMode::Soft;
  /// Candidate classes in re-ranked order.
  std::vector<ClassDecision> classes;
  ClassId predicted = 0;
  std::size_t comparator_queries = 0;

  nlohmann::json to_json() const;
  static RankedResult from_json(const nlohmann::json& j);
};

/// Top-K candidates of C with their neighbors and S scores, before combining.
struct Candidates {
  RecordId query = 0;
  Split split = Split::Test;
  ClassId truth = 0;
  std::vector<ClassDecision> classes;  // C order, final_score unset
  std::size_t comparator_queries = 0;
};

Candidates score_candidates(const EmbeddingRecord& query, const ClassifierOutput& output,
                            const ClassIndex& train_index, const EmbeddingStore& store,
                            const PairScorer& scorer, const RerankConfig& config);

/// Soft: final = C probability x S score. Hard: final = S score. Skipped
/// classes get -inf. Ranked by final, then C probability, then class id.
RankedResult combine(const Candidates& candidates, RerankMode mode);

RankedResult rerank(const EmbeddingRecord& query, const ClassifierOutput& output,
                    const ClassIndex& train_index, const EmbeddingStore& store,
                    const PairScorer& scorer, const RerankConfig& config);

struct RerankReport {
  std::size_t queries = 0;
  double accuracy_c = 0.0;
  double accuracy_c_then_s = 0.0;   // hard
  double accuracy_c_times_s = 0.0;  // soft
  double top_k_ceiling = 0.0;
  double mean_comparator_queries = 0.0;

  nlohmann::json to_json() const;
};

/// Re-ranks every query of `split`. If `results` is given it receives one
/// RankedResult per query in `config.mode`.
RerankReport evaluate_rerank(const EmbeddingStore& store, Split split,
                             const ProbabilityTable& outputs, const ClassIndex& train_index,
                             const PairScorer& scorer, const RerankConfig& config,
                             std::vector<RankedResult>* results = nullptr);

struct KnnResult {
  ClassId label = 0;
  std::vector<Neighbor> neighbors;
  std::vector<double> scores;
};

/// k global nearest training records by pooled L2, rescored by `scorer`,
/// majority vote (ties: higher mean score, then lower class id).
KnnResult knn_classify(const EmbeddingRecord& query, const ClassIndex& train_index,
                       const EmbeddingStore& store, const PairScorer& scorer,
                       std::size_t k = 20);

struct SanityReport {
  std::size_t queries = 0;
  double self_rate = 0.0;
  double random_values_rate = 0.0;
  double shuffled_real_rate = 0.0;

  nlohmann::json to_json() const;
};

/// Fractions scored > 0.5 when each query is paired with (a) itself, (b) a
/// grid of uniform random values spanning the store's value range, (c) another
/// real grid from a shuffle within batches of 64.
SanityReport sanity_suite(const ComparatorModel& model, const EmbeddingStore& store,
                          Split split, std::uint64_t seed);

struct CeilingRow {
  std::size_t q = 0;
  double accuracy = 0.0;
};

std::vector<CeilingRow> topq_ceiling(const ProbabilityTable& outputs,
                                     const EmbeddingStore& store, std::size_t q_min,
                                     std::size_t q_max);

}  // namespace pcnn
