#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pcnn/classifier.hpp"
#include "pcnn/embedstore.hpp"
#include "pcnn/nnindex.hpp"

namespace pcnn {

enum class NegativeMode { HardTopQ, RandomClass };

std::string to_string(NegativeMode mode);
NegativeMode negative_mode_from_string(const std::string& name);

struct SamplerConfig {
  std::size_t q = 10;
  /// Which in-class neighbor represents a negative class (1 = nearest).
  std::size_t nn_rank = 1;
  NegativeMode negative_mode = NegativeMode::HardTopQ;
  std::uint64_t seed = 42;

  void validate() const;
};

struct PairSample {
  RecordId query = 0;
  RecordId neighbor = 0;
  bool positive = false;
  ClassId source_class = 0;
  /// In-class rank of the neighbor (positives use ranks 1..Q).
  std::size_t rank = 1;

  friend bool operator==(const PairSample&, const PairSample&) = default;
};

/// Pairs whose queries come from `query_split`; neighbors always come from the
/// training split.
struct PairSet {
  Split query_split = Split::Train;
  std::vector<PairSample> pairs;

  std::size_t size() const { return pairs.size(); }
  std::size_t positives() const;
  std::size_t negatives() const { return size() - positives(); }

  void save_jsonl(const std::filesystem::path& path) const;
  static PairSet load_jsonl(const std::filesystem::path& path);
};

/// Positives: the Q nearest same-class training records (the query itself
/// excluded). Negatives: the nn_rank-th nearest record of every
/// non-ground-truth class in the top-Q prediction (hard mode), or of as many
/// uniformly drawn other classes (random mode). Yields 2Q-1 pairs when the
/// ground truth is in the top-Q and 2Q otherwise.
PairSet sample_pairs(Split query_split, const EmbeddingStore& store,
                     const ProbabilityTable& outputs, const ClassIndex& train_index,
                     const SamplerConfig& config);

PairSet sample_train(const EmbeddingStore& store, const ProbabilityTable& outputs,
                     const ClassIndex& train_index, const SamplerConfig& config);

struct EvalSampleStats {
  std::size_t generated = 0;
  std::size_t identical_removed = 0;
  std::size_t balance_removed = 0;
};

/// Test-split construction followed by removal of pairs with bitwise-identical
/// grids and a seeded trim of the majority label to an exact 50/50 split.
PairSet sample_eval(const EmbeddingStore& store, const ProbabilityTable& outputs,
                    const ClassIndex& train_index, const SamplerConfig& config,
                    EvalSampleStats* stats = nullptr);

struct AuditReport {
  std::size_t expected = 0;
  std::size_t actual = 0;
  std::size_t queries_with_truth_in_top_q = 0;
  std::size_t queries_missing_truth = 0;
  std::vector<std::string> violations;

  bool ok() const { return violations.empty() && expected == actual; }
};

/// Checks |pairs| = sum over queries of (2Q-1 if truth in top-Q else 2Q) plus
/// per-pair label/class consistency.
AuditReport pair_count_audit(const PairSet& pairs, const EmbeddingStore& store,
                             const ProbabilityTable& outputs,
                             std::span<const RecordId> queries, std::size_t q);

}  // namespace pcnn
