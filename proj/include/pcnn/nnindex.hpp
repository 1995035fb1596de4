#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pcnn/embedstore.hpp"

namespace pcnn {

/// A retrieved record. `distance` is the squared L2 distance between pooled
/// vectors.
struct Neighbor {
  RecordId id = 0;
  ClassId label = 0;
  double distance = 0.0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

double squared_l2(std::span<const double> a, std::span<const double> b);

/// Exact flat index over the pooled vectors of one split, grouped by class.
/// Ties in distance are broken by ascending record id.
class ClassIndex {
 public:
  ClassIndex(const EmbeddingStore& store, Split split);

  std::size_t num_classes() const { return classes_.size(); }
  std::size_t depth() const { return depth_; }
  Split split() const { return split_; }
  /// Records of the class that survive subsampling.
  std::size_t active_count(ClassId label) const;
  std::size_t active_total() const;
  std::vector<RecordId> active_ids(ClassId label) const;

  /// The rank-th nearest (1-based) active record of `label`, skipping ids in
  /// `exclude`.
  Neighbor nearest_in_class(std::span<const double> query, ClassId label,
                            std::size_t rank,
                            std::span<const RecordId> exclude = {}) const;
  /// The `count` nearest active records of `label`, ascending.
  std::vector<Neighbor> nearest_k_in_class(std::span<const double> query,
                                           ClassId label, std::size_t count,
                                           std::span<const RecordId> exclude = {}) const;
  /// Exact global top-k over all active records, ascending.
  std::vector<Neighbor> topk_global(std::span<const double> query, std::size_t k,
                                    std::span<const RecordId> exclude = {}) const;

  /// Per class keep ceil(fraction * size) records chosen uniformly by a
  /// generator seeded with (seed, class).
  ClassIndex subsample(double fraction, std::uint64_t seed) const;

 private:
  struct ClassBlock {
    std::vector<RecordId> ids;     // ascending
    std::vector<double> vectors;   // ids.size() x depth
    std::vector<bool> active;
  };

  void check_class(ClassId label) const;
  void scan(const ClassBlock& block, ClassId label, std::span<const double> query,
            std::span<const RecordId> exclude, std::vector<Neighbor>& out) const;

  Split split_;
  std::size_t depth_ = 0;
  std::vector<ClassBlock> classes_;
};

}  // namespace pcnn
