#include "pcnn/nnindex.hpp"

#include <algorithm>
#include <cmath>

#include "pcnn/error.hpp"
#include "pcnn/rng.hpp"

namespace pcnn {

namespace {

bool closer(const Neighbor& a, const Neighbor& b) {
  if (a.distance != b.distance) return a.distance < b.distance;
  return a.id < b.id;
}

bool excluded(std::span<const RecordId> exclude, RecordId id) {
  return std::find(exclude.begin(), exclude.end(), id) != exclude.end();
}

std::vector<Neighbor> take_smallest(std::vector<Neighbor> all, std::size_t k) {
  if (k < all.size()) {
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k),
                      all.end(), closer);
    all.resize(k);
  } else {
    std::sort(all.begin(), all.end(), closer);
  }
  return all;
}

}  // namespace

double squared_l2(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

ClassIndex::ClassIndex(const EmbeddingStore& store, Split split)
    : split_(split), depth_(store.depth()), classes_(store.num_classes()) {
  std::vector<const EmbeddingRecord*> sorted;
  for (const auto& r : store.records(split)) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto* a, const auto* b) { return a->id < b->id; });
  for (const EmbeddingRecord* r : sorted) {
    ClassBlock& block = classes_[static_cast<std::size_t>(r->label)];
    block.ids.push_back(r->id);
    const auto p = pooled(*r);
    block.vectors.insert(block.vectors.end(), p.begin(), p.end());
    block.active.push_back(true);
  }
}

void ClassIndex::check_class(ClassId label) const {
  if (label < 0 || static_cast<std::size_t>(label) >= classes_.size()) {
    throw Error(ErrorKind::Validation, "class " + std::to_string(label) +
                                           " is not in the index");
  }
}

std::size_t ClassIndex::active_count(ClassId label) const {
  check_class(label);
  const auto& a = classes_[static_cast<std::size_t>(label)].active;
  return static_cast<std::size_t>(std::count(a.begin(), a.end(), true));
}

std::size_t ClassIndex::active_total() const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < classes_.size(); ++c) {
    n += active_count(static_cast<ClassId>(c));
  }
  return n;
}

std::vector<RecordId> ClassIndex::active_ids(ClassId label) const {
  check_class(label);
  const ClassBlock& block = classes_[static_cast<std::size_t>(label)];
  std::vector<RecordId> out;
  for (std::size_t i = 0; i < block.ids.size(); ++i) {
    if (block.active[i]) out.push_back(block.ids[i]);
  }
  return out;
}

void ClassIndex::scan(const ClassBlock& block, ClassId label,
                      std::span<const double> query,
                      std::span<const RecordId> exclude,
                      std::vector<Neighbor>& out) const {
  for (std::size_t i = 0; i < block.ids.size(); ++i) {
    if (!block.active[i] || excluded(exclude, block.ids[i])) continue;
    std::span<const double> v(block.vectors.data() + i * depth_, depth_);
    out.push_back(Neighbor{block.ids[i], label, squared_l2(query, v)});
  }
}

std::vector<Neighbor> ClassIndex::nearest_k_in_class(
    std::span<const double> query, ClassId label, std::size_t count,
    std::span<const RecordId> exclude) const {
  check_class(label);
  if (query.size() != depth_) {
    throw Error(ErrorKind::Dimension, "query has depth " + std::to_string(query.size()) +
                                          ", index has " + std::to_string(depth_));
  }
  std::vector<Neighbor> all;
  scan(classes_[static_cast<std::size_t>(label)], label, query, exclude, all);
  if (all.size() < count) {
    throw Error(ErrorKind::InsufficientCandidates,
                "class " + std::to_string(label) + " has " + std::to_string(all.size()) +
                    " candidate records, need " + std::to_string(count));
  }
  return take_smallest(std::move(all), count);
}

Neighbor ClassIndex::nearest_in_class(std::span<const double> query, ClassId label,
                                      std::size_t rank,
                                      std::span<const RecordId> exclude) const {
  if (rank == 0) throw Error(ErrorKind::Usage, "neighbor rank is 1-based");
  return nearest_k_in_class(query, label, rank, exclude).back();
}

std::vector<Neighbor> ClassIndex::topk_global(std::span<const double> query,
                                              std::size_t k,
                                              std::span<const RecordId> exclude) const {
  if (query.size() != depth_) {
    throw Error(ErrorKind::Dimension, "query has depth " + std::to_string(query.size()) +
                                          ", index has " + std::to_string(depth_));
  }
  std::vector<Neighbor> all;
  for (std::size_t c = 0; c < classes_.size(); ++c) {
    scan(classes_[c], static_cast<ClassId>(c), query, exclude, all);
  }
  if (all.size() < k) {
    throw Error(ErrorKind::InsufficientCandidates,
                "k = " + std::to_string(k) + " exceeds the " +
                    std::to_string(all.size()) + " candidate records");
  }
  return take_smallest(std::move(all), k);
}

ClassIndex ClassIndex::subsample(double fraction, std::uint64_t seed) const {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw Error(ErrorKind::Configuration, "subsample fraction must be in (0, 1]");
  }
  ClassIndex out = *this;
  for (std::size_t c = 0; c < out.classes_.size(); ++c) {
    ClassBlock& block = out.classes_[c];
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < block.ids.size(); ++i) {
      if (block.active[i]) live.push_back(i);
    }
    // ceil with a small guard so 0.33 * 30 = 9.900000000000002 stays 10
    const auto keep = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(live.size()) - 1e-9));
    Rng rng = Rng::stream(seed, c);
    const auto chosen = rng.choose(live.size(), keep);
    std::fill(block.active.begin(), block.active.end(), false);
    for (std::size_t j : chosen) block.active[live[j]] = true;
  }
  return out;
}

}  // namespace pcnn
