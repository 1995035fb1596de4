#include <doctest.h>

#include <algorithm>
#include <set>

#include "fixtures.hpp"
#include "pcnn/error.hpp"
#include "pcnn/nnindex.hpp"

using namespace pcnn;
using pcnn::testing::make_manifest;
using pcnn::testing::random_store;

namespace {

// Exhaustive oracle: every train record of `label` (or all, if label < 0),
// sorted by (distance, id).
std::vector<Neighbor> scan(const EmbeddingStore& store, std::span<const double> q, ClassId label,
                           std::span<const RecordId> exclude = {}) {
  std::vector<Neighbor> all;
  for (const auto& r : store.records(Split::Train)) {
    if (label >= 0 && r.label != label) continue;
    if (std::find(exclude.begin(), exclude.end(), r.id) != exclude.end()) continue;
    const auto p = pooled(r);
    double d = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) d += (p[i] - q[i]) * (p[i] - q[i]);
    all.push_back({r.id, r.label, d});
  }
  std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  });
  return all;
}

std::vector<double> random_query(Rng& rng, std::size_t d) {
  std::vector<double> q(d);
  for (double& v : q) v = rng.normal();
  return q;
}

}  // namespace

TEST_CASE("identity and exclusion") {
  auto store = random_store(make_manifest(3, 6, 1, 2, 4), 1);
  ClassIndex index(store, Split::Train);
  const auto& r = store.records(Split::Train)[4];
  const auto q = pooled(r);
  auto nn = index.nearest_in_class(q, r.label, 1);
  CHECK(nn.id == r.id);
  CHECK(nn.distance == 0.0);
  const RecordId self[] = {r.id};
  auto second = index.nearest_in_class(q, r.label, 1, self);
  CHECK(second.id != r.id);
  CHECK(second.id == index.nearest_in_class(q, r.label, 2).id);
  for (const auto& n : index.nearest_k_in_class(q, r.label, 5, self)) CHECK(n.id != r.id);
}

TEST_CASE("nearest_in_class agrees with an exhaustive scan on 1000 queries") {
  auto store = random_store(make_manifest(5, 20, 0, 3, 6), 2, 0.5);
  ClassIndex index(store, Split::Train);
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const auto q = random_query(rng, 6);
    const ClassId c = static_cast<ClassId>(rng.below(5));
    const std::size_t rank = 1 + rng.below(4);
    const auto oracle = scan(store, q, c);
    const auto got = index.nearest_in_class(q, c, rank);
    CHECK(got.id == oracle[rank - 1].id);
    CHECK(got.distance == doctest::Approx(oracle[rank - 1].distance).epsilon(1e-12));
  }
}

TEST_CASE("ties break by ascending id") {
  auto m = make_manifest(1, 3, 0, 1, 2);
  auto store = EmbeddingStore::from_grids(m, {1, 0, -1, 0, 0, 1});
  ClassIndex index(store, Split::Train);
  const std::vector<double> origin{0, 0};
  auto all = index.nearest_k_in_class(origin, 0, 3);
  CHECK(all[0].id == 0);
  CHECK(all[1].id == 1);
  CHECK(all[2].id == 2);
}

TEST_CASE("insufficient candidates and bad rank") {
  auto store = random_store(make_manifest(2, 3, 0, 1, 2), 4);
  ClassIndex index(store, Split::Train);
  const std::vector<double> q{0, 0};
  try {
    index.nearest_in_class(q, 1, 4);
    FAIL("expected shortfall");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InsufficientCandidates);
  }
  CHECK_THROWS_AS(index.nearest_in_class(q, 1, 0), Error);
  CHECK_THROWS_AS(index.topk_global(q, 7), Error);
}

TEST_CASE("topk_global: exhaustive, prefix and class cross-check") {
  auto store = random_store(make_manifest(4, 10, 0, 2, 5), 5, 0.7);
  ClassIndex index(store, Split::Train);
  Rng rng(6);
  for (int i = 0; i < 50; ++i) {
    const auto q = random_query(rng, 5);
    const auto full = index.topk_global(q, 40);
    const auto oracle = scan(store, q, -1);
    REQUIRE(full.size() == 40);
    for (std::size_t j = 0; j < 40; ++j) CHECK(full[j].id == oracle[j].id);
    const auto k7 = index.topk_global(q, 7);
    const auto k8 = index.topk_global(q, 8);
    for (std::size_t j = 0; j < 7; ++j) CHECK(k7[j].id == k8[j].id);
    // k = 1 equals the best per-class nearest neighbor over all classes
    Neighbor best{-1, 0, 1e300};
    for (ClassId c = 0; c < 4; ++c) {
      auto n = index.nearest_in_class(q, c, 1);
      if (n.distance < best.distance || (n.distance == best.distance && n.id < best.id)) {
        best = n;
      }
    }
    CHECK(index.topk_global(q, 1)[0].id == best.id);
  }
}

TEST_CASE("subsample keeps ceil(f * n) per class deterministically") {
  auto store = random_store(make_manifest(6, 30, 0, 1, 3), 7);
  ClassIndex index(store, Split::Train);
  auto a = index.subsample(0.33, 42);
  auto b = index.subsample(0.33, 42);
  for (ClassId c = 0; c < 6; ++c) {
    CHECK(a.active_count(c) == 10);
    CHECK(a.active_ids(c) == b.active_ids(c));
  }
  auto full = index.subsample(1.0, 1);
  for (ClassId c = 0; c < 6; ++c) CHECK(full.active_ids(c) == index.active_ids(c));
  CHECK(index.subsample(0.5, 1).active_count(0) == 15);
  CHECK_THROWS_AS(index.subsample(0.0, 1), Error);
  CHECK_THROWS_AS(index.subsample(1.5, 1), Error);

  // retrieval respects the mask
  const std::vector<double> q{0, 0, 0};
  const auto kept = a.active_ids(2);
  const std::set<RecordId> kept_set(kept.begin(), kept.end());
  for (const auto& n : a.nearest_k_in_class(q, 2, 10)) CHECK(kept_set.count(n.id) == 1);
  CHECK_THROWS_AS(a.nearest_k_in_class(q, 2, 11), Error);
}
