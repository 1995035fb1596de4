#include <doctest.h>

#include <algorithm>
#include <set>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pcnn/error.hpp"
#include "pcnn/nnindex.hpp"
#include "pcnn/pairsampler.hpp"

using namespace pcnn;
using pcnn::testing::make_manifest;
using pcnn::testing::random_store;
using pcnn::testing::truthful;

namespace {

ProbabilityTable random_probs(const EmbeddingStore& store, Split split, std::uint64_t seed) {
  std::vector<ClassifierOutput> rows;
  const std::size_t c = store.num_classes();
  for (const auto& r : store.records(split)) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(r.id));
    ClassifierOutput o{r.id, std::vector<double>(c)};
    double z = 0.0;
    for (double& p : o.probs) z += p = rng.uniform() + 1e-3;
    for (double& p : o.probs) p /= z;
    rows.push_back(o);
  }
  return ProbabilityTable(split, c, rows);
}

std::vector<RecordId> ids_of(const EmbeddingStore& store, Split split) {
  std::vector<RecordId> ids;
  for (const auto& r : store.records(split)) ids.push_back(r.id);
  return ids;
}

}  // namespace

TEST_CASE("always-correct classifier at Q=10 gives 19 pairs per query; CUB arithmetic") {
  std::vector<std::size_t> train(200, 0), test(200, 0);
  for (std::size_t i = 0; i < 5994; ++i) train[i % 200]++;
  for (std::size_t i = 0; i < 5794; ++i) test[i % 200]++;
  auto store = random_store(make_manifest(200, train, test, 1, 2), 1);
  const ClassIndex index(store, Split::Train);
  const auto probs = truthful(store, Split::Train, 2);
  SamplerConfig cfg;
  const auto pairs = sample_train(store, probs, index, cfg);
  CHECK(pairs.size() == 113886);
  CHECK(pairs.size() == 5994 * 19);
  CHECK(pairs.positives() == 5994 * 10);
  CHECK(pairs.negatives() == 5994 * 9);
  const auto ids = ids_of(store, Split::Train);
  CHECK(pair_count_audit(pairs, store, probs, ids, 10).ok());
}

TEST_CASE("closed-form pair counts with an arbitrary classifier") {
  auto store = random_store(make_manifest(12, 14, 5, 2, 3), 3, 0.4);
  const ClassIndex index(store, Split::Train);
  for (std::size_t q : {2u, 5u, 10u}) {
    for (auto mode : {NegativeMode::HardTopQ, NegativeMode::RandomClass}) {
      const auto probs = random_probs(store, Split::Train, q);
      SamplerConfig cfg{q, 1, mode, 9};
      const auto pairs = sample_train(store, probs, index, cfg);
      std::size_t expected = 0;
      for (const auto& r : store.records(Split::Train)) {
        const auto top = top_q(probs.at(r.id), q);
        const bool hit = std::any_of(top.begin(), top.end(),
                                     [&](const ClassScore& s) { return s.label == r.label; });
        expected += hit ? 2 * q - 1 : 2 * q;
      }
      CHECK(pairs.size() == expected);
      const auto audit = pair_count_audit(pairs, store, probs, ids_of(store, Split::Train), q);
      CHECK(audit.ok());
      CHECK(audit.violations.empty());
    }
  }
}

TEST_CASE("pair contents: positives, hard negatives, ranks, no self pairs") {
  auto store = random_store(make_manifest(6, 12, 3, 2, 4), 4, 0.5);
  const ClassIndex index(store, Split::Train);
  const auto probs = random_probs(store, Split::Train, 5);
  SamplerConfig cfg{4, 2, NegativeMode::HardTopQ, 1};
  const auto pairs = sample_train(store, probs, index, cfg);
  for (const auto& p : pairs.pairs) {
    CHECK(p.query != p.neighbor);
    const auto& q = store.record(Split::Train, p.query);
    const auto& n = store.record(Split::Train, p.neighbor);
    CHECK(n.label == p.source_class);
    CHECK(p.positive == (q.label == n.label));
    const RecordId self[] = {q.id};
    if (p.positive) {
      CHECK(index.nearest_in_class(pooled(q), q.label, p.rank, self).id == p.neighbor);
    } else {
      CHECK(p.rank == 2);
      CHECK(index.nearest_in_class(pooled(q), p.source_class, 2, self).id == p.neighbor);
      const auto top = top_q(probs.at(q.id), 4);
      CHECK(std::any_of(top.begin(), top.end(),
                        [&](const ClassScore& s) { return s.label == p.source_class; }));
    }
  }
}

TEST_CASE("random-class negatives avoid the true class and are seeded") {
  auto store = random_store(make_manifest(15, 12, 2, 1, 3), 6);
  const ClassIndex index(store, Split::Train);
  const auto probs = truthful(store, Split::Train, 7);
  SamplerConfig cfg{5, 1, NegativeMode::RandomClass, 11};
  const auto a = sample_train(store, probs, index, cfg);
  const auto b = sample_train(store, probs, index, cfg);
  CHECK(a.pairs == b.pairs);
  cfg.seed = 12;
  CHECK_FALSE(sample_train(store, probs, index, cfg).pairs == a.pairs);
  for (const auto& p : a.pairs) {
    if (!p.positive) CHECK(p.source_class != store.record(Split::Train, p.query).label);
  }
}

TEST_CASE("tiny class aborts naming the class") {
  auto store = random_store(make_manifest(3, {8, 3, 8}, {1, 1, 1}, 1, 2), 8);
  const ClassIndex index(store, Split::Train);
  const auto probs = truthful(store, Split::Train, 9);
  SamplerConfig cfg{4, 1, NegativeMode::HardTopQ, 1};
  cfg.q = 3;
  try {
    sample_train(store, probs, index, cfg);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InsufficientCandidates);
    CHECK(std::string(e.what()).find("class 1") != std::string::npos);
  }
  CHECK_THROWS_AS(sample_train(store, probs, index, SamplerConfig{1, 1}), Error);
}

TEST_CASE("eval pairs: identical grids removed, labels balanced, seeded") {
  auto m = make_manifest(5, 11, 4, 1, 3);
  auto base = random_store(m, 10, 1.0);
  // copy one train grid into the first test record
  std::vector<float> values(base.manifest().records.size() * 3);
  std::size_t at = 0;
  for (const auto& meta : base.manifest().records) {
    const auto& r = base.record(meta.split, meta.id);
    std::copy(r.grid.begin(), r.grid.end(), values.begin() + at);
    at += 3;
  }
  const auto& first_test = base.manifest().records[55];
  REQUIRE(first_test.split == Split::Test);
  std::copy(values.begin(), values.begin() + 3, values.begin() + 55 * 3);  // = train record 0
  auto store = EmbeddingStore::from_grids(base.manifest(), values);

  const ClassIndex index(store, Split::Train);
  const auto probs = truthful(store, Split::Test, 11);
  EvalSampleStats stats;
  SamplerConfig cfg{5, 1, NegativeMode::HardTopQ, 3};
  const auto pairs = sample_eval(store, probs, index, cfg, &stats);
  CHECK(stats.generated == 20 * 9);
  CHECK(stats.identical_removed == 1);
  CHECK(pairs.positives() == pairs.negatives());
  CHECK(pairs.size() + stats.identical_removed + stats.balance_removed == stats.generated);
  for (const auto& p : pairs.pairs) {
    CHECK_FALSE((p.query == first_test.id && p.neighbor == 0));
  }
  CHECK(sample_eval(store, probs, index, cfg).pairs == pairs.pairs);
}

TEST_CASE("pairs JSONL roundtrip") {
  auto store = random_store(make_manifest(4, 6, 2, 1, 2), 12);
  const ClassIndex index(store, Split::Train);
  const auto pairs = sample_train(store, random_probs(store, Split::Train, 1), index,
                                  SamplerConfig{3, 1, NegativeMode::HardTopQ, 1});
  const auto dir = pcnn::testing::temp_dir("pairs");
  pairs.save_jsonl(dir / "p.jsonl");
  const auto back = PairSet::load_jsonl(dir / "p.jsonl");
  CHECK(back.query_split == pairs.query_split);
  CHECK(back.pairs == pairs.pairs);
}
