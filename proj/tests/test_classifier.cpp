#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "pcnn/classifier.hpp"
#include "pcnn/error.hpp"

using namespace pcnn;
using pcnn::testing::make_manifest;
using pcnn::testing::random_store;

namespace {

ClassifierOutput random_output(Rng& rng, RecordId id, std::size_t c, bool with_ties) {
  ClassifierOutput o{id, std::vector<double>(c)};
  double z = 0.0;
  for (double& p : o.probs) {
    p = with_ties ? static_cast<double>(1 + rng.below(4)) : rng.uniform() + 1e-3;
    z += p;
  }
  for (double& p : o.probs) p /= z;
  return o;
}

}  // namespace

TEST_CASE("top_q examples and errors") {
  ClassifierOutput o{0, {0.6, 0.3, 0.1}};
  auto t = top_q(o, 2);
  REQUIRE(t.size() == 2);
  CHECK(t[0].label == 0);
  CHECK(t[1].label == 1);
  auto full = top_q(o, 3);
  CHECK(full[2].label == 2);
  CHECK_THROWS_AS(top_q(o, 0), Error);
  CHECK_THROWS_AS(top_q(o, 4), Error);
}

TEST_CASE("top_q matches a full-sort oracle, ties by ascending id") {
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const std::size_t c = 2 + rng.below(30);
    const auto o = random_output(rng, i, c, i % 2 == 0);
    std::vector<std::size_t> order(c);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return o.probs[a] != o.probs[b] ? o.probs[a] > o.probs[b] : a < b;
    });
    const std::size_t q = 1 + rng.below(c);
    const auto got = top_q(o, q);
    REQUIRE(got.size() == q);
    for (std::size_t j = 0; j < q; ++j) {
      CHECK(got[j].label == static_cast<ClassId>(order[j]));
      CHECK(got[j].prob == o.probs[order[j]]);
    }
    if (q < c) {
      const auto longer = top_q(o, q + 1);
      CHECK(std::equal(got.begin(), got.end(), longer.begin()));
    }
  }
}

TEST_CASE("probability table validation") {
  CHECK_NOTHROW(ProbabilityTable(Split::Test, 2, {{0, {0.5, 0.5}}}));
  CHECK_THROWS_AS(ProbabilityTable(Split::Test, 2, {{0, {1.1, -0.1}}}), Error);
  CHECK_THROWS_AS(ProbabilityTable(Split::Test, 2, {{0, {0.5, 0.6}}}), Error);
  CHECK_THROWS_AS(ProbabilityTable(Split::Test, 2, {{0, {0.5, 0.5}}, {0, {0.5, 0.5}}}), Error);
  CHECK_THROWS_AS(ProbabilityTable(Split::Test, 3, {{0, {0.5, 0.5}}}), Error);
}

TEST_CASE("probability files roundtrip to 1e-7 and reject bad rows") {
  auto store = random_store(make_manifest(4, 2, 3, 1, 2), 2);
  Rng rng(3);
  std::vector<ClassifierOutput> rows;
  for (const auto& r : store.records(Split::Test)) rows.push_back(random_output(rng, r.id, 4, false));
  ProbabilityTable table(Split::Test, 4, rows);
  const auto dir = pcnn::testing::temp_dir("classifier");
  table.save(dir / "p.json", dir / "p.f32");
  auto loaded = ProbabilityTable::load(dir / "p.json", dir / "p.f32", &store);
  REQUIRE(loaded.size() == table.size());
  for (const auto& row : table.rows()) {
    const auto& other = loaded.at(row.query);
    for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(other.probs[k] - row.probs[k]) < 1e-7);
  }

  // a negative entry in the matrix is reported with its row
  auto bytes = read_file(dir / "p.f32");
  auto values = decode_f32(bytes);
  values[5] = -0.25f;
  values[4] += 0.25f;
  write_file(dir / "p.f32", encode_f32(values));
  auto side = read_json(dir / "p.json");
  side["checksum"] = crc32_hex(encode_f32(values));
  write_json(dir / "p.json", side);
  try {
    ProbabilityTable::load(dir / "p.json", dir / "p.f32", &store);
    FAIL("expected validation error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Validation);
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }

  // wrong row count for the split
  ProbabilityTable short_table(Split::Test, 4, {rows[0]});
  short_table.save(dir / "s.json", dir / "s.f32");
  CHECK_THROWS_AS(ProbabilityTable::load(dir / "s.json", dir / "s.f32", &store), Error);
}

TEST_CASE("synthetic classifier: dominance, symmetry, errors") {
  auto m = make_manifest(3, 1, 0, 1, 2);
  auto store = EmbeddingStore::from_grids(m, {0, 0, 10, 10, -10, 10});
  const std::vector<std::vector<double>> far{{0, 0}, {10, 10}, {-10, 10}};
  SyntheticClassifier clf(far, 0.5);
  const auto out = clf.predict(store.records(Split::Train)[0]);
  CHECK(out.probs[0] > 0.99);

  // record at the origin, two centroids at equal distance, one far away
  const std::vector<std::vector<double>> sym{{1, 0}, {0, 1}, {50, 50}};
  const auto s = SyntheticClassifier(sym, 2.0).predict(store.records(Split::Train)[0]);
  CHECK(std::abs(s.probs[0] - s.probs[1]) < 1e-9);
  CHECK(std::abs(std::accumulate(s.probs.begin(), s.probs.end(), 0.0) - 1.0) < 1e-12);

  CHECK_THROWS_AS(SyntheticClassifier(far, 0.0), Error);
  CHECK_THROWS_AS(SyntheticClassifier(far, -1.0), Error);
}

TEST_CASE("corruption 0.5 halves top-1 accuracy within a binomial 99% interval") {
  const std::size_t c = 10, n = 10000;
  std::vector<std::vector<double>> centroids(c, std::vector<double>(c, 0.0));
  for (std::size_t k = 0; k < c; ++k) centroids[k][k] = 3.0;
  auto m = make_manifest(c, 0, n / c, 1, c);
  std::vector<float> values;
  for (const auto& r : m.records) {
    for (std::size_t d = 0; d < c; ++d) {
      values.push_back(static_cast<float>(centroids[static_cast<std::size_t>(r.label)][d]));
    }
  }
  auto store = EmbeddingStore::from_grids(m, values);
  const SyntheticClassifier clean(centroids, 1.0);
  CHECK(topq_accuracy(clean.predict_all(store, Split::Test), store, 1) == 1.0);

  const SyntheticClassifier noisy(centroids, 1.0, CorruptionConfig{0.5, 10, 99});
  const auto table = noisy.predict_all(store, Split::Test);
  const double acc = topq_accuracy(table, store, 1);
  const double half_width = 2.5758 * std::sqrt(0.25 / n);
  CHECK(std::abs(acc - 0.5) < half_width);
  // swap keeps ground truth in the top-Q and leaves a valid distribution
  CHECK(topq_accuracy(table, store, 10) == 1.0);
  // cumulative accuracy is non-decreasing in Q
  double prev = 0.0;
  for (std::size_t q = 1; q <= c; ++q) {
    const double a = topq_accuracy(table, store, q);
    CHECK(a >= prev);
    prev = a;
  }
  // deterministic per seed
  CHECK(noisy.predict_all(store, Split::Test).rows()[17].probs == table.rows()[17].probs);
}
