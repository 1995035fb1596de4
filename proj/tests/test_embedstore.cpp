#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <set>

#include "fixtures.hpp"
#include "pcnn/error.hpp"

using namespace pcnn;
using pcnn::testing::make_manifest;
using pcnn::testing::random_store;

namespace {

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Usage;
}

}  // namespace

TEST_CASE("CUB-shaped manifest is accepted") {
  std::vector<std::size_t> train(200, 0), test(200, 0);
  for (std::size_t i = 0; i < 5994; ++i) train[i % 200]++;
  for (std::size_t i = 0; i < 5794; ++i) test[i % 200]++;
  auto store = random_store(make_manifest(200, train, test, 1, 2), 2);
  auto again = EmbeddingStore::import(store.manifest(), store.export_payload());
  CHECK(again.size(Split::Train) == 5994);
  CHECK(again.size(Split::Test) == 5794);
}

TEST_CASE("payload one record short fails at that record's offset") {
  auto store = random_store(make_manifest(3, 4, 2, 3, 5), 3);
  auto payload = store.export_payload();
  const std::size_t rec = 3 * 5 * 4;
  payload.resize(payload.size() - rec);
  try {
    EmbeddingStore::import(store.manifest(), payload);
    FAIL("expected truncation");
  } catch (const IngestionError& e) {
    CHECK(e.kind() == ErrorKind::Ingestion);
    CHECK(e.offset() == (store.manifest().records.size() - 1) * rec);
  }
  // a partial record: the offset is the start of the incomplete record
  payload.resize(payload.size() - 7);
  try {
    EmbeddingStore::import(store.manifest(), payload);
    FAIL("expected truncation");
  } catch (const IngestionError& e) {
    CHECK(e.offset() == (store.manifest().records.size() - 2) * rec);
  }
}

TEST_CASE("ingestion errors") {
  auto store = random_store(make_manifest(3, 4, 2, 2, 3), 4);
  const auto good = store.export_payload();

  auto bad_checksum = store.manifest();
  bad_checksum.checksum = "crc32:00000000";
  CHECK(kind_of([&] { EmbeddingStore::import(bad_checksum, good); }) == ErrorKind::Ingestion);

  auto bad_class = store.manifest();
  bad_class.records[5].label = 9;
  try {
    EmbeddingStore::import(bad_class, good);
    FAIL("expected unknown class");
  } catch (const IngestionError& e) {
    CHECK(e.offset() == 5 * 2 * 3 * 4);
  }

  auto trailing = good;
  trailing.push_back(std::byte{0});
  CHECK(kind_of([&] { EmbeddingStore::import(store.manifest(), trailing); }) ==
        ErrorKind::Ingestion);

  auto nan = good;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + 8, &q, 4);
  auto m = store.manifest();
  m.checksum = crc32_hex(nan);
  try {
    EmbeddingStore::import(m, nan);
    FAIL("expected non-finite");
  } catch (const IngestionError& e) {
    CHECK(e.offset() == 8);
  }

  auto dup = store.manifest();
  dup.records[1].id = dup.records[0].id;
  CHECK(kind_of([&] { EmbeddingStore::import(dup, good); }) == ErrorKind::Ingestion);
}

TEST_CASE("import then export is bitwise identical, also through files") {
  auto store = random_store(make_manifest(4, 3, 2, 2, 6), 5);
  const auto payload = store.export_payload();
  auto again = EmbeddingStore::import(store.manifest(), payload);
  CHECK(again.export_payload() == payload);
  CHECK(again.manifest() == store.manifest());

  const auto dir = pcnn::testing::temp_dir("embedstore");
  store.save(dir / "m.json", dir / "p.f32");
  auto loaded = EmbeddingStore::load(dir / "m.json", dir / "p.f32");
  CHECK(loaded.export_payload() == payload);
  CHECK(loaded.manifest() == store.manifest());
}

TEST_CASE("pooled is the token mean") {
  auto m = make_manifest(1, 1, 0, 2, 3);
  auto store = EmbeddingStore::from_grids(m, {0, 0, 0, 2, 2, 2});
  auto p = pooled(store.records(Split::Train)[0]);
  CHECK(p == std::vector<double>{1, 1, 1});

  // brute-force column mean on random grids, and token-order invariance
  auto rs = random_store(make_manifest(2, 5, 0, 7, 4), 6);
  for (const auto& r : rs.records(Split::Train)) {
    const auto got = pooled(r);
    for (std::size_t d = 0; d < 4; ++d) {
      double s = 0.0;
      for (std::size_t t = 7; t-- > 0;) s += r.at(t, d);  // reverse order
      CHECK(std::abs(got[d] - s / 7.0) < 1e-12);
    }
  }
}

TEST_CASE("by_class ordering, coverage and errors") {
  auto m = make_manifest(3, {3, 0, 2}, {1, 1, 1}, 1, 2);
  std::reverse(m.records.begin(), m.records.end());
  auto store = random_store(m, 7);
  auto c0 = store.by_class(Split::Train, 0);
  REQUIRE(c0.size() == 3);
  CHECK(std::is_sorted(c0.begin(), c0.end(),
                       [](auto* a, auto* b) { return a->id < b->id; }));
  CHECK(kind_of([&] { store.by_class(Split::Train, 1); }) == ErrorKind::EmptyClass);
  CHECK(kind_of([&] { store.by_class(Split::Train, 7); }) == ErrorKind::Validation);

  std::set<RecordId> ids;
  std::size_t total = 0;
  for (ClassId c = 0; c < 3; ++c) {
    for (auto* r : store.by_class(Split::Test, c)) {
      ids.insert(r->id);
      ++total;
    }
  }
  CHECK(total == store.size(Split::Test));
  CHECK(ids.size() == total);
}
