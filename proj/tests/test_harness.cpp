#include <doctest.h>

#include <cmath>
#include <set>

#include "fixtures.hpp"
#include "pcnn/error.hpp"
#include "pcnn/harness.hpp"

using namespace pcnn;
using pcnn::testing::make_manifest;
using pcnn::testing::random_store;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.classes = 6;
  s.genera = 2;
  s.train_per_class = 12;
  s.test_per_class = 5;
  s.depth = 16;
  s.tokens = 2;
  s.separation = 3.0;
  return s;
}

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d);
}

}  // namespace

TEST_CASE("synthetic generator: noiseless pooled vectors sit on the centroids") {
  auto spec = small_spec();
  spec.token_noise = 0.0;
  const auto data = synth_gen(spec);
  CHECK(data.store.size(Split::Train) == 72);
  CHECK(data.store.size(Split::Test) == 30);
  for (const auto& r : data.store.records(Split::Test)) {
    const auto p = pooled(r);
    const auto& c = data.centroids[static_cast<std::size_t>(r.label)];
    for (std::size_t d = 0; d < p.size(); ++d) CHECK(std::abs(p[d] - c[d]) < 1e-5);
  }
}

TEST_CASE("synthetic generator: class geometry and determinism") {
  const auto spec = small_spec();
  const auto a = synth_gen(spec);
  const auto b = synth_gen(spec);
  CHECK(a.store.export_payload() == b.store.export_payload());
  auto other = spec;
  other.seed = spec.seed + 1;
  CHECK_FALSE(synth_gen(other).store.export_payload() == a.store.export_payload());

  const std::size_t per_genus = spec.classes / spec.genera;
  for (std::size_t i = 0; i < spec.classes; ++i) {
    for (std::size_t j = i + 1; j < spec.classes; ++j) {
      const double d = distance(a.centroids[i], a.centroids[j]);
      CHECK(d >= spec.separation - 1e-9);
      if (i / per_genus == j / per_genus) {
        CHECK(d == doctest::Approx(spec.separation));
      } else {
        CHECK(d == doctest::Approx(std::hypot(spec.genus_separation, spec.separation)));
      }
    }
  }
}

TEST_CASE("synthetic spec validation") {
  auto s = small_spec();
  s.depth = 7;
  try {
    s.validate();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("infeasible") != std::string::npos);
  }
  s = small_spec();
  s.genera = 4;
  CHECK_THROWS_AS(s.validate(), Error);
  s = small_spec();
  s.classes = 12;
  s.genera = 3;
  CHECK_THROWS_AS(s.validate(12), Error);  // needs Q + 1 records per class
  CHECK_NOTHROW(s.validate(11));
  CHECK_THROWS_AS(small_spec().validate(7), Error);
  const auto back = SyntheticSpec::from_json(small_spec().to_json());
  CHECK(back.to_json() == small_spec().to_json());
}

TEST_CASE("experiment config JSON roundtrip and validation") {
  ExperimentConfig c;
  c.synthetic = small_spec();
  c.comparator.depth = 16;
  c.comparator.tokens = 2;
  c.comparator.jitter = 0.5;
  c.sampler.q = 3;
  c.train.epochs = 3;
  c.rerank.k = 5;
  c.rerank.mode = RerankMode::Hard;
  c.seeds = {1, 2, 3};
  CHECK_NOTHROW(c.validate());
  const auto back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  auto bad = c;
  bad.comparator.depth = 8;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.seeds.clear();
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.synthetic.reset();
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK(matrix_path_for("a/b/probs.json") == std::filesystem::path("a/b/probs.f32"));
}

TEST_CASE("a tiny class aborts the run at the sampling stage") {
  ExperimentConfig c;
  c.synthetic = SyntheticSpec{};
  c.sampler.q = 3;
  auto store = random_store(make_manifest(4, {6, 2, 6, 6}, {2, 2, 2, 2}, 4, 64), 1);
  SyntheticClassifier clf(std::vector<std::vector<double>>(4, std::vector<double>(64, 0.0)), 1.0);
  ExperimentData data{store, clf.predict_all(store, Split::Train),
                      clf.predict_all(store, Split::Test)};
  try {
    run(c, data);
    FAIL("expected an error");
  } catch (const Error& e) {
    const std::string m = e.what();
    CHECK(m.find("stage 'sampling'") != std::string::npos);
    CHECK(m.find("class 1") != std::string::npos);
  }
}

TEST_CASE("mean and population std") {
  const auto m = mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(m.mean == 2.5);
  CHECK(m.std == doctest::Approx(std::sqrt(1.25)));
  CHECK(mean_std({7.0}).std == 0.0);
}

TEST_CASE("end-to-end run on a small synthetic set writes its artifacts") {
  ExperimentConfig c;
  c.synthetic = small_spec();
  c.comparator.depth = 16;
  c.comparator.tokens = 2;
  c.comparator.heads = 2;
  c.comparator.mlp_width = 32;
  c.sampler.q = 3;
  c.train.epochs = 2;
  c.rerank.k = 5;
  c.seeds = {3};
  c.output_dir = pcnn::testing::temp_dir("harness-run");
  const auto data = load_experiment_data(c);
  const auto result = run(c, data);
  REQUIRE(result.seeds.size() == 1);
  CHECK(result.ranked.size() == 30);
  for (const char* f : {"results.json", "seed-3/comparator.json", "seed-3/comparator.f32",
                        "seed-3/train_report.json", "seed-3/ranked.jsonl"}) {
    CHECK(std::filesystem::exists(c.output_dir / f));
  }
  const auto j = read_json(c.output_dir / "results.json");
  CHECK(j["format"] == "pcnn.results.v1");
  CHECK(j["summary"]["accuracy_c_times_s"]["mean"].get<double>() ==
        result.seeds[0].rerank.accuracy_c_times_s);

  // explanations: K entries per panel, scores copied bit-for-bit
  const auto ranked = load_ranked_jsonl(c.output_dir / "seed-3/ranked.jsonl");
  const auto panels = export_explanations(ranked, data.store);
  REQUIRE(panels["panels"].size() == 30);
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const auto& p = panels["panels"][i];
    REQUIRE(p["classes"].size() == 5);
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(p["classes"][k]["c_prob"].get<double>() == ranked[i].classes[k].c_prob);
      CHECK(p["classes"][k]["final"].get<double>() == ranked[i].classes[k].final_score);
    }
  }

  auto dangling = ranked;
  dangling[0].classes[0].neighbors[0] = 999999;
  CHECK_THROWS_AS(export_explanations(dangling, data.store), Error);
  dangling = ranked;
  dangling[0].query = 424242;
  CHECK_THROWS_AS(export_explanations(dangling, data.store), Error);
  dangling = ranked;
  dangling[0].classes[1].label = 77;
  CHECK_THROWS_AS(export_explanations(dangling, data.store), Error);
}
