#include <doctest.h>

#include <chrono>
#include <cmath>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "pcnn/comparator.hpp"
#include "pcnn/error.hpp"
#include "pcnn/nnindex.hpp"

using namespace pcnn;
using pcnn::testing::make_manifest;
using pcnn::testing::random_store;
using pcnn::testing::model_gradcheck;
using pcnn::testing::random_tensor;

namespace {

ComparatorConfig small_config() {
  ComparatorConfig c;
  c.depth = 8;
  c.tokens = 2;
  c.heads = 2;
  c.zero_head = false;
  return c;
}

}  // namespace

TEST_CASE("full comparator gradient matches finite differences") {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1);
  auto model = ComparatorModel::init(small_config(), 3);
  const auto g1 = random_tensor({4, 2, 8}, rng);
  const auto g2 = random_tensor({4, 2, 8}, rng);
  CHECK(model_gradcheck(model, g1, g2, {1, 0, 0, 1}) < 1e-4);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 30.0);
}

TEST_CASE("pooled MLP variant (L=0) gradient") {
  Rng rng(2);
  auto c = small_config();
  c.blocks = 0;
  c.mlp_width = 16;
  c.mlp_hidden = 8;
  auto model = ComparatorModel::init(c, 4);
  CHECK(model_gradcheck(model, random_tensor({3, 2, 8}, rng), random_tensor({3, 2, 8}, rng),
                        {0, 1, 1}) < 1e-4);
}

TEST_CASE("parameter count closed form") {
  for (std::size_t blocks : {0u, 1u, 2u}) {
    for (std::size_t m : {1u, 2u}) {
      ComparatorConfig c;
      c.blocks = blocks;
      c.cross_layers = m;
      c.self_layers = 3 - m;
      c.depth = 16;
      c.tokens = 3;
      CHECK(ComparatorModel::init(c, 1).parameter_count() == ComparatorModel::parameter_count(c));
    }
  }
  // default architecture: D=64, T=4, L=M=N=1, MLP 128-512-32-2-1
  ComparatorConfig d;
  const std::size_t expected = 64 + 5 * 64 + 2 * 4 * (64 * 64 + 64) + (128 * 512 + 512) +
                               2 * 512 + (512 * 32 + 32) + 2 * 32 + (32 * 2 + 2) + (2 + 1);
  CHECK(ComparatorModel::parameter_count(d) == expected);
}

TEST_CASE("configuration errors") {
  ComparatorConfig c;
  c.depth = 10;
  c.heads = 4;
  CHECK_THROWS_AS(ComparatorModel::init(c, 1), Error);
  TrainConfig t;
  t.batch_size = 1;
  CHECK_THROWS_AS(t.validate(), Error);
  t = TrainConfig{};
  t.momentum = 1.0;
  CHECK_THROWS_AS(t.validate(), Error);
}

TEST_CASE("zero head starts at exactly 0.5 and rejects shape mismatch") {
  ComparatorConfig c = small_config();
  c.zero_head = true;
  auto model = ComparatorModel::init(c, 5);
  Rng rng(6);
  const auto g = random_tensor({1, 2, 8}, rng);
  std::vector<float> a(g.data().begin(), g.data().end()), b(16, 0.5f);
  CHECK(model.forward_pair(a, b) == 0.5);
  std::vector<float> wrong(10, 0.0f);
  CHECK_THROWS_AS(model.forward_pair(a, wrong), Error);
}

TEST_CASE("one-cycle schedule shape") {
  const OneCycleSchedule s(0.01, 100);
  CHECK(s.lr(0) == doctest::Approx(0.01 / 25));
  double peak = 0.0;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    if (s.lr(i) > peak) {
      peak = s.lr(i);
      arg = i;
    }
  }
  CHECK(peak == doctest::Approx(0.01));
  CHECK(arg == 29);
  CHECK(s.lr(99) == doctest::Approx(0.01 / 1e4));
  for (std::size_t i = 1; i <= 29; ++i) CHECK(s.lr(i) >= s.lr(i - 1));
  for (std::size_t i = 30; i < 100; ++i) CHECK(s.lr(i) <= s.lr(i - 1));
}

TEST_CASE("binary metrics against a confusion-matrix oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(200);
    std::vector<double> scores(n);
    std::vector<bool> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = rng.below(5) == 0 ? 0.5 : rng.uniform();
      labels[i] = rng.below(2) == 1;
    }
    double tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool yes = scores[i] > 0.5;
      (yes ? (labels[i] ? tp : fp) : (labels[i] ? fn : tn)) += 1;
    }
    const auto m = evaluate_binary(scores, labels);
    CHECK(m.true_positive == tp);
    CHECK(m.false_positive == fp);
    CHECK(m.true_negative == tn);
    CHECK(m.false_negative == fn);
    CHECK(m.accuracy == doctest::Approx((tp + tn) / n));
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    CHECK(m.precision == doctest::Approx(p));
    CHECK(m.recall == doctest::Approx(r));
    CHECK(m.f1 == doctest::Approx(p + r > 0 ? 2 * p * r / (p + r) : 0.0));
  }
  // confidences: score for accepts, 1 - score for rejects
  const auto m = evaluate_binary(std::vector<double>{0.9, 0.7, 0.2, 0.4},
                                 std::vector<bool>{true, false, false, true});
  CHECK(m.correctly_accept == doctest::Approx(0.9));
  CHECK(m.incorrectly_accept == doctest::Approx(0.7));
  CHECK(m.correctly_reject == doctest::Approx(0.8));
  CHECK(m.incorrectly_reject == doctest::Approx(0.6));
  CHECK_THROWS_AS(evaluate_binary(std::vector<double>{}, std::vector<bool>{}), Error);
  CHECK_THROWS_AS(evaluate_binary(std::vector<double>{0.1}, std::vector<bool>{true}, 1.0),
                  Error);
}

TEST_CASE("checkpoint selection picks the earliest best F1") {
  const std::vector<double> f1{0.5, 0.8, 0.7, 0.8, 0.6};
  CHECK(select_checkpoint(f1) == 1);
  CHECK_THROWS_AS(select_checkpoint(std::vector<double>{}), Error);
}

TEST_CASE("checkpoint roundtrip and corruption") {
  auto c = small_config();
  auto model = ComparatorModel::init(c, 8);
  model.batchnorm_stats()[0].running_mean[3] = 0.25;
  model.quantize_to_f32();
  const auto dir = pcnn::testing::temp_dir("comparator");
  model.save(dir / "m.json", dir / "m.f32", {{"note", "x"}});
  nlohmann::json meta;
  auto back = ComparatorModel::load(dir / "m.json", dir / "m.f32", &meta);
  CHECK(meta["note"] == "x");
  CHECK(back.config() == model.config());
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    CHECK(back.parameters()[i].value == model.parameters()[i].value);
  }
  CHECK(back.batchnorm_stats()[0].running_mean == model.batchnorm_stats()[0].running_mean);

  auto bytes = read_file(dir / "m.f32");
  bytes[0] ^= std::byte{1};
  write_file(dir / "m.f32", bytes);
  CHECK_THROWS_AS(ComparatorModel::load(dir / "m.json", dir / "m.f32"), Error);
}

TEST_CASE("training learns a separable toy task, deterministically") {
  auto store = random_store(make_manifest(4, 12, 6, 2, 8), 9, 3.0);
  const ClassIndex index(store, Split::Train);
  std::vector<ClassifierOutput> train_rows, test_rows;
  for (Split s : {Split::Train, Split::Test}) {
    for (const auto& r : store.records(s)) {
      ClassifierOutput o{r.id, std::vector<double>(4, 0.1)};
      o.probs[static_cast<std::size_t>(r.label)] = 0.7;
      (s == Split::Train ? train_rows : test_rows).push_back(o);
    }
  }
  const ProbabilityTable tp(Split::Train, 4, train_rows), ep(Split::Test, 4, test_rows);
  SamplerConfig sc{3, 1, NegativeMode::HardTopQ, 1};
  const auto train_pairs = sample_train(store, tp, index, sc);
  const auto eval_pairs = sample_eval(store, ep, index, sc);

  auto c = small_config();
  c.zero_head = true;
  c.mlp_width = 32;
  TrainConfig t;
  t.epochs = 8;
  t.batch_size = 16;
  t.max_lr = 0.05;
  const auto a = train(ComparatorModel::init(c, 1), train_pairs, eval_pairs, store, t);
  const auto b = train(ComparatorModel::init(c, 1), train_pairs, eval_pairs, store, t);
  REQUIRE(a.report.epochs.size() == 8);
  CHECK(a.report.epochs.back().loss < a.report.epochs.front().loss);
  CHECK(a.report.epochs[a.report.selected_epoch - 1].eval.accuracy > 0.8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(a.report.epochs[i].loss == b.report.epochs[i].loss);
    CHECK(a.report.epochs[i].eval.f1 == b.report.epochs[i].eval.f1);
  }
  std::vector<double> f1;
  for (const auto& e : a.report.epochs) f1.push_back(e.eval.f1);
  CHECK(a.report.selected_epoch == select_checkpoint(f1) + 1);
  CHECK(score_pairs(a.model, eval_pairs, store) == score_pairs(b.model, eval_pairs, store));
}

TEST_CASE("a trailing batch of one pair is skipped") {
  auto store = random_store(make_manifest(2, 4, 1, 2, 8), 10, 2.0);
  PairSet pairs;
  pairs.query_split = Split::Train;
  for (RecordId i = 0; i < 5; ++i) pairs.pairs.push_back({i % 4, (i + 1) % 4, true, 0, 1});
  TrainConfig t;
  t.epochs = 1;
  t.batch_size = 4;  // 5 pairs -> batches of 4 and 1
  auto r = train(ComparatorModel::init(small_config(), 1), pairs, pairs, store, t);
  CHECK(std::isfinite(r.report.epochs[0].loss));
}
