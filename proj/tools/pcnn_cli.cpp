#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "pcnn/classifier.hpp"
#include "pcnn/comparator.hpp"
#include "pcnn/embedstore.hpp"
#include "pcnn/error.hpp"
#include "pcnn/harness.hpp"
#include "pcnn/nnindex.hpp"
#include "pcnn/pairsampler.hpp"
#include "pcnn/reranker.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pcnn;

namespace {

// Dataset location shared by most commands. --data DIR points at the layout
// written by `synth`.
struct DataArgs {
  std::string dir;
  std::string manifest;
  std::string payload;
  std::string train_probs;
  std::string test_probs;

  void add(CLI::App* app, bool probs) {
    app->add_option("--data", dir, "Directory written by `synth`");
    app->add_option("--manifest", manifest, "Embedding manifest JSON");
    app->add_option("--payload", payload, "Embedding payload (f32)");
    if (probs) {
      app->add_option("--train-probs", train_probs, "Train-split probability sidecar");
      app->add_option("--test-probs", test_probs, "Test-split probability sidecar");
    }
  }

  fs::path pick(const std::string& explicit_path, const char* name) const {
    if (!explicit_path.empty()) return explicit_path;
    if (dir.empty()) {
      throw Error(ErrorKind::Usage, std::string("need --data or --") + name);
    }
    static const std::map<std::string, std::string> files = {
        {"manifest", "embeddings.json"},
        {"payload", "embeddings.f32"},
        {"train-probs", "train_probs.json"},
        {"test-probs", "test_probs.json"}};
    return fs::path(dir) / files.at(name);
  }

  EmbeddingStore store() const {
    return EmbeddingStore::load(pick(manifest, "manifest"), pick(payload, "payload"));
  }
  ProbabilityTable probs(Split split, const EmbeddingStore& s) const {
    const fs::path side = split == Split::Train ? pick(train_probs, "train-probs")
                                                : pick(test_probs, "test-probs");
    return ProbabilityTable::load(side, matrix_path_for(side), &s);
  }
};

struct CheckpointArg {
  std::string path;
  void add(CLI::App* app) {
    app->add_option("--checkpoint", path, "Comparator header JSON (blob: same stem, .f32)")
        ->required();
  }
  ComparatorModel load() const {
    return ComparatorModel::load(path, matrix_path_for(path));
  }
};

void emit(const json& j) { std::cout << j.dump(2) << std::endl; }

int fail(const std::string& kind, const std::string& message,
         std::optional<std::uint64_t> offset = std::nullopt) {
  json e = {{"error", {{"kind", kind}, {"message", message}}}};
  if (offset) e["error"]["offset"] = *offset;
  std::cerr << e.dump() << std::endl;
  return kind == "usage" ? 64 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probable-class nearest-neighbor re-ranking toolkit"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Progress messages on stderr");
  auto progress = [&](const std::string& m) {
    if (verbose) std::cerr << m << std::endl;
  };

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset and classifier outputs");
  std::string synth_spec, synth_out;
  synth->add_option("--spec", synth_spec, "SyntheticSpec JSON (defaults when omitted)");
  synth->add_option("--out", synth_out, "Output directory")->required();

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Validate an embedding manifest and payload");
  DataArgs ingest_data;
  ingest_data.add(ingest, false);

  // index
  auto* index_cmd = app.add_subcommand("index", "Build the training-split index and query it");
  DataArgs index_data;
  index_data.add(index_cmd, false);
  double index_fraction = 1.0;
  std::uint64_t index_seed = 42;
  std::optional<RecordId> index_query;
  std::size_t index_k = 10;
  index_cmd->add_option("--subsample", index_fraction, "Fraction of each class to keep");
  index_cmd->add_option("--seed", index_seed, "Subsampling seed");
  index_cmd->add_option("--query", index_query, "Test record id to search for");
  index_cmd->add_option("-k", index_k, "Neighbors to return");

  // sample
  auto* sample = app.add_subcommand("sample", "Sample comparator pairs");
  DataArgs sample_data;
  sample_data.add(sample, true);
  std::string sample_split = "train", sample_out, sample_mode = "hard_topQ";
  SamplerConfig sample_cfg;
  sample->add_option("--split", sample_split, "train | test")
      ->check(CLI::IsMember({"train", "test"}));
  sample->add_option("-Q,--q", sample_cfg.q, "Top-Q classes");
  sample->add_option("--nn-rank", sample_cfg.nn_rank, "Negative neighbor rank");
  sample->add_option("--negatives", sample_mode, "hard_topQ | random_class");
  sample->add_option("--seed", sample_cfg.seed, "Sampler seed");
  sample->add_option("--out", sample_out, "Pairs JSONL")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the comparator");
  DataArgs train_data;
  train_data.add(train_cmd, false);
  std::string train_pairs, eval_pairs, train_config, train_out;
  train_cmd->add_option("--train-pairs", train_pairs, "Training pairs JSONL")->required();
  train_cmd->add_option("--eval-pairs", eval_pairs, "Evaluation pairs JSONL")->required();
  train_cmd->add_option("--config", train_config,
                        "JSON with optional `comparator` and `train` objects");
  train_cmd->add_option("--out", train_out, "Checkpoint header path (.json)")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Binary metrics on pairs, or kNN accuracy");
  DataArgs eval_data;
  eval_data.add(eval, false);
  CheckpointArg eval_ckpt;
  std::string eval_pairs_path, eval_scorer = "comparator";
  double eval_threshold = 0.5;
  std::size_t eval_knn = 0;
  eval->add_option("--checkpoint", eval_ckpt.path, "Comparator header JSON");
  eval->add_option("--pairs", eval_pairs_path, "Pairs JSONL");
  eval->add_option("--threshold", eval_threshold, "Decision threshold");
  eval->add_option("--knn", eval_knn, "Run the kNN baseline with this k instead");
  eval->add_option("--scorer", eval_scorer, "kNN scorer: comparator | cosine")
      ->check(CLI::IsMember({"comparator", "cosine"}));

  // rerank
  auto* rerank_cmd = app.add_subcommand("rerank", "Re-rank the test split");
  DataArgs rerank_data;
  rerank_data.add(rerank_cmd, true);
  std::string rerank_ckpt, rerank_out, rerank_mode = "soft", rerank_scorer = "comparator";
  RerankConfig rerank_cfg;
  rerank_cmd->add_option("--checkpoint", rerank_ckpt, "Comparator header JSON");
  rerank_cmd->add_option("-K,--k", rerank_cfg.k, "Classes to re-rank");
  rerank_cmd->add_option("--neighbors", rerank_cfg.n_neighbors, "Neighbors averaged per class");
  rerank_cmd->add_option("--mode", rerank_mode, "soft | hard");
  rerank_cmd->add_option("--floor", rerank_cfg.floor, "Probability floor");
  rerank_cmd->add_option("--scorer", rerank_scorer, "comparator | oracle | cosine")
      ->check(CLI::IsMember({"comparator", "oracle", "cosine"}));
  rerank_cmd->add_option("--out", rerank_out, "RankedResult JSONL");

  // sanity
  auto* sanity = app.add_subcommand("sanity", "Self, random-value and shuffled-pair checks");
  DataArgs sanity_data;
  sanity_data.add(sanity, false);
  CheckpointArg sanity_ckpt;
  sanity_ckpt.add(sanity);
  std::uint64_t sanity_seed = 42;
  sanity->add_option("--seed", sanity_seed, "Seed for random grids and shuffles");

  // ceiling
  auto* ceiling = app.add_subcommand("ceiling", "Cumulative top-Q accuracy of C");
  DataArgs ceiling_data;
  ceiling_data.add(ceiling, true);
  std::size_t ceiling_max = 10;
  std::string ceiling_split = "test";
  ceiling->add_option("--max-q", ceiling_max, "Largest Q");
  ceiling->add_option("--split", ceiling_split, "train | test")
      ->check(CLI::IsMember({"train", "test"}));

  // explain
  auto* explain = app.add_subcommand("explain", "Export PCNN explanation panels");
  DataArgs explain_data;
  explain_data.add(explain, false);
  std::string explain_in, explain_out;
  explain->add_option("--ranked", explain_in, "RankedResult JSONL")->required();
  explain->add_option("--out", explain_out, "Explanation JSON")->required();

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Run an experiment config over its seeds");
  std::string sweep_config, sweep_out;
  std::vector<std::uint64_t> sweep_seeds;
  sweep->add_option("--config", sweep_config, "Experiment config JSON")->required();
  sweep->add_option("--seeds", sweep_seeds, "Override the seed list");
  sweep->add_option("--out", sweep_out, "Override the output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    if (*synth) {
      SyntheticSpec spec;
      if (!synth_spec.empty()) spec = SyntheticSpec::from_json(read_json(synth_spec));
      const auto data = synth_gen(spec);
      const auto clf = synthetic_classifier(spec, data.centroids);
      const fs::path out(synth_out);
      fs::create_directories(out);
      data.store.save(out / "embeddings.json", out / "embeddings.f32");
      clf.predict_all(data.store, Split::Train)
          .save(out / "train_probs.json", out / "train_probs.f32");
      const auto test = clf.predict_all(data.store, Split::Test);
      test.save(out / "test_probs.json", out / "test_probs.f32");
      write_json(out / "centroids.json", {{"spec", spec.to_json()}, {"centroids", data.centroids}});
      emit({{"records", data.store.manifest().records.size()},
            {"checksum", data.store.manifest().checksum},
            {"test_top1", topq_accuracy(test, data.store, 1)},
            {"test_top10", topq_accuracy(test, data.store, std::min<std::size_t>(10, spec.classes))}});
    } else if (*ingest) {
      const auto store = ingest_data.store();
      const auto& m = store.manifest();
      emit({{"dataset", m.name},
            {"classes", m.num_classes()},
            {"tokens", m.tokens},
            {"depth", m.depth},
            {"train", store.size(Split::Train)},
            {"test", store.size(Split::Test)},
            {"checksum", m.checksum}});
    } else if (*index_cmd) {
      const auto store = index_data.store();
      ClassIndex index(store, Split::Train);
      if (index_fraction != 1.0) index = index.subsample(index_fraction, index_seed);
      json out = {{"active", index.active_total()}, {"classes", index.num_classes()}};
      if (index_query) {
        const auto& q = store.record(Split::Test, *index_query);
        json nns = json::array();
        for (const auto& n : index.topk_global(pooled(q), index_k)) {
          nns.push_back({{"id", n.id}, {"class", n.label}, {"distance", n.distance}});
        }
        out["neighbors"] = nns;
      }
      emit(out);
    } else if (*sample) {
      const auto store = sample_data.store();
      const Split split = split_from_string(sample_split);
      const auto probs = sample_data.probs(split, store);
      sample_cfg.negative_mode = negative_mode_from_string(sample_mode);
      const ClassIndex index(store, Split::Train);
      EvalSampleStats stats;
      const PairSet pairs = split == Split::Train
                                ? sample_train(store, probs, index, sample_cfg)
                                : sample_eval(store, probs, index, sample_cfg, &stats);
      pairs.save_jsonl(sample_out);
      json out = {{"pairs", pairs.size()},
                  {"positives", pairs.positives()},
                  {"negatives", pairs.negatives()}};
      if (split == Split::Train) {
        std::vector<RecordId> ids;
        for (const auto& r : store.records(split)) ids.push_back(r.id);
        const auto audit = pair_count_audit(pairs, store, probs, ids, sample_cfg.q);
        out["audit"] = {{"expected", audit.expected}, {"ok", audit.ok()},
                        {"violations", audit.violations}};
      } else {
        out["identical_removed"] = stats.identical_removed;
        out["balance_removed"] = stats.balance_removed;
      }
      emit(out);
    } else if (*train_cmd) {
      const auto store = train_data.store();
      ComparatorConfig mc;
      mc.depth = store.depth();
      mc.tokens = store.tokens();
      TrainConfig tc;
      if (!train_config.empty()) {
        const auto j = read_json(train_config);
        if (j.contains("comparator")) mc = ComparatorConfig::from_json(j["comparator"]);
        if (j.contains("train")) tc = TrainConfig::from_json(j["train"]);
      }
      const auto tp = PairSet::load_jsonl(train_pairs);
      const auto ep = PairSet::load_jsonl(eval_pairs);
      auto result = train(ComparatorModel::init(mc, tc.seed), tp, ep, store, tc,
                          [&](const EpochStats& e) {
                            progress("epoch " + std::to_string(e.epoch) + " loss " +
                                     std::to_string(e.loss) + " f1 " +
                                     std::to_string(e.eval.f1));
                          });
      result.model.save(train_out, matrix_path_for(train_out),
                        {{"selected_epoch", result.report.selected_epoch}});
      fs::path report = train_out;
      write_json(report.replace_extension(".report.json"), result.report.to_json());
      emit({{"selected_epoch", result.report.selected_epoch},
            {"eval", result.report.epochs.at(result.report.selected_epoch - 1).eval.to_json()}});
    } else if (*eval) {
      const auto store = eval_data.store();
      if (eval_knn > 0) {
        const ClassIndex index(store, Split::Train);
        std::optional<ComparatorModel> model;
        std::unique_ptr<PairScorer> scorer;
        if (eval_scorer == "cosine") {
          scorer = std::make_unique<CosineScorer>();
        } else {
          model = eval_ckpt.load();
          scorer = std::make_unique<ComparatorScorer>(*model);
        }
        std::size_t hits = 0;
        const auto& test = store.records(Split::Test);
        for (const auto& q : test) {
          hits += knn_classify(q, index, store, *scorer, eval_knn).label == q.label;
        }
        emit({{"k", eval_knn},
              {"scorer", eval_scorer},
              {"accuracy", test.empty() ? 0.0 : double(hits) / double(test.size())}});
      } else {
        if (eval_ckpt.path.empty() || eval_pairs_path.empty()) {
          throw Error(ErrorKind::Usage, "eval needs --checkpoint and --pairs (or --knn)");
        }
        const auto model = eval_ckpt.load();
        emit(evaluate_binary(model, PairSet::load_jsonl(eval_pairs_path), store, eval_threshold)
                 .to_json());
      }
    } else if (*rerank_cmd) {
      const auto store = rerank_data.store();
      const auto probs = rerank_data.probs(Split::Test, store);
      rerank_cfg.mode = rerank_mode_from_string(rerank_mode);
      const ClassIndex index(store, Split::Train);
      std::optional<ComparatorModel> model;
      std::unique_ptr<PairScorer> scorer;
      if (rerank_scorer == "oracle") {
        scorer = std::make_unique<OracleScorer>();
      } else if (rerank_scorer == "cosine") {
        scorer = std::make_unique<CosineScorer>();
      } else {
        if (rerank_ckpt.empty()) throw Error(ErrorKind::Usage, "rerank needs --checkpoint");
        model = ComparatorModel::load(rerank_ckpt, matrix_path_for(rerank_ckpt));
        scorer = std::make_unique<ComparatorScorer>(*model);
      }
      std::vector<RankedResult> ranked;
      const auto report =
          evaluate_rerank(store, Split::Test, probs, index, *scorer, rerank_cfg, &ranked);
      if (!rerank_out.empty()) save_ranked_jsonl(ranked, rerank_out);
      emit(report.to_json());
    } else if (*sanity) {
      const auto store = sanity_data.store();
      emit(sanity_suite(sanity_ckpt.load(), store, Split::Test, sanity_seed).to_json());
    } else if (*ceiling) {
      const auto store = ceiling_data.store();
      const Split split = split_from_string(ceiling_split);
      const auto probs = ceiling_data.probs(split, store);
      json rows = json::array();
      for (const auto& r : topq_ceiling(probs, store, 1, ceiling_max)) {
        rows.push_back({{"Q", r.q}, {"accuracy", r.accuracy}});
      }
      emit(rows);
    } else if (*explain) {
      const auto store = explain_data.store();
      write_json(explain_out, export_explanations(load_ranked_jsonl(explain_in), store));
      emit({{"written", explain_out}});
    } else if (*sweep) {
      auto config = ExperimentConfig::load(sweep_config);
      if (!sweep_seeds.empty()) config.seeds = sweep_seeds;
      if (!sweep_out.empty()) config.output_dir = sweep_out;
      const auto data = load_experiment_data(config);
      const auto result = run(config, data, progress);
      emit(result.to_json(config));
    }
  } catch (const IngestionError& e) {
    return fail(std::string(to_string(e.kind())), e.what(), e.offset());
  } catch (const Error& e) {
    return fail(std::string(to_string(e.kind())), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
