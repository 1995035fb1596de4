#include "pcnn/harness.hpp"

#include <cmath>
#include <fstream>

#include "pcnn/error.hpp"
#include "pcnn/nnindex.hpp"
#include "pcnn/rng.hpp"

namespace pcnn {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kCorruptionSalt = 0xC0AA0F7ull;

template <typename F>
auto stage(const std::string& name, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const Error& e) {
    throw Error(e.kind(), "stage '" + name + "': " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::Io, "stage '" + name + "': " + e.what());
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic data

void SyntheticSpec::validate(std::size_t q) const {
  auto bad = [](const std::string& m) { throw Error(ErrorKind::Configuration, m); };
  if (classes < 2) bad("synthetic spec needs at least 2 classes");
  if (genera < 1 || classes % genera != 0) bad("classes must split evenly into genera");
  if (q > classes) bad("Q = " + std::to_string(q) + " exceeds the class count");
  if (train_per_class < q + 1) {
    bad("train_per_class must be at least Q+1 = " + std::to_string(q + 1));
  }
  if (test_per_class < 1) bad("test_per_class must be positive");
  if (tokens < 1) bad("tokens must be positive");
  if (depth < genera + classes) {
    bad("infeasible synthetic spec: depth " + std::to_string(depth) +
        " cannot hold " + std::to_string(genera + classes) + " orthogonal directions");
  }
  if (!(separation > 0.0) || !(genus_separation >= 0.0)) bad("separations must be positive");
  if (!(token_noise >= 0.0)) bad("token_noise must be non-negative");
  if (!(temperature > 0.0)) bad("temperature must be positive");
  if (!(corruption_rate >= 0.0 && corruption_rate <= 1.0)) bad("corruption_rate must be in [0,1]");
  if (corruption_depth < 2 || corruption_depth > classes) {
    bad("corruption_depth must be in [2, classes]");
  }
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"name", name},
          {"classes", classes},
          {"genera", genera},
          {"train_per_class", train_per_class},
          {"test_per_class", test_per_class},
          {"depth", depth},
          {"tokens", tokens},
          {"separation", separation},
          {"genus_separation", genus_separation},
          {"token_noise", token_noise},
          {"temperature", temperature},
          {"corruption_rate", corruption_rate},
          {"corruption_depth", corruption_depth},
          {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.name = j.value("name", s.name);
  s.classes = j.value("classes", s.classes);
  s.genera = j.value("genera", s.genera);
  s.train_per_class = j.value("train_per_class", s.train_per_class);
  s.test_per_class = j.value("test_per_class", s.test_per_class);
  s.depth = j.value("depth", s.depth);
  s.tokens = j.value("tokens", s.tokens);
  s.separation = j.value("separation", s.separation);
  s.genus_separation = j.value("genus_separation", s.genus_separation);
  s.token_noise = j.value("token_noise", s.token_noise);
  s.temperature = j.value("temperature", s.temperature);
  s.corruption_rate = j.value("corruption_rate", s.corruption_rate);
  s.corruption_depth = j.value("corruption_depth", s.corruption_depth);
  s.seed = j.value("seed", s.seed);
  return s;
}

SyntheticData synth_gen(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t c = spec.classes, d = spec.depth, t = spec.tokens;
  const std::size_t per_genus = c / spec.genera;

  // Genus centers on axes 0..g-1, species offsets on axes g..g+c-1.
  std::vector<std::vector<double>> centroids(c, std::vector<double>(d, 0.0));
  for (std::size_t k = 0; k < c; ++k) {
    centroids[k][k / per_genus] = spec.genus_separation / std::sqrt(2.0);
    centroids[k][spec.genera + k] = spec.separation / std::sqrt(2.0);
  }

  DatasetManifest m;
  m.name = spec.name;
  m.tokens = t;
  m.depth = d;
  for (std::size_t k = 0; k < c; ++k) m.classes.push_back("class_" + std::to_string(k));
  RecordId next = 0;
  for (Split split : {Split::Train, Split::Test}) {
    const std::size_t n = split == Split::Train ? spec.train_per_class : spec.test_per_class;
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        m.records.push_back(RecordMeta{next++, static_cast<ClassId>(k), split});
      }
    }
  }

  std::vector<float> values;
  values.reserve(m.records.size() * t * d);
  for (const auto& r : m.records) {
    Rng rng = Rng::stream(spec.seed, static_cast<std::uint64_t>(r.id));
    const auto& mu = centroids[static_cast<std::size_t>(r.label)];
    for (std::size_t tok = 0; tok < t; ++tok) {
      for (std::size_t f = 0; f < d; ++f) {
        values.push_back(static_cast<float>(mu[f] + spec.token_noise * rng.normal()));
      }
    }
  }
  return SyntheticData{EmbeddingStore::from_grids(std::move(m), std::move(values)),
                       std::move(centroids)};
}

SyntheticClassifier synthetic_classifier(const SyntheticSpec& spec,
                                         const std::vector<std::vector<double>>& centroids) {
  return SyntheticClassifier(
      centroids, spec.temperature,
      CorruptionConfig{spec.corruption_rate, spec.corruption_depth, spec.seed ^ kCorruptionSalt});
}

// ---------------------------------------------------------------------------
// Config

nlohmann::json sampler_to_json(const SamplerConfig& config) {
  return {{"Q", config.q},
          {"nn_rank", config.nn_rank},
          {"negative_mode", to_string(config.negative_mode)},
          {"seed", config.seed}};
}

SamplerConfig sampler_from_json(const nlohmann::json& j) {
  SamplerConfig c;
  c.q = j.value("Q", c.q);
  c.nn_rank = j.value("nn_rank", c.nn_rank);
  c.negative_mode = negative_mode_from_string(j.value("negative_mode", to_string(c.negative_mode)));
  c.seed = j.value("seed", c.seed);
  return c;
}

fs::path matrix_path_for(const fs::path& sidecar) {
  fs::path p = sidecar;
  return p.replace_extension(".f32");
}

void ExperimentConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorKind::Configuration, m); };
  if (synthetic.has_value() == files.has_value()) {
    bad("dataset must be exactly one of synthetic or files");
  }
  if (seeds.empty()) bad("seed list must not be empty");
  sampler.validate();
  comparator.validate();
  train.validate();
  rerank.validate();
  if (synthetic) {
    synthetic->validate(sampler.q);
    if (synthetic->depth != comparator.depth || synthetic->tokens != comparator.tokens) {
      bad("comparator depth/tokens do not match the synthetic dataset");
    }
  }
  if (files) {
    for (const auto& p : {files->manifest, files->payload, files->train_probs,
                          matrix_path_for(files->train_probs), files->test_probs,
                          matrix_path_for(files->test_probs)}) {
      if (!fs::exists(p)) bad("missing input file " + p.string());
    }
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json dataset;
  if (synthetic) dataset["synthetic"] = synthetic->to_json();
  if (files) {
    dataset = {{"manifest", files->manifest.string()},
               {"payload", files->payload.string()},
               {"train_probs", files->train_probs.string()},
               {"test_probs", files->test_probs.string()}};
  }
  return {{"dataset", dataset},
          {"sampler", sampler_to_json(sampler)},
          {"comparator", comparator.to_json()},
          {"train", train.to_json()},
          {"rerank", rerank.to_json()},
          {"seeds", seeds},
          {"output_dir", output_dir.string()}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j, const fs::path& base) {
  try {
    ExperimentConfig c;
    const auto& ds = j.at("dataset");
    if (ds.contains("synthetic")) {
      c.synthetic = SyntheticSpec::from_json(ds.at("synthetic"));
    } else {
      c.files = DatasetPaths{resolve(base, ds.at("manifest").get<std::string>()),
                             resolve(base, ds.at("payload").get<std::string>()),
                             resolve(base, ds.at("train_probs").get<std::string>()),
                             resolve(base, ds.at("test_probs").get<std::string>())};
    }
    if (j.contains("sampler")) c.sampler = sampler_from_json(j["sampler"]);
    if (j.contains("comparator")) c.comparator = ComparatorConfig::from_json(j["comparator"]);
    if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
    if (j.contains("rerank")) c.rerank = RerankConfig::from_json(j["rerank"]);
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("output_dir")) {
      c.output_dir = resolve(base, j["output_dir"].get<std::string>());
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Configuration, std::string("malformed experiment config: ") + e.what());
  }
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  return from_json(read_json(path), path.parent_path());
}

ExperimentData load_experiment_data(const ExperimentConfig& config) {
  config.validate();
  if (config.synthetic) {
    return stage("generation", [&] {
      auto data = synth_gen(*config.synthetic);
      const auto clf = synthetic_classifier(*config.synthetic, data.centroids);
      auto train = clf.predict_all(data.store, Split::Train);
      auto test = clf.predict_all(data.store, Split::Test);
      return ExperimentData{std::move(data.store), std::move(train), std::move(test)};
    });
  }
  return stage("ingestion", [&] {
    const auto& f = *config.files;
    auto store = EmbeddingStore::load(f.manifest, f.payload);
    auto train = ProbabilityTable::load(f.train_probs, matrix_path_for(f.train_probs), &store);
    auto test = ProbabilityTable::load(f.test_probs, matrix_path_for(f.test_probs), &store);
    if (train.split() != Split::Train || test.split() != Split::Test) {
      throw Error(ErrorKind::Validation, "probability files are for the wrong splits");
    }
    return ExperimentData{std::move(store), std::move(train), std::move(test)};
  });
}

// ---------------------------------------------------------------------------
// Runs

nlohmann::json SeedResult::to_json() const {
  return {{"seed", seed},
          {"train_pairs", train_pairs},
          {"eval_pairs", eval_pairs},
          {"selected_epoch", selected_epoch},
          {"binary", binary.to_json()},
          {"rerank", rerank.to_json()}};
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd r;
  if (values.empty()) return r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(values.size()));
  return r;
}

nlohmann::json RunResult::to_json(const ExperimentConfig& config) const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : seeds) rows.push_back(s.to_json());

  auto summarize = [&](auto get) {
    std::vector<double> v;
    for (const auto& s : seeds) v.push_back(get(s));
    const auto ms = mean_std(v);
    return nlohmann::json{{"mean", ms.mean}, {"std", ms.std}};
  };
  nlohmann::json summary = {
      {"binary_accuracy", summarize([](const SeedResult& s) { return s.binary.accuracy; })},
      {"binary_f1", summarize([](const SeedResult& s) { return s.binary.f1; })},
      {"accuracy_c", summarize([](const SeedResult& s) { return s.rerank.accuracy_c; })},
      {"accuracy_c_then_s",
       summarize([](const SeedResult& s) { return s.rerank.accuracy_c_then_s; })},
      {"accuracy_c_times_s",
       summarize([](const SeedResult& s) { return s.rerank.accuracy_c_times_s; })},
      {"mean_comparator_queries",
       summarize([](const SeedResult& s) { return s.rerank.mean_comparator_queries; })}};
  return {{"format", "pcnn.results.v1"},
          {"config", config.to_json()},
          {"seeds", rows},
          {"summary", summary}};
}

RunResult run(const ExperimentConfig& config, const ExperimentData& data,
              const ProgressFn& progress) {
  config.validate();
  auto say = [&](const std::string& m) {
    if (progress) progress(m);
  };
  const auto index = stage("index", [&] { return ClassIndex(data.store, Split::Train); });

  std::vector<SeedResult> rows;
  std::vector<RankedResult> ranked;
  std::optional<ComparatorModel> last;
  for (std::uint64_t seed : config.seeds) {
    SeedResult row;
    row.seed = seed;
    SamplerConfig sampler = config.sampler;
    sampler.seed = seed;
    auto [train_pairs, eval_pairs] = stage("sampling", [&] {
      return std::pair{sample_train(data.store, data.train_probs, index, sampler),
                       sample_eval(data.store, data.test_probs, index, sampler)};
    });
    row.train_pairs = train_pairs.size();
    row.eval_pairs = eval_pairs.size();
    say("seed " + std::to_string(seed) + ": " + std::to_string(row.train_pairs) +
        " train pairs, " + std::to_string(row.eval_pairs) + " eval pairs");

    auto trained = stage("training", [&] {
      TrainConfig tc = config.train;
      tc.seed = seed;
      auto r = train(ComparatorModel::init(config.comparator, seed), train_pairs, eval_pairs,
                     data.store, tc, [&](const EpochStats& e) {
                       say("seed " + std::to_string(seed) + " epoch " +
                           std::to_string(e.epoch) + " loss " + std::to_string(e.loss) +
                           " eval f1 " + std::to_string(e.eval.f1));
                     });
      r.model.quantize_to_f32();
      return r;
    });
    row.selected_epoch = trained.report.selected_epoch;

    row.binary = stage("evaluation", [&] {
      return evaluate_binary(trained.model, eval_pairs, data.store);
    });
    ranked.clear();
    row.rerank = stage("reranking", [&] {
      return evaluate_rerank(data.store, Split::Test, data.test_probs, index,
                             ComparatorScorer(trained.model), config.rerank, &ranked);
    });
    say("seed " + std::to_string(seed) + ": C " + std::to_string(row.rerank.accuracy_c) +
        " C->S " + std::to_string(row.rerank.accuracy_c_then_s) + " CxS " +
        std::to_string(row.rerank.accuracy_c_times_s));

    if (!config.output_dir.empty()) {
      stage("output", [&] {
        const fs::path dir = config.output_dir / ("seed-" + std::to_string(seed));
        fs::create_directories(dir);
        trained.model.save(dir / "comparator.json", dir / "comparator.f32",
                           {{"seed", seed}, {"selected_epoch", row.selected_epoch}});
        write_json(dir / "train_report.json", trained.report.to_json());
        save_ranked_jsonl(ranked, dir / "ranked.jsonl");
        train_pairs.save_jsonl(dir / "train_pairs.jsonl");
        eval_pairs.save_jsonl(dir / "eval_pairs.jsonl");
      });
    }
    rows.push_back(row);
    last = std::move(trained.model);
  }
  RunResult result{std::move(rows), std::move(ranked), std::move(*last)};
  if (!config.output_dir.empty()) {
    stage("output", [&] {
      write_json(config.output_dir / "results.json", result.to_json(config));
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Explanations

nlohmann::json export_explanations(const std::vector<RankedResult>& results,
                                   const EmbeddingStore& store) {
  const auto& names = store.manifest().classes;
  auto class_name = [&](ClassId c, const std::string& where) -> const std::string& {
    if (c < 0 || static_cast<std::size_t>(c) >= names.size()) {
      throw Error(ErrorKind::Validation, where + ": class id " + std::to_string(c) +
                                             " is out of range");
    }
    return names[static_cast<std::size_t>(c)];
  };
  auto null_or = [](bool present, double v) {
    return present ? nlohmann::json(v) : nlohmann::json();
  };

  nlohmann::json panels = nlohmann::json::array();
  for (const auto& r : results) {
    const std::string where = "query " + std::to_string(r.query);
    if (!store.contains(r.split, r.query)) {
      throw Error(ErrorKind::Validation, where + " is not in the " + to_string(r.split) +
                                             " split");
    }
    const auto& q = store.record(r.split, r.query);
    nlohmann::json classes = nlohmann::json::array();
    for (std::size_t i = 0; i < r.classes.size(); ++i) {
      const auto& d = r.classes[i];
      nlohmann::json nns = nlohmann::json::array();
      for (RecordId id : d.neighbors) {
        if (!store.contains(Split::Train, id)) {
          throw Error(ErrorKind::Validation,
                      where + ": neighbor " + std::to_string(id) + " does not exist");
        }
        const auto& nn = store.record(Split::Train, id);
        if (nn.label != d.label) {
          throw Error(ErrorKind::Validation, where + ": neighbor " + std::to_string(id) +
                                                 " is not from class " +
                                                 std::to_string(d.label));
        }
        nns.push_back({{"id", id}, {"class", nn.label}});
      }
      classes.push_back({{"rank", i + 1},
                         {"c_rank", d.c_rank},
                         {"class", d.label},
                         {"class_name", class_name(d.label, where)},
                         {"c_prob", d.c_prob},
                         {"s_score", d.s_score ? nlohmann::json(*d.s_score) : nlohmann::json()},
                         {"final", null_or(!d.skipped(), d.final_score)},
                         {"skipped", d.skipped()},
                         {"neighbors", nns}});
    }
    panels.push_back({{"query",
                       {{"id", q.id},
                        {"split", to_string(r.split)},
                        {"class", q.label},
                        {"class_name", class_name(q.label, where)}}},
                      {"mode", to_string(r.mode)},
                      {"predicted",
                       {{"class", r.predicted}, {"class_name", class_name(r.predicted, where)}}},
                      {"correct", r.predicted == q.label},
                      {"comparator_queries", r.comparator_queries},
                      {"classes", classes}});
  }
  return {{"format", "pcnn.explanations.v1"},
          {"dataset", store.manifest().name},
          {"panels", panels}};
}

std::vector<RankedResult> load_ranked_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::vector<RankedResult> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(RankedResult::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Validation,
                  path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_ranked_jsonl(const std::vector<RankedResult>& results, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  for (const auto& r : results) out << r.to_json().dump() << '\n';
}

}  // namespace pcnn
