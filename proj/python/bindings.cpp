#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>

#include "pcnn/error.hpp"
#include "pcnn/harness.hpp"
#include "pcnn/nnindex.hpp"

namespace py = pybind11;
using namespace pcnn;

namespace {

using Json = nlohmann::json;

Json parse(const std::string& s) { return s.empty() ? Json::object() : Json::parse(s); }

Split split_of(const std::string& s) { return split_from_string(s); }

py::array_t<float> grid_array(const EmbeddingRecord& r) {
  py::array_t<float> out({r.tokens, r.depth});
  std::copy(r.grid.begin(), r.grid.end(), out.mutable_data());
  return out;
}

// Bundles a store with its train-split index so the index never outlives it.
struct Index {
  std::shared_ptr<EmbeddingStore> store;
  std::shared_ptr<ClassIndex> index;
};

std::unique_ptr<PairScorer> make_scorer(const std::string& kind,
                                        const std::shared_ptr<ComparatorModel>& model) {
  if (kind == "oracle") return std::make_unique<OracleScorer>();
  if (kind == "cosine") return std::make_unique<CosineScorer>();
  if (kind == "comparator") {
    if (!model) throw Error(ErrorKind::Configuration, "scorer 'comparator' needs a model");
    return std::make_unique<ComparatorScorer>(*model);
  }
  throw Error(ErrorKind::Configuration, "unknown scorer '" + kind + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "PCNN re-ranking core";

  static py::exception<Error> error(m, "PcnnError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object kind = py::str(std::string(to_string(e.kind())));
      PyErr_SetObject(error.ptr(), py::make_tuple(kind, e.what()).ptr());
    }
  });

  py::class_<EmbeddingStore, std::shared_ptr<EmbeddingStore>>(m, "EmbeddingStore")
      .def_static("load",
                  [](const std::filesystem::path& manifest, const std::filesystem::path& payload) {
                    return std::make_shared<EmbeddingStore>(EmbeddingStore::load(manifest, payload));
                  })
      .def("save", &EmbeddingStore::save)
      .def_property_readonly("tokens", &EmbeddingStore::tokens)
      .def_property_readonly("depth", &EmbeddingStore::depth)
      .def_property_readonly("num_classes", &EmbeddingStore::num_classes)
      .def_property_readonly("class_names",
                             [](const EmbeddingStore& s) { return s.manifest().classes; })
      .def("size", [](const EmbeddingStore& s, const std::string& split) {
        return s.size(split_of(split));
      })
      .def("ids", [](const EmbeddingStore& s, const std::string& split) {
        std::vector<RecordId> ids;
        for (const auto& r : s.records(split_of(split))) ids.push_back(r.id);
        return ids;
      })
      .def("labels", [](const EmbeddingStore& s, const std::string& split) {
        std::vector<ClassId> labels;
        for (const auto& r : s.records(split_of(split))) labels.push_back(r.label);
        return labels;
      })
      .def("grid", [](const EmbeddingStore& s, const std::string& split, RecordId id) {
        return grid_array(s.record(split_of(split), id));
      })
      .def("pooled", [](const EmbeddingStore& s, const std::string& split, RecordId id) {
        return pooled(s.record(split_of(split), id));
      });

  py::class_<ProbabilityTable, std::shared_ptr<ProbabilityTable>>(m, "ProbabilityTable")
      .def_static("load",
                  [](const std::filesystem::path& sidecar, const EmbeddingStore* store) {
                    return std::make_shared<ProbabilityTable>(
                        ProbabilityTable::load(sidecar, matrix_path_for(sidecar), store));
                  },
                  py::arg("sidecar"), py::arg("store") = nullptr)
      .def("save", [](const ProbabilityTable& t, const std::filesystem::path& sidecar) {
        t.save(sidecar, matrix_path_for(sidecar));
      })
      .def_property_readonly("split", [](const ProbabilityTable& t) { return to_string(t.split()); })
      .def_property_readonly("num_classes", &ProbabilityTable::num_classes)
      .def("__len__", &ProbabilityTable::size)
      .def("probs", [](const ProbabilityTable& t, RecordId id) { return t.at(id).probs; })
      .def("top_q", [](const ProbabilityTable& t, RecordId id, std::size_t q) {
        std::vector<std::pair<ClassId, double>> out;
        for (const auto& s : top_q(t.at(id), q)) out.emplace_back(s.label, s.prob);
        return out;
      })
      .def("topq_accuracy", [](const ProbabilityTable& t, const EmbeddingStore& s,
                               std::size_t q) { return topq_accuracy(t, s, q); });

  m.def("synth_gen", [](const std::string& spec_json) {
    const auto spec = SyntheticSpec::from_json(parse(spec_json));
    auto data = synth_gen(spec);
    auto store = std::make_shared<EmbeddingStore>(data.store);
    const auto clf = synthetic_classifier(spec, data.centroids);
    return py::make_tuple(store,
                          std::make_shared<ProbabilityTable>(clf.predict_all(data.store, Split::Train)),
                          std::make_shared<ProbabilityTable>(clf.predict_all(data.store, Split::Test)),
                          data.centroids);
  });

  py::class_<Index>(m, "ClassIndex")
      .def(py::init([](std::shared_ptr<EmbeddingStore> store) {
        auto index = std::make_shared<ClassIndex>(*store, Split::Train);
        return Index{std::move(store), std::move(index)};
      }))
      .def("nearest_in_class",
           [](const Index& ix, const std::vector<double>& query, ClassId label, std::size_t k,
              const std::vector<RecordId>& exclude) {
             std::vector<std::pair<RecordId, double>> out;
             for (const auto& n : ix.index->nearest_k_in_class(query, label, k, exclude)) {
               out.emplace_back(n.id, n.distance);
             }
             return out;
           },
           py::arg("query"), py::arg("label"), py::arg("k") = 1,
           py::arg("exclude") = std::vector<RecordId>{})
      .def("topk", [](const Index& ix, const std::vector<double>& query, std::size_t k) {
        std::vector<std::tuple<RecordId, ClassId, double>> out;
        for (const auto& n : ix.index->topk_global(query, k)) {
          out.emplace_back(n.id, n.label, n.distance);
        }
        return out;
      });

  m.def(
      "sample_pairs",
      [](const Index& ix, const ProbabilityTable& probs, const std::string& sampler_json) {
        const auto cfg = sampler_from_json(parse(sampler_json));
        const PairSet set = probs.split() == Split::Train
                                ? sample_train(*ix.store, probs, *ix.index, cfg)
                                : sample_eval(*ix.store, probs, *ix.index, cfg);
        std::vector<std::tuple<RecordId, RecordId, bool, ClassId, std::size_t>> out;
        for (const auto& p : set.pairs) {
          out.emplace_back(p.query, p.neighbor, p.positive, p.source_class, p.rank);
        }
        return out;
      },
      py::arg("index"), py::arg("probs"), py::arg("sampler_json") = "");

  py::class_<ComparatorModel, std::shared_ptr<ComparatorModel>>(m, "Comparator")
      .def_static("init",
                  [](const std::string& config_json, std::uint64_t seed) {
                    return std::make_shared<ComparatorModel>(ComparatorModel::init(
                        ComparatorConfig::from_json(parse(config_json)), seed));
                  })
      .def_static("load",
                  [](const std::filesystem::path& header) {
                    return std::make_shared<ComparatorModel>(
                        ComparatorModel::load(header, matrix_path_for(header)));
                  })
      .def("config_json", [](const ComparatorModel& c) { return c.config().to_json().dump(); })
      .def("score",
           [](const ComparatorModel& c, const EmbeddingStore& store, const std::string& split,
              RecordId query, const std::vector<RecordId>& train_neighbors) {
             const auto& q = store.record(split_of(split), query);
             std::vector<const EmbeddingRecord*> ns;
             for (RecordId id : train_neighbors) ns.push_back(&store.record(Split::Train, id));
             return ComparatorScorer(c).score(q, ns);
           });

  m.def(
      "evaluate_rerank",
      [](const Index& ix, const ProbabilityTable& probs, const std::string& scorer,
         std::shared_ptr<ComparatorModel> model, const std::string& rerank_json) {
        const auto cfg = RerankConfig::from_json(parse(rerank_json));
        const auto s = make_scorer(scorer, model);
        std::vector<RankedResult> results;
        const auto rep = evaluate_rerank(*ix.store, probs.split(), probs, *ix.index, *s, cfg,
                                         &results);
        Json ranked = Json::array();
        for (const auto& r : results) ranked.push_back(r.to_json());
        return py::make_tuple(rep.to_json().dump(), ranked.dump());
      },
      py::arg("index"), py::arg("probs"), py::arg("scorer") = "comparator",
      py::arg("model") = nullptr, py::arg("rerank_json") = "");

  m.def(
      "knn_classify",
      [](const Index& ix, const std::string& split, RecordId query, std::size_t k,
         const std::string& scorer, std::shared_ptr<ComparatorModel> model) {
        const auto s = make_scorer(scorer, model);
        const auto r = knn_classify(ix.store->record(split_of(split), query), *ix.index,
                                    *ix.store, *s, k);
        std::vector<RecordId> ids;
        for (const auto& n : r.neighbors) ids.push_back(n.id);
        return py::make_tuple(r.label, ids, r.scores);
      },
      py::arg("index"), py::arg("split"), py::arg("query"), py::arg("k") = 20,
      py::arg("scorer") = "cosine", py::arg("model") = nullptr);

  m.def("sanity_suite", [](const ComparatorModel& model, const EmbeddingStore& store,
                           const std::string& split, std::uint64_t seed) {
    return sanity_suite(model, store, split_of(split), seed).to_json().dump();
  });

  m.def(
      "run_experiment",
      [](const std::string& config_json, const std::filesystem::path& base) {
        const auto cfg = ExperimentConfig::from_json(parse(config_json), base);
        ExperimentData data = [&] {
          py::gil_scoped_release release;
          return load_experiment_data(cfg);
        }();
        RunResult result = [&] {
          py::gil_scoped_release release;
          return run(cfg, data);
        }();
        Json ranked = Json::array();
        for (const auto& r : result.ranked) ranked.push_back(r.to_json());
        return py::make_tuple(result.to_json(cfg).dump(), ranked.dump(),
                              std::make_shared<ComparatorModel>(std::move(result.model)));
      },
      py::arg("config_json"), py::arg("base") = std::filesystem::path{});

  m.def("export_explanations", [](const std::string& ranked_json, const EmbeddingStore& store) {
    std::vector<RankedResult> results;
    for (const auto& j : Json::parse(ranked_json)) results.push_back(RankedResult::from_json(j));
    return export_explanations(results, store).dump();
  });
}
