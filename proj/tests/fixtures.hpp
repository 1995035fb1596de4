#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pcnn/embedstore.hpp"
#include "pcnn/rng.hpp"

namespace pcnn::testing {

/// Manifest with `train`/`test` records per class, ids counting from 0 across
/// both splits, train records first.
inline DatasetManifest make_manifest(std::size_t classes, std::vector<std::size_t> train,
                                     std::vector<std::size_t> test, std::size_t tokens,
                                     std::size_t depth) {
  DatasetManifest m;
  m.name = "fixture";
  m.tokens = tokens;
  m.depth = depth;
  for (std::size_t c = 0; c < classes; ++c) m.classes.push_back("c" + std::to_string(c));
  RecordId id = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < train[c]; ++i) {
      m.records.push_back({id++, static_cast<ClassId>(c), Split::Train});
    }
  }
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < test[c]; ++i) {
      m.records.push_back({id++, static_cast<ClassId>(c), Split::Test});
    }
  }
  return m;
}

inline DatasetManifest make_manifest(std::size_t classes, std::size_t train,
                                     std::size_t test, std::size_t tokens,
                                     std::size_t depth) {
  return make_manifest(classes, std::vector<std::size_t>(classes, train),
                       std::vector<std::size_t>(classes, test), tokens, depth);
}

/// Store with Gaussian grids; class c is shifted by `spread * c` on feature c % depth.
inline EmbeddingStore random_store(DatasetManifest m, std::uint64_t seed, double spread = 0.0) {
  Rng rng(seed);
  std::vector<float> values;
  for (const auto& r : m.records) {
    for (std::size_t t = 0; t < m.tokens; ++t) {
      for (std::size_t d = 0; d < m.depth; ++d) {
        double v = rng.normal();
        if (d == static_cast<std::size_t>(r.label) % m.depth) v += spread * r.label;
        values.push_back(static_cast<float>(v));
      }
    }
  }
  return EmbeddingStore::from_grids(std::move(m), std::move(values));
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("pcnn-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace pcnn::testing
