#include "pcnn/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pcnn/error.hpp"
#include "pcnn/nnindex.hpp"
#include "pcnn/rng.hpp"

namespace pcnn {

namespace {
constexpr const char* kProbFormat = "pcnn.probabilities.v1";

void validate_row(const ClassifierOutput& row, std::size_t classes, double tol) {
  if (row.probs.size() != classes) {
    throw Error(ErrorKind::Validation,
                "row for record " + std::to_string(row.query) + " has " +
                    std::to_string(row.probs.size()) + " entries, expected " +
                    std::to_string(classes));
  }
  double s = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    const double p = row.probs[c];
    if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
      throw Error(ErrorKind::Validation,
                  "row for record " + std::to_string(row.query) + ": probability " +
                      std::to_string(p) + " at class " + std::to_string(c) +
                      " is outside [0, 1]");
    }
    s += p;
  }
  if (std::abs(s - 1.0) > tol) {
    throw Error(ErrorKind::Validation, "row for record " + std::to_string(row.query) +
                                           " sums to " + std::to_string(s));
  }
}
}  // namespace

TopQPrediction top_q(const ClassifierOutput& output, std::size_t q) {
  const std::size_t c = output.probs.size();
  if (q < 1 || q > c) {
    throw Error(ErrorKind::Configuration,
                "Q = " + std::to_string(q) + " outside [1, " + std::to_string(c) + "]");
  }
  std::vector<ClassScore> all(c);
  for (std::size_t i = 0; i < c; ++i) {
    all[i] = ClassScore{static_cast<ClassId>(i), output.probs[i]};
  }
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(q),
                    all.end(), [](const ClassScore& a, const ClassScore& b) {
                      if (a.prob != b.prob) return a.prob > b.prob;
                      return a.label < b.label;
                    });
  all.resize(q);
  return all;
}

ProbabilityTable::ProbabilityTable(Split split, std::size_t num_classes,
                                   std::vector<ClassifierOutput> rows,
                                   double tolerance)
    : split_(split), num_classes_(num_classes), rows_(std::move(rows)) {
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    validate_row(rows_[i], num_classes_, tolerance);
    if (!index_.emplace(rows_[i].query, i).second) {
      throw Error(ErrorKind::Validation,
                  "duplicate row for record " + std::to_string(rows_[i].query));
    }
  }
}

const ClassifierOutput& ProbabilityTable::at(RecordId id) const {
  auto it = index_.find(id);
  if (it == index_.end()) {
    throw Error(ErrorKind::Validation,
                "no classifier output for record " + std::to_string(id));
  }
  return rows_[it->second];
}

void ProbabilityTable::save(const std::filesystem::path& sidecar,
                            const std::filesystem::path& matrix) const {
  std::vector<float> values;
  values.reserve(rows_.size() * num_classes_);
  std::vector<RecordId> ids;
  for (const auto& row : rows_) {
    ids.push_back(row.query);
    for (double p : row.probs) values.push_back(static_cast<float>(p));
  }
  const auto bytes = encode_f32(values);
  write_file(matrix, bytes);
  write_json(sidecar, {{"format", kProbFormat},
                       {"split", to_string(split_)},
                       {"rows", rows_.size()},
                       {"classes", num_classes_},
                       {"record_ids", ids},
                       {"checksum", crc32_hex(bytes)}});
}

ProbabilityTable ProbabilityTable::load(const std::filesystem::path& sidecar,
                                        const std::filesystem::path& matrix,
                                        const EmbeddingStore* store) {
  const auto meta = read_json(sidecar);
  if (meta.value("format", std::string{}) != kProbFormat) {
    throw Error(ErrorKind::Validation, sidecar.string() + ": not a probability sidecar");
  }
  const Split split = split_from_string(meta.at("split").get<std::string>());
  const auto rows = meta.at("rows").get<std::size_t>();
  const auto classes = meta.at("classes").get<std::size_t>();
  const auto ids = meta.at("record_ids").get<std::vector<RecordId>>();
  const auto bytes = read_file(matrix);
  if (ids.size() != rows || bytes.size() != rows * classes * sizeof(float)) {
    throw Error(ErrorKind::Validation,
                matrix.string() + ": expected " + std::to_string(rows) + " x " +
                    std::to_string(classes) + " float32 matrix, got " +
                    std::to_string(bytes.size()) + " bytes");
  }
  if (crc32_hex(bytes) != meta.at("checksum").get<std::string>()) {
    throw Error(ErrorKind::Validation, matrix.string() + ": checksum mismatch");
  }
  if (store) {
    if (rows != store->size(split)) {
      throw Error(ErrorKind::Validation,
                  "probability file has " + std::to_string(rows) + " rows, " +
                      to_string(split) + " split has " +
                      std::to_string(store->size(split)));
    }
    if (classes != store->num_classes()) {
      throw Error(ErrorKind::Validation, "probability file has " +
                                             std::to_string(classes) + " classes, store has " +
                                             std::to_string(store->num_classes()));
    }
  }
  const auto values = decode_f32(bytes);
  std::vector<ClassifierOutput> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    out[r].query = ids[r];
    out[r].probs.assign(values.begin() + static_cast<std::ptrdiff_t>(r * classes),
                        values.begin() + static_cast<std::ptrdiff_t>((r + 1) * classes));
    if (store && !store->contains(split, ids[r])) {
      throw Error(ErrorKind::Validation, "probability row " + std::to_string(r) +
                                             " references unknown record " +
                                             std::to_string(ids[r]));
    }
    try {
      validate_row(out[r], classes, 1e-4);
    } catch (const Error& e) {
      throw Error(ErrorKind::Validation,
                  matrix.string() + ": row " + std::to_string(r) + ": " + e.what());
    }
  }
  return ProbabilityTable(split, classes, std::move(out), 1e-4);
}

double topq_accuracy(const ProbabilityTable& table, const EmbeddingStore& store,
                     std::size_t q) {
  if (table.size() == 0) return 0.0;
  std::size_t hits = 0;
  for (const auto& row : table.rows()) {
    const ClassId truth = store.record(table.split(), row.query).label;
    const auto top = top_q(row, q);
    hits += std::any_of(top.begin(), top.end(),
                        [truth](const ClassScore& s) { return s.label == truth; });
  }
  return static_cast<double>(hits) / static_cast<double>(table.size());
}

// ---------------------------------------------------------------------------

SyntheticClassifier::SyntheticClassifier(std::vector<std::vector<double>> centroids,
                                         double temperature,
                                         CorruptionConfig corruption)
    : centroids_(std::move(centroids)),
      temperature_(temperature),
      corruption_(corruption) {
  if (!(temperature_ > 0.0)) {
    throw Error(ErrorKind::Configuration, "classifier temperature must be positive");
  }
  if (centroids_.size() < 2) {
    throw Error(ErrorKind::Configuration, "classifier needs at least 2 classes");
  }
  if (corruption_.rate < 0.0 || corruption_.rate > 1.0) {
    throw Error(ErrorKind::Configuration, "corruption rate must be in [0, 1]");
  }
}

ClassifierOutput SyntheticClassifier::predict(const EmbeddingRecord& record) const {
  const auto p = pooled(record);
  const std::size_t c = centroids_.size();
  std::vector<double> logits(c);
  for (std::size_t k = 0; k < c; ++k) {
    if (centroids_[k].size() != p.size()) {
      throw Error(ErrorKind::Dimension, "centroid depth does not match record depth");
    }
    logits[k] = -squared_l2(p, centroids_[k]) / temperature_;
  }
  if (corruption_.rate > 0.0) {
    Rng rng = Rng::stream(corruption_.seed, static_cast<std::uint64_t>(record.id));
    if (rng.uniform() < corruption_.rate) {
      const std::size_t depth = std::min(corruption_.depth, c);
      if (depth >= 2) {
        std::vector<std::size_t> order(c);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          return logits[a] > logits[b];
        });
        const std::size_t partner = order[1 + rng.below(depth - 1)];
        std::swap(logits[order[0]], logits[partner]);
      }
    }
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  ClassifierOutput out{record.id, std::vector<double>(c)};
  double z = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    out.probs[k] = std::exp(logits[k] - mx);
    z += out.probs[k];
  }
  for (double& v : out.probs) v /= z;
  return out;
}

ProbabilityTable SyntheticClassifier::predict_all(const EmbeddingStore& store,
                                                  Split split) const {
  std::vector<ClassifierOutput> rows;
  for (const auto& r : store.records(split)) rows.push_back(predict(r));
  return ProbabilityTable(split, centroids_.size(), std::move(rows));
}

}  // namespace pcnn
