#include "pcnn/embedstore.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <unordered_set>

#include "pcnn/error.hpp"

namespace pcnn {

namespace {
constexpr const char* kManifestFormat = "pcnn.embeddings.v1";
}

std::string to_string(Split split) {
  return split == Split::Train ? "train" : "test";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "test") return Split::Test;
  throw Error(ErrorKind::Validation, "unknown split '" + name + "'");
}

std::size_t DatasetManifest::count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(),
                    [split](const RecordMeta& r) { return r.split == split; }));
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records) {
    recs.push_back({{"id", r.id}, {"class", r.label}, {"split", to_string(r.split)}});
  }
  return {{"format", kManifestFormat},
          {"dataset", name},
          {"classes", classes},
          {"tokens", tokens},
          {"depth", depth},
          {"counts", {{"train", count(Split::Train)}, {"test", count(Split::Test)}}},
          {"records", std::move(recs)},
          {"checksum", checksum}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", std::string{}) != kManifestFormat) {
      throw Error(ErrorKind::Validation,
                  "manifest format must be '" + std::string(kManifestFormat) + "'");
    }
    DatasetManifest m;
    m.name = j.at("dataset").get<std::string>();
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.tokens = j.at("tokens").get<std::size_t>();
    m.depth = j.at("depth").get<std::size_t>();
    m.checksum = j.at("checksum").get<std::string>();
    for (const auto& r : j.at("records")) {
      m.records.push_back(RecordMeta{r.at("id").get<RecordId>(),
                                     r.at("class").get<ClassId>(),
                                     split_from_string(r.at("split").get<std::string>())});
    }
    const auto& counts = j.at("counts");
    for (Split s : {Split::Train, Split::Test}) {
      const auto declared = counts.at(to_string(s)).get<std::size_t>();
      if (declared != m.count(s)) {
        throw Error(ErrorKind::Validation,
                    "manifest declares " + std::to_string(declared) + " " +
                        to_string(s) + " records but lists " +
                        std::to_string(m.count(s)));
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Validation, std::string("malformed manifest: ") + e.what());
  }
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  return from_json(read_json(path));
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  write_json(path, to_json());
}

std::vector<double> pooled(const EmbeddingRecord& record) {
  std::vector<double> out(record.depth, 0.0);
  for (std::size_t t = 0; t < record.tokens; ++t) {
    for (std::size_t d = 0; d < record.depth; ++d) out[d] += record.at(t, d);
  }
  const double inv = 1.0 / static_cast<double>(record.tokens);
  for (double& v : out) v *= inv;
  return out;
}

std::string crc32_hex(std::span<const std::byte> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large payloads in chunks.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + pos),
                static_cast<uInt>(n));
    pos += n;
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return std::string("crc32:") + buf;
}

std::vector<std::byte> encode_f32(std::span<const float> values) {
  std::vector<std::byte> out(values.size() * sizeof(float));
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) {
      out[i * 4 + b] = static_cast<std::byte>((bits >> (8 * b)) & 0xFFu);
    }
  }
  return out;
}

std::vector<float> decode_f32(std::span<const std::byte> bytes) {
  std::vector<float> out(bytes.size() / sizeof(float));
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    }
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto n = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> bytes(n);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (!in) throw Error(ErrorKind::Io, "short read on " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Validation, path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

EmbeddingStore EmbeddingStore::import(DatasetManifest manifest,
                                      std::span<const std::byte> payload) {
  if (manifest.tokens == 0 || manifest.depth == 0) {
    throw IngestionError("manifest needs positive token count and depth", 0);
  }
  {
    std::set<std::string> names(manifest.classes.begin(), manifest.classes.end());
    if (names.size() != manifest.classes.size() || manifest.classes.empty()) {
      throw IngestionError("class names must be unique and non-empty", 0);
    }
  }
  const std::uint64_t rec_bytes = manifest.record_bytes();
  const std::uint64_t expected = manifest.payload_bytes();

  std::unordered_set<RecordId> seen_train, seen_test;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const RecordMeta& r = manifest.records[i];
    const std::uint64_t offset = i * rec_bytes;
    if (r.label < 0 || static_cast<std::size_t>(r.label) >= manifest.num_classes()) {
      throw IngestionError("record " + std::to_string(r.id) + " has unknown class id " +
                               std::to_string(r.label),
                           offset);
    }
    auto& seen = r.split == Split::Train ? seen_train : seen_test;
    if (!seen.insert(r.id).second) {
      throw IngestionError("duplicate record id " + std::to_string(r.id) + " in " +
                               to_string(r.split) + " split",
                           offset);
    }
  }
  if (payload.size() < expected) {
    const std::uint64_t index = payload.size() / rec_bytes;
    throw IngestionError("payload truncated: record #" + std::to_string(index) +
                             " (id " + std::to_string(manifest.records[index].id) +
                             ") needs " + std::to_string(rec_bytes) +
                             " bytes but the payload ends at " +
                             std::to_string(payload.size()),
                         index * rec_bytes);
  }
  if (payload.size() > expected) {
    throw IngestionError("payload has " + std::to_string(payload.size() - expected) +
                             " trailing bytes",
                         expected);
  }
  const std::string actual = crc32_hex(payload);
  if (actual != manifest.checksum) {
    throw IngestionError("checksum mismatch: manifest says " + manifest.checksum +
                             ", payload is " + actual,
                         0);
  }
  std::vector<float> values = decode_f32(payload);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw IngestionError("non-finite value in record " +
                               std::to_string(manifest.records[i / (rec_bytes / 4)].id),
                           i * sizeof(float));
    }
  }
  EmbeddingStore store;
  store.manifest_ = std::make_shared<const DatasetManifest>(std::move(manifest));
  store.values_ = std::make_shared<const std::vector<float>>(std::move(values));
  store.build_tables();
  return store;
}

EmbeddingStore EmbeddingStore::load(const std::filesystem::path& manifest_path,
                                    const std::filesystem::path& payload_path) {
  auto manifest = DatasetManifest::load(manifest_path);
  auto payload = read_file(payload_path);
  return import(std::move(manifest), payload);
}

EmbeddingStore EmbeddingStore::from_grids(DatasetManifest manifest,
                                          std::vector<float> values) {
  const auto bytes = encode_f32(values);
  manifest.checksum = crc32_hex(bytes);
  return import(std::move(manifest), bytes);
}

std::vector<std::byte> EmbeddingStore::export_payload() const {
  return encode_f32(*values_);
}

void EmbeddingStore::save(const std::filesystem::path& manifest_path,
                          const std::filesystem::path& payload_path) const {
  manifest_->save(manifest_path);
  write_file(payload_path, export_payload());
}

void EmbeddingStore::build_tables() {
  const std::size_t per = manifest_->tokens * manifest_->depth;
  std::span<const float> all(*values_);
  for (std::size_t i = 0; i < manifest_->records.size(); ++i) {
    const RecordMeta& m = manifest_->records[i];
    EmbeddingRecord rec{m.id, m.label, m.split, manifest_->tokens, manifest_->depth,
                        all.subspan(i * per, per)};
    if (m.split == Split::Train) {
      train_index_.emplace(m.id, train_.size());
      train_.push_back(rec);
    } else {
      test_index_.emplace(m.id, test_.size());
      test_.push_back(rec);
    }
  }
}

std::span<const EmbeddingRecord> EmbeddingStore::records(Split split) const {
  return split == Split::Train ? std::span<const EmbeddingRecord>(train_)
                               : std::span<const EmbeddingRecord>(test_);
}

bool EmbeddingStore::contains(Split split, RecordId id) const {
  const auto& idx = split == Split::Train ? train_index_ : test_index_;
  return idx.contains(id);
}

const EmbeddingRecord& EmbeddingStore::record(Split split, RecordId id) const {
  const auto& idx = split == Split::Train ? train_index_ : test_index_;
  auto it = idx.find(id);
  if (it == idx.end()) {
    throw Error(ErrorKind::Validation, "no record " + std::to_string(id) + " in " +
                                           to_string(split) + " split");
  }
  return records(split)[it->second];
}

std::vector<const EmbeddingRecord*> EmbeddingStore::by_class(Split split,
                                                             ClassId label) const {
  if (label < 0 || static_cast<std::size_t>(label) >= num_classes()) {
    throw Error(ErrorKind::Validation, "class " + std::to_string(label) +
                                           " does not exist (" +
                                           std::to_string(num_classes()) + " classes)");
  }
  std::vector<const EmbeddingRecord*> out;
  for (const auto& r : records(split)) {
    if (r.label == label) out.push_back(&r);
  }
  if (out.empty() && split == Split::Train) {
    throw Error(ErrorKind::EmptyClass, "class " + std::to_string(label) + " ('" +
                                           manifest_->classes[label] +
                                           "') has no training records");
  }
  std::sort(out.begin(), out.end(),
            [](const auto* a, const auto* b) { return a->id < b->id; });
  return out;
}

}  // namespace pcnn
