#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace pcnn {

using RecordId = std::int64_t;
using ClassId = std::int32_t;

enum class Split { Train, Test };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct RecordMeta {
  RecordId id = 0;
  ClassId label = 0;
  Split split = Split::Train;
  friend bool operator==(const RecordMeta&, const RecordMeta&) = default;
};

/// Describes a binary payload of token grids. Records are listed in payload
/// order; class ids are positions in `classes`.
struct DatasetManifest {
  std::string name;
  std::vector<std::string> classes;
  std::size_t tokens = 0;
  std::size_t depth = 0;
  std::vector<RecordMeta> records;
  std::string checksum;  // "crc32:xxxxxxxx" over the payload bytes

  std::size_t num_classes() const { return classes.size(); }
  std::size_t count(Split split) const;
  std::size_t record_bytes() const { return tokens * depth * sizeof(float); }
  std::uint64_t payload_bytes() const {
    return static_cast<std::uint64_t>(records.size()) * record_bytes();
  }

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  static DatasetManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// One image: a T x D token grid plus identity. The grid points into storage
/// owned by the store and stays valid as long as any copy of the store lives.
struct EmbeddingRecord {
  RecordId id = 0;
  ClassId label = 0;
  Split split = Split::Train;
  std::size_t tokens = 0;
  std::size_t depth = 0;
  std::span<const float> grid;

  float at(std::size_t token, std::size_t feature) const {
    return grid[token * depth + feature];
  }
};

/// Mean of the token rows, computed in double.
std::vector<double> pooled(const EmbeddingRecord& record);

std::string crc32_hex(std::span<const std::byte> bytes);

/// Immutable, validated store of token grids. Copies share storage.
class EmbeddingStore {
 public:
  /// Validates `payload` against `manifest` (length, class ids, checksum,
  /// finiteness) and builds the lookup tables. Throws IngestionError with the
  /// offending byte offset.
  static EmbeddingStore import(DatasetManifest manifest,
                               std::span<const std::byte> payload);
  static EmbeddingStore load(const std::filesystem::path& manifest_path,
                             const std::filesystem::path& payload_path);
  /// Builds a store from in-memory grids laid out in manifest order and
  /// stamps the checksum.
  static EmbeddingStore from_grids(DatasetManifest manifest,
                                   std::vector<float> values);

  std::vector<std::byte> export_payload() const;
  void save(const std::filesystem::path& manifest_path,
            const std::filesystem::path& payload_path) const;

  const DatasetManifest& manifest() const { return *manifest_; }
  std::size_t tokens() const { return manifest_->tokens; }
  std::size_t depth() const { return manifest_->depth; }
  std::size_t num_classes() const { return manifest_->num_classes(); }

  std::span<const EmbeddingRecord> records(Split split) const;
  std::size_t size(Split split) const { return records(split).size(); }
  bool contains(Split split, RecordId id) const;
  const EmbeddingRecord& record(Split split, RecordId id) const;

  /// Records of one class in ascending id order. A train-split class with no
  /// records raises an EmptyClass error since retrieval is impossible.
  std::vector<const EmbeddingRecord*> by_class(Split split, ClassId label) const;

 private:
  EmbeddingStore() = default;
  void build_tables();

  std::shared_ptr<const DatasetManifest> manifest_;
  std::shared_ptr<const std::vector<float>> values_;
  std::vector<EmbeddingRecord> train_;
  std::vector<EmbeddingRecord> test_;
  std::unordered_map<RecordId, std::size_t> train_index_;
  std::unordered_map<RecordId, std::size_t> test_index_;
};

/// Little-endian float32 encoding helpers shared by every binary file.
std::vector<std::byte> encode_f32(std::span<const float> values);
std::vector<float> decode_f32(std::span<const std::byte> bytes);
std::vector<std::byte> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes);
nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace pcnn
