#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pcnn {

enum class ErrorKind {
  Dimension,
  DegenerateBatch,
  Configuration,
  Ingestion,
  Validation,
  EmptyClass,
  InsufficientCandidates,
  Training,
  Usage,
  Io,
};

std::string_view to_string(ErrorKind kind);

/// Base exception for every failure raised by the library. The kind is
/// machine-readable and is what the CLI prints in its error JSON.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Ingestion failures carry the byte offset in the payload where the problem
/// was detected.
class IngestionError : public Error {
 public:
  IngestionError(const std::string& message, std::uint64_t offset)
      : Error(ErrorKind::Ingestion,
              message + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace pcnn
