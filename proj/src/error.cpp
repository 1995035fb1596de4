#include "pcnn/error.hpp"

namespace pcnn {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::DegenerateBatch: return "degenerate_batch";
    case ErrorKind::Configuration: return "configuration";
    case ErrorKind::Ingestion: return "ingestion";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::EmptyClass: return "empty_class";
    case ErrorKind::InsufficientCandidates: return "insufficient_candidates";
    case ErrorKind::Training: return "training";
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

}  // namespace pcnn
