#include "gsbi/error.hpp"

namespace gsbi {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::EmptyScene: return "empty-scene";
    case ErrorKind::DegeneratePosterior: return "degenerate-posterior";
    case ErrorKind::Io: return "io";
    case ErrorKind::Schema: return "schema";
    case ErrorKind::Divergence: return "divergence";
  }
  return "unknown";
}

}  // namespace gsbi
