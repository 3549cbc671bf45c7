#include "ron/errors.hpp"

namespace ron {

int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::io:
    case ErrorKind::parse:
    case ErrorKind::checksum:
    case ErrorKind::unsupported:
      return 2;
    case ErrorKind::shape:
      return 3;
    case ErrorKind::plan:
      return 4;
    case ErrorKind::numerical:
      return 5;
  }
  return 1;
}

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::io: return "io";
    case ErrorKind::parse: return "parse";
    case ErrorKind::checksum: return "checksum";
    case ErrorKind::unsupported: return "unsupported";
    case ErrorKind::shape: return "shape";
    case ErrorKind::plan: return "plan";
    case ErrorKind::numerical: return "numerical";
  }
  return "unknown";
}

void throw_error(ErrorKind kind, const std::string& what) {
  switch (kind) {
    case ErrorKind::io: throw IoError(what);
    case ErrorKind::parse: throw ParseError(what);
    case ErrorKind::checksum: throw ChecksumError(what);
    case ErrorKind::unsupported: throw UnsupportedError(what);
    case ErrorKind::shape: throw ShapeError(what);
    case ErrorKind::plan: throw PlanError(what);
    case ErrorKind::numerical: throw NumericalError(what);
  }
  throw Error(kind, what);
}

}  // namespace ron
