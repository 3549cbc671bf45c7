#pragma once

#include <stdexcept>
#include <string>

namespace ron {

enum class ErrorKind {
  io,           // missing or unreadable file
  parse,        // malformed manifest, plan or dataset header
  checksum,     // tensor payload does not match its recorded checksum
  unsupported,  // layer tag or layer arrangement not handled
  shape,        // dimension or shape-chain mismatch
  plan,         // compression plan outside its domain
  numerical,    // singular system, rank deficiency, SVD failure
};

// Process exit code for each error kind, as used by the command-line tool.
//   0 ok, 2 I/O or parse, 3 shape, 4 plan domain, 5 numerical failure
int exit_code(ErrorKind kind) noexcept;

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::io, w) {}
};
struct ParseError : Error {
  explicit ParseError(const std::string& w) : Error(ErrorKind::parse, w) {}
};
struct ChecksumError : Error {
  explicit ChecksumError(const std::string& w) : Error(ErrorKind::checksum, w) {}
};
struct UnsupportedError : Error {
  explicit UnsupportedError(const std::string& w) : Error(ErrorKind::unsupported, w) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorKind::shape, w) {}
};
struct PlanError : Error {
  explicit PlanError(const std::string& w) : Error(ErrorKind::plan, w) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(ErrorKind::numerical, w) {}
};

// Throws the subclass matching `kind`, so callers can add context to a
// message without losing the error type.
[[noreturn]] void throw_error(ErrorKind kind, const std::string& what);

}  // namespace ron
