#pragma once

#include <stdexcept>
#include <string>

namespace segloo {

// Error categories map one-to-one onto C API status codes and CLI exit codes.
enum class ErrorKind {
  kConfig,   // bad arguments, malformed configs, shape mismatches
  kData,     // malformed or missing input files, checksum mismatches
  kNumeric,  // non-finite values, failed numeric preconditions
  kIo,       // filesystem failures
  kFormat,   // magic/version mismatch in binary containers
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool ok, ErrorKind kind, const std::string& what) {
  if (!ok) fail(kind, what);
}

}  // namespace segloo
