#pragma once

#include <stdexcept>
#include <string>

namespace meta {

/// Failure category. The CLI maps these onto process exit codes.
enum class ErrorKind {
  invalid_argument,
  shape,
  data,
  numeric,
  missing_artifact,
  state,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace meta
