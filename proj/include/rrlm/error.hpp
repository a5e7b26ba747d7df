#pragma once

#include <stdexcept>
#include <string>

namespace rrlm {

enum class ErrorKind {
  InvalidArgument,
  Dimension,
  Index,
  Rank,
  EmptyPool,
  BatchSize,
  Parse,
  Io,
  Format,
  Divergence,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

}  // namespace rrlm
