#pragma once

#include <stdexcept>
#include <string>

namespace wsireg {

enum class ErrorKind {
  InvalidArgument,
  Io,
  Format,
  Singular,
  Degenerate,
  CoverageGap,
  FitFailure,
  Validation,
};

// Every library failure is reported through this exception; the kind drives
// CLI exit codes and HTTP status mapping.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace wsireg
