#pragma once

#include <stdexcept>
#include <string>

namespace multiad {

/// Base for every error the library raises. `kind()` is a short stable token
/// used by the CLI for machine-parsable failure lines.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what) : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error("shape", what) {}
};

struct ValueError : Error {
  explicit ValueError(const std::string& what) : Error("value", what) {}
};

struct StateError : Error {
  explicit StateError(const std::string& what) : Error("state", what) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error("format", what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io", what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

}  // namespace multiad
