#pragma once

#include <stdexcept>
#include <string>

namespace mepl {

// Error categories map onto distinct CLI exit codes (see tools/mepl.cpp).
enum class ErrorKind { config = 2, structural = 3, capacity = 4, protocol = 5, numeric = 6 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Unknown names, malformed config, missing prerequisites.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

/// Tensor or architecture shapes that do not line up.
class StructuralError : public Error {
 public:
  explicit StructuralError(const std::string& what) : Error(ErrorKind::structural, what) {}
};

/// A sequence or teacher count exceeds what the generator was built for.
class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& what) : Error(ErrorKind::capacity, what) {}
};

/// Evaluation protocol violations (e.g. methods scored on different tuples).
class ProtocolError : public Error {
 public:
  explicit ProtocolError(const std::string& what) : Error(ErrorKind::protocol, what) {}
};

/// Training that cannot recover from non-finite losses.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

}  // namespace mepl
