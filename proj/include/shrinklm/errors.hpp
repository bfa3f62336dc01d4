#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace shrinklm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Token id or layer index outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// API misuse: non-scalar backward, consumed graph, bad optimizer input.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Unreadable or missing input files.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Malformed serialized data (checkpoints, task files, ids).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Config validation failure. Carries every violated constraint, not just the first.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations)
      : Error(join(violations)), violations_(std::move(violations)) {}
  explicit ConfigError(const std::string& violation)
      : ConfigError(std::vector<std::string>{violation}) {}

  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid configuration:";
    for (const auto& s : v) out += "\n  - " + s;
    return out;
  }
  std::vector<std::string> violations_;
};

/// Throws ConfigError if any violations were collected.
inline void throw_if_violations(std::vector<std::string> violations) {
  if (!violations.empty()) throw ConfigError(std::move(violations));
}

}  // namespace shrinklm
