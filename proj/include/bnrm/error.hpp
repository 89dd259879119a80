#pragma once

#include <stdexcept>
#include <string>

namespace bnrm {

/// Incompatible tensor shapes or vector lengths.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A primitive was evaluated outside its mathematical domain, or produced a
/// non-finite value from finite inputs.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Misuse of the computation graph (backward on a detached or non-scalar output).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid or incomplete run configuration. CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed, missing, or dimensionally inconsistent data. CLI exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training diverged (non-finite loss). CLI exit code 4.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace bnrm
