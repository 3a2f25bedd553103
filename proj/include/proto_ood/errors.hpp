#pragma once

#include <stdexcept>
#include <string>

namespace proto_ood {

/// Operand shapes disagree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value is outside an operation's admissible range.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// An operation needs state that has not been established yet.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// API contract violated by the caller (e.g. backward without a cached forward).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration, detected before any work starts.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A file's content could not be parsed.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file parses but violates the format contract (magic, version, widths).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Synthetic data could not satisfy placement constraints within the retry budget.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf showed up where finite values are guaranteed; always fatal.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace proto_ood
