#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace depthlab {

// Every failure raised by the library derives from Error so callers can
// catch one type; the subclasses map onto the error kinds the CLI reports.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Non-finite value produced by a kernel.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Violated precondition (caller bug or unsupported request).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Bad user data, e.g. token ids outside the vocabulary.
class InputError : public Error {
 public:
  using Error::Error;
};

class PlanError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ResourceError : public Error {
 public:
  using Error::Error;
};

// Every token of a statistic was excluded (e.g. all zero-norm vectors).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step);
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Raised by the experiment pipeline; `stage` names the step that failed
// (e.g. "influence", "sweep", "write").
class PipelineError : public Error {
 public:
  PipelineError(std::string stage, const std::string& what);
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace depthlab
