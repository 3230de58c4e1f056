#pragma once

#include <stdexcept>
#include <string>

namespace poselift {

// Coarse categories used by the command line tool to pick an exit code.
enum class ErrorCategory { Config = 2, Io = 3, Data = 4, Numeric = 5 };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

#define POSELIFT_DEFINE_ERROR(Name, Category)                          \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what)                             \
        : Error(ErrorCategory::Category, #Name ": " + what) {}         \
  };

// Topology and pose data.
POSELIFT_DEFINE_ERROR(TopologyError, Data)
POSELIFT_DEFINE_ERROR(CycleError, Data)
POSELIFT_DEFINE_ERROR(JointIndexError, Data)
POSELIFT_DEFINE_ERROR(DuplicateEdgeError, Data)
POSELIFT_DEFINE_ERROR(DegeneratePoseError, Data)
POSELIFT_DEFINE_ERROR(FormatError, Data)
POSELIFT_DEFINE_ERROR(TopologyMismatchError, Data)
POSELIFT_DEFINE_ERROR(ShapeMismatchError, Data)
POSELIFT_DEFINE_ERROR(LengthMismatchError, Data)
POSELIFT_DEFINE_ERROR(EmptyBatchError, Data)
POSELIFT_DEFINE_ERROR(EmptyErrorsError, Data)
POSELIFT_DEFINE_ERROR(PairingError, Data)
POSELIFT_DEFINE_ERROR(DatasetEmptyError, Data)
POSELIFT_DEFINE_ERROR(RankError, Data)

// Numerical failures.
POSELIFT_DEFINE_ERROR(NonPositiveDepthError, Numeric)
POSELIFT_DEFINE_ERROR(ZeroSkeletonError, Numeric)
POSELIFT_DEFINE_ERROR(DomainError, Numeric)
POSELIFT_DEFINE_ERROR(DegenerateTargetError, Numeric)

// Files.
POSELIFT_DEFINE_ERROR(IoError, Io)
POSELIFT_DEFINE_ERROR(VersionError, Io)
POSELIFT_DEFINE_ERROR(CorruptCheckpointError, Io)

// Configuration.
POSELIFT_DEFINE_ERROR(ConfigError, Config)

#undef POSELIFT_DEFINE_ERROR

// Raised when a loss term evaluates to NaN or infinity. `term()` names it.
class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(const std::string& term, double value)
      : Error(ErrorCategory::Numeric,
              "NonFiniteLossError: term " + term + " = " + std::to_string(value)),
        term_(term) {}

  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

}  // namespace poselift
