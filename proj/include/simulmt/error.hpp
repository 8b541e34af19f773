#pragma once

#include <stdexcept>
#include <string>

namespace simulmt {

/// Base of every error thrown by the toolkit. `kind()` is a stable short tag
/// used by the CLI to pick an exit code.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define SIMULMT_DEFINE_ERROR(Name, tag)                         \
  class Name : public Error {                                   \
   public:                                                      \
    explicit Name(const std::string& what) : Error(tag, what) {} \
  };

SIMULMT_DEFINE_ERROR(ConfigError, "config")
SIMULMT_DEFINE_ERROR(ParseError, "parse")
SIMULMT_DEFINE_ERROR(LengthError, "length")
SIMULMT_DEFINE_ERROR(ContractError, "contract")
SIMULMT_DEFINE_ERROR(DataError, "data")
SIMULMT_DEFINE_ERROR(FormatError, "format")
SIMULMT_DEFINE_ERROR(CorruptionError, "corruption")
SIMULMT_DEFINE_ERROR(TrainingError, "training")
SIMULMT_DEFINE_ERROR(ModelStateError, "model-state")
SIMULMT_DEFINE_ERROR(GradCheckError, "gradcheck")
SIMULMT_DEFINE_ERROR(MetricError, "metric")
SIMULMT_DEFINE_ERROR(SessionError, "session")

#undef SIMULMT_DEFINE_ERROR

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

}  // namespace simulmt
