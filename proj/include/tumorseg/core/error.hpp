#pragma once

#include <stdexcept>
#include <string>

namespace tumorseg {

// Base of every error the library throws. `kind()` is a stable identifier
// used by the CLI to pick exit codes and by tests to match error cases.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define TUMORSEG_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(#Name, what) {}    \
  }

TUMORSEG_DEFINE_ERROR(ShapeError);
TUMORSEG_DEFINE_ERROR(MissingModality);
TUMORSEG_DEFINE_ERROR(GeometryMismatch);
TUMORSEG_DEFINE_ERROR(InvalidLabel);
TUMORSEG_DEFINE_ERROR(EmptyVolume);
TUMORSEG_DEFINE_ERROR(DegenerateIntensity);
TUMORSEG_DEFINE_ERROR(ConfigError);
TUMORSEG_DEFINE_ERROR(NiftiError);
TUMORSEG_DEFINE_ERROR(CheckpointError);
TUMORSEG_DEFINE_ERROR(InvalidVolume);

#undef TUMORSEG_DEFINE_ERROR

// Training diverged: the loss became non-finite on `batch_id`.
class NumericalDivergence : public Error {
 public:
  NumericalDivergence(long long batch_id, const std::string& what)
      : Error("NumericalDivergence", what + " (batch " + std::to_string(batch_id) + ")"),
        batch_id_(batch_id) {}
  long long batch_id() const noexcept { return batch_id_; }

 private:
  long long batch_id_;
};

}  // namespace tumorseg
