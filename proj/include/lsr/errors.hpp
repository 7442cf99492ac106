#pragma once

#include <stdexcept>
#include <string>

namespace lsr {

/// Base of every error thrown by the library. `kind()` is a stable
/// machine-readable tag used in structured CLI error output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

#define LSR_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(tag, what) {}      \
  };

LSR_DEFINE_ERROR(ShapeError, "shape_mismatch")
LSR_DEFINE_ERROR(DimensionError, "dimension_mismatch")
LSR_DEFINE_ERROR(NonFiniteError, "non_finite")
LSR_DEFINE_ERROR(IndexError, "index_out_of_range")
LSR_DEFINE_ERROR(ValueError, "invalid_value")
LSR_DEFINE_ERROR(ZeroVarianceError, "zero_variance")
LSR_DEFINE_ERROR(DivergenceError, "divergence")
LSR_DEFINE_ERROR(DependencyError, "missing_dependency")
LSR_DEFINE_ERROR(IoError, "io")
LSR_DEFINE_ERROR(FormatError, "format")
LSR_DEFINE_ERROR(SchemaError, "schema")
LSR_DEFINE_ERROR(StaleArtifactError, "stale_artifact")

#undef LSR_DEFINE_ERROR

}  // namespace lsr
