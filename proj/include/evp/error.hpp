#pragma once

#include <stdexcept>

namespace evp {

// Error taxonomy shared across the library. The CLI maps shape/domain/config/
// integrity errors to exit code 2 and numeric failures to exit code 3.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace evp
