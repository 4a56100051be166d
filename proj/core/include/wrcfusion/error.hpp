#pragma once
#include <stdexcept>
#include <string>

namespace wrc {

// Error taxonomy shared across the library. Callers are expected to be able
// to distinguish these classes, so keep throw sites specific.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };  // shape/axis mismatch
struct ConfigError : Error { using Error::Error; };     // invalid configuration
struct ContractError : Error { using Error::Error; };   // caller broke a precondition
struct NumericError : Error { using Error::Error; };    // non-finite input or result
struct InternalError : Error { using Error::Error; };   // library invariant broken
struct FormatError : Error { using Error::Error; };     // malformed file content
struct IoError : Error { using Error::Error; };         // filesystem failure
struct SceneError : Error { using Error::Error; };      // invalid synthetic scene

}  // namespace wrc
