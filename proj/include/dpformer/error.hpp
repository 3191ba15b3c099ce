#pragma once

#include <stdexcept>
#include <string>

namespace dpformer {

// Error taxonomy. Everything derives from Error so the CLI boundary can
// catch the whole family and report one line.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };   // shape mismatch
struct ConfigError : Error { using Error::Error; };      // invalid configuration
struct ContractError : Error { using Error::Error; };    // precondition violated
struct LifecycleError : Error { using Error::Error; };   // grow/freeze misuse
struct FormatError : Error { using Error::Error; };      // file format problems
struct NumericError : Error { using Error::Error; };     // NaN/Inf where finite required
struct IoError : Error { using Error::Error; };          // filesystem problems

}  // namespace dpformer
