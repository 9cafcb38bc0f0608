#pragma once

#include <stdexcept>
#include <string>

namespace lamkit {

// Base class for every error thrown by the library. Subclasses map to exit
// codes at the CLI boundary: ConfigError -> 2, everything else -> 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration, including unknown config keys,
// mismatched model/target combinations and malformed CLI usage.
struct ConfigError : Error {
  using Error::Error;
};

// On-disk payload does not match its manifest, or a binary file is
// truncated or has a bad magic.
struct CorruptionError : Error {
  using Error::Error;
};

// A manifest declares a format_version this build does not understand.
struct VersionError : Error {
  using Error::Error;
};

// A keyed lookup (embedding row, checkpoint parameter, record field)
// found nothing. The message names the missing key.
struct LookupError : Error {
  using Error::Error;
};

// Non-finite action handed to the environment.
struct InvalidActionError : Error {
  using Error::Error;
};

// Operation is well-formed but not supported on this input, e.g. semantic
// state targets on imported data with no underlying simulator state.
struct UnsupportedError : Error {
  using Error::Error;
};

// Training loss became non-finite. A diagnostic checkpoint is written
// before this is thrown.
struct DivergenceError : Error {
  using Error::Error;
};

// Malformed text input: config files, run records, import manifests.
struct ParseError : Error {
  using Error::Error;
};

// Filesystem failure (open/read/write/rename).
struct IoError : Error {
  using Error::Error;
};

}  // namespace lamkit
