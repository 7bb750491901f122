#pragma once

#include <stdexcept>
#include <string>

namespace thrid {

// Error taxonomy mirrors the CLI exit codes: flag handling errors exit 1,
// FormatError/IoError/ShapeError exit 2, NumericError exits 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

}  // namespace thrid
