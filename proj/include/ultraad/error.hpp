#pragma once

#include <stdexcept>
#include <string>

namespace ultraad {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or truncated files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Shape, range or invariant violations on in-memory values.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ultraad
