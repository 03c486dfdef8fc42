#pragma once

#include <stdexcept>
#include <string>

namespace usam {

// Root of every error the library throws. Subclasses only carry a category;
// the message names the offending dimension, file or field.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IncompatibleError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NoValidPixelsError : public Error {
 public:
  NoValidPixelsError() : Error("no valid pixels") {}
  using Error::Error;
};

class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace usam
