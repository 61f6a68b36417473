#pragma once

#include <stdexcept>
#include <string>

namespace deskpro {

// Error hierarchy. Each class maps to a distinct CLI exit code (see tools/).
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct ProtocolError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct BatchCompositionError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};

}  // namespace deskpro
