#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace xq {

// Base of every error raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IllegalMove : Error {
  using Error::Error;
};

struct FenError : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

// Replay of a game record failed at move `index` (0-based).
struct IllegalMoveError : Error {
  std::size_t index;
  IllegalMoveError(std::size_t i, const std::string& what)
      : Error("illegal move at index " + std::to_string(i) + ": " + what), index(i) {}
};

struct DomainError : Error {
  using Error::Error;
};

struct RangeError : Error {
  using Error::Error;
};

struct TerminalPosition : Error {
  TerminalPosition() : Error("position is terminal") {}
};

struct ShapeMismatch : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

struct ManifestMismatch : Error {
  using Error::Error;
};

struct IllegalLabel : Error {
  using Error::Error;
};

struct UnknownEntry : Error {
  using Error::Error;
};

struct DisconnectedGraph : Error {
  using Error::Error;
};

}  // namespace xq
