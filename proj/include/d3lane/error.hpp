#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace d3l {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or raster dimensions disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A configuration value is missing, out of range, or inconsistent.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error("config key '" + key + "': " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// Malformed input file. Carries the offending key (may be empty for syntax
// errors) and the byte offset into the file where the problem was located.
class ParseError : public Error {
 public:
  ParseError(std::string key, std::size_t byte_offset, const std::string& what)
      : Error(what + " (key '" + key + "', byte " + std::to_string(byte_offset) + ")"),
        key_(std::move(key)),
        offset_(byte_offset) {}
  const std::string& key() const noexcept { return key_; }
  std::size_t byte_offset() const noexcept { return offset_; }

 private:
  std::string key_;
  std::size_t offset_;
};

// Archive or checkpoint content is inconsistent (bad magic, hash collision,
// weight shape mismatch).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace d3l
