#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace longiseg {

/// Coarse failure class; the CLI prints it as the first token of its error line.
enum class ErrorKind {
  io,          // missing/unwritable files
  format,      // malformed headers, size mismatches, bad payloads
  shape,       // tensor/volume shape contracts
  invalid,     // argument outside its domain
  config,      // inconsistent configuration
  data,        // dataset content does not support the request
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace longiseg
