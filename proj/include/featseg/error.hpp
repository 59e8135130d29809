#pragma once

#include <stdexcept>
#include <string>

namespace featseg {

/// Broad failure category; the CLI maps these onto its exit codes.
enum class ErrorKind {
  validation,  // bad arguments or violated preconditions
  io,          // file system failures
  format,      // a file exists but its contents are malformed
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what)
      : Error(ErrorKind::validation, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

/// Which part of a serialized artifact was rejected.
enum class FormatFault {
  bad_magic,
  bad_ndim,
  dims_overflow,
  unknown_dtype,
  truncated,
  trailing_bytes,
  bad_json,
  bad_field,
  unsupported_version,
  duplicate_id,
  dangling_path,
  bad_png,
};

const char* to_string(FormatFault fault) noexcept;

class FormatError : public Error {
 public:
  FormatError(FormatFault fault, const std::string& detail)
      : Error(ErrorKind::format,
              std::string(to_string(fault)) + ": " + detail),
        fault_(fault) {}

  FormatFault fault() const noexcept { return fault_; }

 private:
  FormatFault fault_;
};

}  // namespace featseg
