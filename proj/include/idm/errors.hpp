#pragma once

#include <stdexcept>
#include <string>

namespace idm {

enum class ErrorKind { dimension, index, config, format, io, state, numeric };

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::index: return "index";
    case ErrorKind::config: return "config";
    case ErrorKind::format: return "format";
    case ErrorKind::io: return "io";
    case ErrorKind::state: return "state";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define IDM_DEFINE_ERROR(Name, Kind)                              \
  class Name : public Error {                                     \
   public:                                                        \
    explicit Name(const std::string& what) : Error(Kind, what) {} \
  };

IDM_DEFINE_ERROR(DimensionError, ErrorKind::dimension)
IDM_DEFINE_ERROR(IndexError, ErrorKind::index)
IDM_DEFINE_ERROR(ConfigError, ErrorKind::config)
IDM_DEFINE_ERROR(FormatError, ErrorKind::format)
IDM_DEFINE_ERROR(IoError, ErrorKind::io)
IDM_DEFINE_ERROR(StateError, ErrorKind::state)
IDM_DEFINE_ERROR(NumericError, ErrorKind::numeric)

#undef IDM_DEFINE_ERROR

}  // namespace idm
