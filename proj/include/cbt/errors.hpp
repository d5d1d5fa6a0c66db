#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cbt {

// Broad failure classes. The CLI maps them onto exit codes.
enum class ErrorKind {
  shape,
  config,
  data,
  numeric,
  checkpoint_version,
  checkpoint_truncated,
  checkpoint_shape,
  io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::shape, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

// Raised when a loss or gradient goes non-finite. `component` names the
// offending term ("l_visual", "l_cross", ...).
class NumericError : public Error {
 public:
  NumericError(std::string component, const std::string& what)
      : Error(ErrorKind::numeric, what), component_(std::move(component)) {}

  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

class CheckpointError : public Error {
 public:
  CheckpointError(ErrorKind kind, const std::string& what) : Error(kind, what) {}
};

namespace detail {

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace detail

}  // namespace cbt
