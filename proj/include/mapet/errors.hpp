#pragma once

#include <stdexcept>
#include <string>

namespace mapet {

// Error categories map onto CLI exit codes: config 2, data 3, divergence 4.
// Everything else (shape and argument errors) is a programming error from the
// caller's side and surfaces as std::invalid_argument.

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline void check(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

inline void check_shape(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

}  // namespace detail
}  // namespace mapet
