#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tal {

// Usage or configuration problems. CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values, failed numeric contracts. CLI exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File system and format problems. CLI exit code 4.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
 public:
  ShapeError(std::size_t node, const std::string& what)
      : std::runtime_error("node " + std::to_string(node) + ": " + what), node_(node) {}

  std::size_t node() const { return node_; }

 private:
  std::size_t node_;
};

}  // namespace tal
