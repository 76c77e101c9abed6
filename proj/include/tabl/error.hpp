#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tabl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor or feature-map shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a tensor op.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Misuse of an API (non-scalar loss, empty input, bad argument).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters for a block.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Structural problems in a graph spec; carries the offending ids or kinds.
class ValidationError : public Error {
 public:
  ValidationError(const std::string& what, std::vector<std::string> offenders)
      : Error(what), offenders_(std::move(offenders)) {}
  const std::vector<std::string>& offenders() const noexcept { return offenders_; }

 private:
  std::vector<std::string> offenders_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t column)
      : Error(what + " (line " + std::to_string(line) + ", column " + std::to_string(column) + ")"),
        line_(line),
        column_(column) {}
  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

// Shape inference failure pinned to a graph node.
class NodeShapeError : public ShapeError {
 public:
  NodeShapeError(std::string node_id, const std::string& what)
      : ShapeError("node '" + node_id + "': " + what), node_id_(std::move(node_id)) {}
  const std::string& node_id() const noexcept { return node_id_; }

 private:
  std::string node_id_;
};

}  // namespace tabl
