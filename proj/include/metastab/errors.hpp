#pragma once

#include <stdexcept>
#include <string>

namespace metastab {

// Bad input: violated preconditions, malformed configs, out-of-range
// parameters. The CLI maps this to exit code 2.
class validation_error : public std::invalid_argument {
 public:
  explicit validation_error(const std::string& msg)
      : std::invalid_argument(msg) {}
};

// An algorithm failed to deliver: lost bracket, eigensolver breakdown,
// quadrature budget exhausted, blow-up guard tripped. Exit code 3.
class numerical_error : public std::runtime_error {
 public:
  explicit numerical_error(const std::string& msg)
      : std::runtime_error(msg) {}
};

}  // namespace metastab
