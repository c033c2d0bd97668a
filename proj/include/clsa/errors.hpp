#pragma once

#include <stdexcept>
#include <string>

namespace clsa {

// Caller broke a documented precondition (bad shapes, out-of-range index...).
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Input outside the mathematical domain of an operation (zero-area box,
// non-positive probability, empty metric input...).
class DomainError : public std::domain_error {
 public:
  explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

// File could not be read, parsed or written.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace clsa
