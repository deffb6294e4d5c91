#pragma once

#include <stdexcept>
#include <string>

namespace ortlab {

// Bad arguments, bad config files, violated preconditions, rejected inputs.
// The CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failures while computing: non-finite values, divergence, I/O write errors.
// The CLI maps this to exit code 3.
class ComputeError : public std::runtime_error {
 public:
  explicit ComputeError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace ortlab
