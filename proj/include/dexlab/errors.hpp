#pragma once

#include <stdexcept>
#include <string>

namespace dexlab {

// Bad dimensions, unknown names, missing inputs a variant requires.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values in inputs, gradients or losses.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse: empty buffers, stale caches, out-of-range arguments.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dexlab
