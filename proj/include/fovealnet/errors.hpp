#pragma once

#include <stdexcept>
#include <string>

namespace fovealnet {

// Raised for bad user input: malformed files, invalid configs, missing paths.
// The CLI maps this to exit code 1; anything else escaping to main is treated
// as an internal invariant violation (exit code 2).
class UserError : public std::runtime_error {
 public:
  explicit UserError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fovealnet
