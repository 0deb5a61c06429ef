// Error taxonomy shared by all components. The CLI maps these to exit
// codes: config_error -> 2, numeric_error -> 3.
#pragma once

#include <stdexcept>
#include <string>

namespace odesr {

// Bad shapes, bad configuration values, mismatched channel counts.
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values, step underflow, failed numeric preconditions.
class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operations on objects in the wrong lifecycle state (e.g. backward on a
// cleared tape).
class state_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File and serialization failures; message carries the path.
class io_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace odesr
