#pragma once

#include <stdexcept>
#include <string>

namespace anchorpose {

/// File or stream failure: missing file, malformed content, write error.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// Numerical failure: non-finite loss, divergence, unsolvable system.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace anchorpose
