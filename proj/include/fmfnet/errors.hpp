#pragma once

#include <stdexcept>
#include <string>

namespace fmfnet {

/// Invalid configuration values (grid, scene, model or training settings).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file was readable but its contents do not follow the expected format.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Open/read/write failures and truncated payloads.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IndexError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller violated an API precondition (non-scalar loss, step out of range, ...).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Recurrent state misuse, e.g. a feature map shape change mid-sequence.
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class NumericDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fmfnet
