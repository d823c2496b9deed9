#pragma once

#include <stdexcept>
#include <string>

namespace atlasfuse {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed or unreadable file content (NIfTI header, MVOL manifest, JSON).
class FormatError : public Error {
public:
  explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};

/// File content is syntactically valid but uses a feature we do not support.
class UnsupportedError : public Error {
public:
  explicit UnsupportedError(const std::string& msg) : Error("unsupported: " + msg) {}
};

/// Caller violated an operation precondition (e.g. geometry mismatch).
class ContractError : public Error {
public:
  explicit ContractError(const std::string& msg) : Error("contract violation: " + msg) {}
};

/// A prompt was requested from an empty prior mask.
class EmptyPriorError : public Error {
public:
  explicit EmptyPriorError(const std::string& msg) : Error("empty prior: " + msg) {}
};

/// A segmentation backend failed (bad exit, timeout, malformed response).
class BackendError : public Error {
public:
  explicit BackendError(const std::string& msg) : Error("backend error: " + msg) {}
};

/// An optimization stage produced a non-finite loss.
class DivergedError : public Error {
public:
  DivergedError(const std::string& stage, int iteration)
      : Error("optimization diverged in stage '" + stage + "' at iteration " +
              std::to_string(iteration)),
        stage_(stage), iteration_(iteration) {}

  const std::string& stage() const { return stage_; }
  int iteration() const { return iteration_; }

private:
  std::string stage_;
  int iteration_;
};

}  // namespace atlasfuse
