#pragma once

#include <stdexcept>
#include <string>

namespace diffnst {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape, range or option values that do not fit the configured model.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A hook references an attention site the backbone does not have.
class HookError : public Error {
 public:
  using Error::Error;
};

// Trace produced by a different backbone/schedule, or missing entries.
class TraceError : public Error {
 public:
  using Error::Error;
};

// Token grids of content and style traces disagree at some site.
class ResolutionError : public TraceError {
 public:
  using TraceError::TraceError;
};

// Style-encoder registry misuse or codes from different encoders mixed.
class EncoderError : public Error {
 public:
  using Error::Error;
};

// A stylization batch lacks the style/content pairings a loss needs.
class BatchError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss term; the message names the term.
class LossError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace diffnst
