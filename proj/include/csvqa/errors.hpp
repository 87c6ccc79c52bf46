// Copyright 2026 The csvqa Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef CSVQA_ERRORS_HPP
#define CSVQA_ERRORS_HPP

#include <cstdint>
#include <stdexcept>
#include <string>

namespace csvqa {

// Base for every error raised by the library. The CLI maps subclasses to exit
// codes: ContractError -> 2, TransportError -> 3, anything else -> 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Raised when a store or knowledge file contains no usable records.
class EmptyStoreError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary payload; carries the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(std::uint64_t offset, const std::string& what)
      : Error("format error at byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

/// The peer answered, but the response violates the wire contract.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Replay fixture has no entry for the requested sample.
class FixtureError : public Error {
 public:
  using Error::Error;
};

}  // namespace csvqa

#endif  // CSVQA_ERRORS_HPP
