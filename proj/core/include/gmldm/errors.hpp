// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace gmldm {

// Base class for everything thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments, malformed configs, shape mismatches, domain violations.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// File read/write failures, malformed headers, truncated payloads.
class IoError : public Error {
 public:
  using Error::Error;
};

// A required upstream artifact (checkpoint, manifest, volume) is absent.
// Kept separate from IoError so the CLI can map it to its own exit code.
class MissingArtifactError : public IoError {
 public:
  using IoError::IoError;
};

// NaN/Inf encountered where finite values are required.
class NumericsError : public Error {
 public:
  using Error::Error;
};

}  // namespace gmldm
