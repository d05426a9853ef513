// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace turnwise {

// Shape incompatibility between tensor operands.
struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite value detected while running in verification (64-bit) mode,
// or a non-finite gradient/loss during optimization.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Input text that is not syntactically valid (bad JSON, bad header line).
struct parse_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Input that parses but violates the corpus schema.
struct schema_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A required key (utterance id, parameter name) is missing from a store.
struct lookup_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Binary artifact with a bad magic, version, or truncated payload.
struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace turnwise
