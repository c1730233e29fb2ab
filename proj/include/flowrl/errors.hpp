#pragma once

#include <stdexcept>
#include <string>

namespace flowrl {

// Error categories map one-to-one onto process exit codes (see cli main):
//   ConfigError       -> 1  bad flags, malformed config, unknown keys
//   MissingArtifact   -> 2  required input file (e.g. checkpoint) absent
//   DivergenceAbort   -> 3  training collapsed past the divergence guard
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct MissingArtifact : std::runtime_error {
  explicit MissingArtifact(const std::string& msg) : std::runtime_error(msg) {}
};

struct DivergenceAbort : std::runtime_error {
  explicit DivergenceAbort(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace flowrl
