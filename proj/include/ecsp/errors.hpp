#pragma once

#include <stdexcept>
#include <string>

namespace ecsp {

// Error taxonomy matches the CLI exit-code contract:
//   CorpusError/ConfigError -> 2, TrainError -> 3, ModelIoError -> 4.

struct CorpusError : std::runtime_error {
  explicit CorpusError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModelIoError : std::runtime_error {
  explicit ModelIoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ecsp
