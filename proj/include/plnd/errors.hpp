#pragma once

#include <stdexcept>
#include <string>

namespace plnd {

// Base of every error the library raises. `kind()` is a stable machine-readable
// tag used by the CLI error record.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

struct InputError : Error {
  explicit InputError(const std::string& what) : Error("input", what) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error("format", what) {}
};

struct SamplingError : Error {
  explicit SamplingError(const std::string& what) : Error("sampling", what) {}
};

struct UndefinedRatioError : Error {
  explicit UndefinedRatioError(const std::string& what) : Error("undefined_ratio", what) {}
};

struct TrainingError : Error {
  TrainingError(std::size_t step, const std::string& what)
      : Error("training", what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace plnd
