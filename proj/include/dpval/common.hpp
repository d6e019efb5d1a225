#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace dpval {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;

// Error raised by any module. `module` names the subsystem ("data", "dp", ...)
// and `field` the offending parameter when there is one.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& message)
      : std::runtime_error(message), module_(std::move(module)) {}
  Error(std::string module, std::string field, const std::string& message)
      : std::runtime_error(message), module_(std::move(module)), field_(std::move(field)) {}

  const std::string& module() const noexcept { return module_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::string module_;
  std::string field_;
};

// Stream seed for (master, tags...). splitmix64 finalizer applied per tag so
// that neighbouring tags give unrelated streams.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

}  // namespace dpval
