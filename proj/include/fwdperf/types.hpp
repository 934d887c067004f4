#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fwdperf {

// Upper bound on the number of assets / Brownian factors. Small vectors live
// on the stack so that per-step evaluations in the ensemble kernels never
// touch the heap.
inline constexpr int kMaxDim = 8;

using SmallVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using SmallMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;

// Error taxonomy. Everything derives from std::runtime_error or
// std::invalid_argument so callers can catch broadly.

struct DomainError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DegeneracyError : std::runtime_error {
    DegeneracyError(const std::string& what, std::size_t time_index)
        : std::runtime_error(what), time_index(time_index) {}
    std::size_t time_index;
};

struct StabilityError : std::runtime_error {
    StabilityError(const std::string& what, double required_dt)
        : std::runtime_error(what), required_dt(required_dt) {}
    double required_dt;
};

struct IntegrabilityError : std::runtime_error {
    IntegrabilityError(const std::string& what, double boundary_slope)
        : std::runtime_error(what), boundary_slope(boundary_slope) {}
    double boundary_slope;
};

struct SingularityError : std::runtime_error {
    SingularityError(const std::string& what, std::size_t node)
        : std::runtime_error(what), node(node) {}
    std::size_t node;
};

struct NormalizationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CoefficientError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace fwdperf
