#pragma once

#include "fwdperf/types.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace fwdperf {

// Two-asset Black-Scholes specialisation. mu1, mu2 are the drifts of the
// prices (not of their logarithms).
struct BlackScholes2 {
    double mu1 = 0.08;
    double mu2 = 0.06;
    double sigma1 = 0.2;
    double sigma2 = 0.3;
    double rho = 0.5;

    void validate() const;
    SmallMat sigma_matrix() const;  // d x k = 2 x 2, upper triangular
    SmallVec drift() const;
    // Closed-form market price of risk for this model.
    SmallVec lambda_closed_form() const;
};

// Discretised d-dimensional Brownian trajectory on a uniform grid.
class BrownianPath {
public:
    BrownianPath() = default;

    int dims() const { return dims_; }
    std::size_t steps() const { return steps_; }
    double dt() const { return dt_; }
    double horizon() const { return dt_ * static_cast<double>(steps_); }
    double time(std::size_t i) const { return dt_ * static_cast<double>(i); }
    std::uint64_t seed() const { return seed_; }
    std::uint64_t index() const { return index_; }

    // Increment over [t_i, t_{i+1}], i < steps().
    std::span<const double> increment(std::size_t i) const {
        return {increments_.data() + i * static_cast<std::size_t>(dims_), static_cast<std::size_t>(dims_)};
    }
    // W at t_i, i <= steps().
    std::span<const double> value(std::size_t i) const {
        return {values_.data() + i * static_cast<std::size_t>(dims_), static_cast<std::size_t>(dims_)};
    }

    std::span<const double> increments() const { return increments_; }

    // Builds a path from explicit increments (tests, nested branching).
    static BrownianPath from_increments(int d, double dt, std::vector<double> increments,
                                        std::uint64_t seed = 0, std::uint64_t index = 0);
    // Same, reusing this path's storage.
    void assign_increments(int d, double dt, std::span<const double> increments, std::uint64_t seed = 0,
                           std::uint64_t index = 0);

private:
    friend void simulate_brownian_into(BrownianPath&, int, double, double, std::uint64_t, std::uint64_t);
    void rebuild_values();

    int dims_ = 0;
    std::size_t steps_ = 0;
    double dt_ = 0.0;
    std::uint64_t seed_ = 0;
    std::uint64_t index_ = 0;
    std::vector<double> increments_;
    std::vector<double> values_;
};

// A point on a path: coefficient and strategy callbacks receive this so they
// can depend on the history up to `step`.
struct PathView {
    const BrownianPath* path = nullptr;
    std::size_t step = 0;

    double t() const { return path ? path->time(step) : 0.0; }
    std::span<const double> W() const { return path->value(step); }
};

struct Coefficients {
    SmallVec mu;      // k
    SmallMat sigma;   // d x k
    SmallVec lambda;  // d
};

class MarketModel {
public:
    using DriftFn = std::function<SmallVec(const PathView&)>;
    using VolFn = std::function<SmallMat(const PathView&)>;

    static MarketModel black_scholes(const BlackScholes2& p);
    static MarketModel constant(const SmallVec& mu, const SmallMat& sigma);
    static MarketModel general(int num_assets, int num_factors, DriftFn drift, VolFn vol);

    int num_assets() const { return k_; }
    int num_factors() const { return d_; }
    bool is_constant() const { return constant_.has_value(); }
    const std::optional<BlackScholes2>& bs() const { return bs_; }

    // Coefficients at a grid point. Throws DegeneracyError naming the step if
    // the columns of sigma are numerically dependent.
    Coefficients at(const PathView& view) const;
    // Only valid when is_constant().
    const Coefficients& constant_coefficients() const { return *constant_; }

private:
    int k_ = 0;
    int d_ = 0;
    DriftFn drift_;
    VolFn vol_;
    std::optional<Coefficients> constant_;
    std::optional<BlackScholes2> bs_;
};

// lambda = (sigma^T)^+ mu via the normal equations, after screening the
// singular values of sigma at a 1e-10 relative threshold.
SmallVec market_price_of_risk(const SmallMat& sigma, const SmallVec& mu, std::size_t time_index = 0);

BrownianPath simulate_brownian(int d, double T, double dt, std::uint64_t master_seed, std::uint64_t path_index);
// Same, reusing the storage of `out`.
void simulate_brownian_into(BrownianPath& out, int d, double T, double dt, std::uint64_t master_seed,
                            std::uint64_t path_index);

// Number of uniform steps of size dt in [0, T]; throws ConfigError if dt
// does not divide T to one part in 1e9.
std::size_t grid_steps(double T, double dt);

// Log price ratios log(S_i / S_0) on the grid, exact log-Euler.
class AssetPath {
public:
    AssetPath(int k, std::size_t steps) : k_(k), log_ratio_((steps + 1) * static_cast<std::size_t>(k), 0.0) {}

    int assets() const { return k_; }
    std::size_t steps() const { return log_ratio_.size() / static_cast<std::size_t>(k_) - 1; }
    double log_ratio(std::size_t i, int j) const { return log_ratio_[i * static_cast<std::size_t>(k_) + static_cast<std::size_t>(j)]; }
    double& log_ratio(std::size_t i, int j) { return log_ratio_[i * static_cast<std::size_t>(k_) + static_cast<std::size_t>(j)]; }
    double ratio(std::size_t i, int j) const;

private:
    int k_;
    std::vector<double> log_ratio_;
};

AssetPath asset_path(const BrownianPath& path, const MarketModel& market);

// CSV dump: t, W1..Wd, S1..Sk with S_0 = s0 for every asset.
void write_path_csv(std::ostream& os, const BrownianPath& path, const AssetPath& assets, double s0 = 1.0);

}  // namespace fwdperf
