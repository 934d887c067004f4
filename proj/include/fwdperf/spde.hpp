#pragma once

#include "fwdperf/market.hpp"
#include "fwdperf/parallel.hpp"
#include "fwdperf/strategy.hpp"

#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace fwdperf {

// Uniform grid in z = log x.
struct LogGrid {
    double z_min = -6.0;
    double z_max = 6.0;
    std::size_t points = 512;
    double eta = 1.5;  // weight exponent, diagnostics only

    static LogGrid around(double x0, std::size_t points = 512, double half_width = 6.0, double eta = 1.5);

    double dz() const { return (z_max - z_min) / static_cast<double>(points - 1); }
    double z(std::size_t i) const { return z_min + dz() * static_cast<double>(i); }
    double x(std::size_t i) const;

    // M >= 64, z_min < z_max, eta > 1 and, if given, log(anchor) strictly inside.
    void validate(std::optional<double> anchor = std::nullopt) const;

    // r(z) = exp(eta sqrt(1 + z^2))
    double weight(double z) const;
};

// Weighted Sobolev-type norm (sum_{j<=m} int r^2 |phi^(j)|^2 dz)^(1/2) of
// nodal data, derivatives by central differences, truncated to the grid.
double weighted_norm(const LogGrid& grid, std::span<const double> phi, int m);

// Nodewise coefficients of the log-variable equation for Y = log R~ at one
// time, with b(z) = e^{-z} sigma pi(e^z):
//
//   dY = [ D Y'' + A Y' + S ] dt - [ (b . dW) Y' + c . dW ]
//
//   D = |b|^2 / 2
//   A = ((|b|^2)' + |b|^2 - 2 lambda . b) / 2
//   S = ((|b|^2)'' + 3 (|b|^2)' + 2 |b|^2 - |c|^2) / 2
//   c = lambda + b + b'
struct LogCoefficients {
    std::size_t points = 0;
    int d = 0;
    SmallVec lambda;
    std::vector<double> b, db, d2b;  // points x d
    std::vector<double> B, dB, d2B;  // |b|^2 and its z-derivatives
    std::vector<double> c;           // points x d
    std::vector<double> diffusion;   // D
    std::vector<double> advection;   // A
    std::vector<double> source;      // S

    // Largest explicit step: min(0.25 dz^2 / max |b|^2, 0.5 dz / max |A|).
    double stable_dt(double dz) const;
    bool is_null() const;
};

LogCoefficients build_log_coefficients(const FeedbackStrategy& strategy, const MarketModel& market,
                                       const PathView& view, const LogGrid& grid);

// Linear operator of the R~ equation applied to nodal R~ (drift part, per
// unit time), assembled from the same coefficients. Used as an independent
// consistency check against the log form.
std::vector<double> rtilde_drift(const LogCoefficients& coef, std::span<const double> rtilde, double dz);

// One explicit step of the Y equation: predictor-corrector (Heun) on the
// drift with central differences, Euler on the noise with upwinding along
// b . dW, linear extrapolation at both ends. Throws StabilityError if dt
// exceeds coef.stable_dt(dz).
class YStepper {
public:
    explicit YStepper(std::size_t points) : drift0_(points), drift1_(points), pred_(points), noise_(points) {}

    void step(std::span<double> Y, const LogCoefficients& coef, double dt, std::span<const double> dW, double dz,
              Exec exec = Exec::serial);

private:
    std::vector<double> drift0_, drift1_, pred_, noise_;
};

std::vector<double> step_Y(std::span<const double> Y, const LogCoefficients& coef, double dt,
                           std::span<const double> dW, double dz, Exec exec = Exec::serial);

struct SolveOptions {
    // Cap on the sub-step size in addition to the stability bound.
    double max_dt = std::numeric_limits<double>::infinity();
    // Grid steps at which Y is stored; empty stores every step.
    std::vector<std::size_t> snapshot_steps;
    // If set, Y at log(probe_x) is recorded at every grid step.
    std::optional<double> probe_x;
    Exec exec = Exec::serial;
};

struct RSolution {
    LogGrid grid;
    std::vector<std::size_t> steps;
    std::vector<std::vector<double>> Y;
    std::optional<double> probe_x;
    std::vector<double> probe_Y;  // per grid step 0..N
    std::size_t max_substeps = 1;

    // Index into steps/Y for a grid step; throws if not stored.
    std::size_t snapshot_index(std::size_t step) const;
    std::vector<double> R(std::size_t snapshot) const;
};

using InitialDensity = std::function<double(double x)>;  // x -> -U_0''(x)

RSolution solve_R(const FeedbackStrategy& strategy, const MarketModel& market, const InitialDensity& R0,
                  const BrownianPath& path, const LogGrid& grid, const SolveOptions& options = {});

// Anchor volatility a_t(x_bar), evaluated once per grid step.
struct AnchorState {
    std::size_t step = 0;
    double t = 0.0;
    double R_at_anchor = 0.0;
    double x_bar = 1.0;
    const BrownianPath* path = nullptr;
};
using AnchorVolatility = std::function<SmallVec(const AnchorState&)>;

AnchorVolatility zero_anchor(int d);

struct FieldSnapshot {
    std::size_t step = 0;
    double t = 0.0;
    std::vector<double> Y, R, V, U;
    std::vector<double> a;  // points x d
    std::vector<double> b;  // e^{-z} sigma pi(e^z), points x d
    double zeta = 0.0;
    SmallVec anchor_vol;
    SmallVec lambda;
    SmallMat sigma;
};

class UtilityField {
public:
    LogGrid grid;
    double x_bar = 1.0;
    int d = 0;
    std::vector<FieldSnapshot> snapshots;
    std::vector<double> zeta;  // per grid step

    const FieldSnapshot& at_step(std::size_t step) const;
    const FieldSnapshot& terminal() const { return snapshots.back(); }

    // Off-grid evaluation: cubic Hermite in z inside the grid, power-law
    // continuation outside using the boundary log-slopes of R.
    double U(const FieldSnapshot& s, double x) const;
    double V(const FieldSnapshot& s, double x) const;
    double R(const FieldSnapshot& s, double x) const;
};

// V = int_x^inf R (trapezoid in z plus power-tail closure), U = zeta + int_{x_bar}^x V,
// zeta driven by -0.5 |sigma pi(x_bar)|^2 R(x_bar) dt + a(x_bar) . dW, and the
// volatility field a at every stored snapshot.
UtilityField integrate_to_U(const RSolution& sol, const FeedbackStrategy& strategy, const MarketModel& market,
                            double x_bar, const AnchorVolatility& anchor, double zeta0, const BrownianPath& path);

// a(x) = a(x_bar) - lambda (U(x) - U(x_bar)) + int_{x_bar}^x sigma pi(y) R(y) dy
// on the nodes; b holds e^{-z} sigma pi(e^z) per node (points x d).
std::vector<double> volatility_a(const LogGrid& grid, double x_bar, std::span<const double> U,
                                 std::span<const double> R, double zeta, std::span<const double> b,
                                 const SmallVec& lambda, const SmallVec& anchor_vol);

// Nodewise d/dx of a field stored as points x d (second order, one-sided at the ends).
std::vector<double> x_derivative(const LogGrid& grid, std::span<const double> f, int d);

struct RecoveredStrategy {
    LogGrid grid;
    int k = 0;
    int d = 0;
    std::vector<double> holdings;   // points x k
    std::vector<double> sigma_pi;   // points x d
    std::vector<double> residual;   // relative residual of the portfolio identity per node

    SmallVec holdings_at(std::size_t node) const;
    // Interpolates pi(x)/x linearly in z, constant beyond the grid.
    FeedbackStrategy as_strategy(std::string label = "recovered") const;
};

// sigma pi = -(lambda U' + (sigma^T)^+ sigma^T a') / U'', then pi = sigma^+ (sigma pi).
RecoveredStrategy recover_strategy(const UtilityField& field, const FieldSnapshot& snap);

void write_field_csv(std::ostream& os, const UtilityField& field, const FieldSnapshot& snap);

}  // namespace fwdperf
