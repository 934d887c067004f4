#pragma once

#include "fwdperf/contract.hpp"
#include "fwdperf/market.hpp"
#include "fwdperf/parallel.hpp"
#include "fwdperf/spde.hpp"
#include "fwdperf/strategy.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace fwdperf {

// One row of a report: an arm of a test.
struct ArmResult {
    std::string arm;
    double estimate = 0.0;
    double se = 0.0;
    double target = 0.0;
    double tol = 0.0;  // absolute half-width the estimate was held to
    bool pass = false;
    std::string note;
};

struct VerificationReport {
    std::string test;
    std::vector<ArmResult> rows;
    std::size_t ensemble_size = 0;
    std::size_t floored = 0;
    bool invalid = false;
    std::string invalid_reason;
    std::uint64_t seed = 0;
    double runtime_seconds = 0.0;
    std::vector<std::string> notes;  // thresholds and rules, verbatim
    bool expected_failure = false;   // e.g. the fake contract under injection

    bool as_expected() const { return expected_failure ? !pass() : pass(); }

    double floored_fraction() const {
        return ensemble_size ? static_cast<double>(floored) / static_cast<double>(ensemble_size) : 0.0;
    }
    bool pass() const;
    const ArmResult& row(const std::string& arm) const;
};

struct VerifySpec {
    double horizon = 1.0;
    double dt = 1e-3;
    double x0 = 1.0;
    std::uint64_t seed = 7;
    std::size_t paths = 100000;
    Exec exec = Exec::parallel;
};

inline constexpr std::size_t kMinPaths = 10000;
inline constexpr std::size_t kMinNested = 1000;
inline constexpr double kMaxFlooredFraction = 0.01;

// U_t(x) along one Brownian path, at the grid steps it was built for.
class PathUtility {
public:
    virtual ~PathUtility() = default;
    virtual double U(std::size_t step, double x) const = 0;
    // Terminal field for path-dependent contracts; null for closed forms.
    virtual const UtilityField* field() const { return nullptr; }
};

using UtilityFactory =
    std::function<std::unique_ptr<PathUtility>(const BrownianPath& path, const std::vector<std::size_t>& steps)>;

UtilityFactory closed_form_utility(const BSClosedForm& cf);

struct SpdeUtilitySpec {
    LogGrid grid;
    double x_bar = 1.0;
    double zeta0 = 1.0;
    InitialDensity R0;
    AnchorVolatility anchor;
    SolveOptions solve;  // snapshot_steps and probe_x are filled per call
};
UtilityFactory spde_utility(FeedbackStrategy strategy, MarketModel market, SpdeUtilitySpec spec);

struct DeviationFamily {
    FeedbackStrategy control;
    std::vector<FeedbackStrategy> deviations;

    // Control merton; scaled Merton 0.5, 1.5, 2; asset-2 deviation; zero.
    static DeviationFamily standard(const MarketModel& market, double gamma);
};

// Grid steps of the checkpoints; throws ConfigError if off-grid.
std::vector<std::size_t> checkpoint_steps(const std::vector<double>& times, double dt);

VerificationReport martingale_test(const UtilityFactory& utility, const FeedbackStrategy& strategy,
                                   const MarketModel& market, const std::vector<double>& checkpoints,
                                   const VerifySpec& spec);

VerificationReport supermartingale_profile(const UtilityFactory& utility, const FeedbackStrategy& strategy,
                                           const MarketModel& market, const std::vector<double>& checkpoints,
                                           const VerifySpec& spec, bool expect_strict_decrease);

// Contract payouts for control and deviations on common random numbers.
VerificationReport deviation_test(const Contract& contract, const DeviationFamily& family, const MarketModel& market,
                                  const VerifySpec& spec, const UtilityFactory& utility = {});

struct NestedSpec {
    std::size_t outer = 1000;
    std::size_t inner = 1000;
    double pass_fraction = 0.99;
};

// Branches `inner` continuations from (xi, tau) on each outer path. The
// inner means use polynomial control variates in the continuation's
// Brownian increment, fitted with two-fold cross-fitting.
VerificationReport injection_robustness_test(const Contract& contract, const DeviationFamily& family,
                                             const InjectionEvent& scenario, const UtilityFactory& utility,
                                             const MarketModel& market, const VerifySpec& spec,
                                             const NestedSpec& nested, const std::string& label = {});

// E[(X_T)^gamma] / gamma for the control and every listed strategy.
VerificationReport principal_value_test(const FeedbackStrategy& control, const std::vector<FeedbackStrategy>& others,
                                        const MarketModel& market, double gamma, const VerifySpec& spec);

struct SpdeCheckSpec {
    LogGrid grid;
    double dt = 1e-3;
    double horizon = 1.0;
    double x_bar = 1.0;
    std::size_t paths = 32;
    std::uint64_t seed = 7;
    double tolerance = 1e-3;  // on the max R relative error
    std::size_t snapshots = 0;  // compare at this many equally spaced times; 0 = every step
    Exec exec = Exec::parallel;
};

struct SpdeErrors {
    double R = 0.0;  // max over nodes and steps of |R_num / R_exact - 1|
    double U = 0.0;
    double a = 0.0;  // |a_num - a_exact| / (|lambda| U_exact), max over nodes and steps
    double R_initial = 0.0;
};

// Per-path error of the solver against the closed-form family.
SpdeErrors spde_path_errors(const BSClosedForm& cf, const SpdeCheckSpec& spec, std::size_t path_index);

VerificationReport spde_vs_closed_form(const BSClosedForm& cf, const SpdeCheckSpec& spec);

// Terminal wealth of the Merton target started from x0 at 0, as a function
// of W_T (constant coefficients).
TargetRule merton_terminal_wealth_rule(const MarketModel& market, double gamma, double x0, double horizon);

// Cross-fitted control-variate mean of y given regressors h (n x p, mean zero
// under the sampling law). Exposed for testing.
Estimate control_variate_mean(std::span<const double> y, std::span<const double> h, std::size_t p);

// Hermite products of total degree 1..3 of the standardised increment z (d entries).
std::size_t hermite_regressor_count(int d);
void hermite_regressors(std::span<const double> z, std::span<double> out);

}  // namespace fwdperf
