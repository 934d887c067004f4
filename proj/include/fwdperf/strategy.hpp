#pragma once

#include "fwdperf/market.hpp"
#include "fwdperf/parallel.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace fwdperf {

// A feedback strategy pi_t(x): holdings (in currency units, one entry per
// asset) as a function of the grid point and the current wealth x > 0.
// Evaluation callbacks must be pure.
class FeedbackStrategy {
public:
    using Rule = std::function<SmallVec(const PathView&, double x)>;
    using ProportionFn = std::function<SmallVec(const PathView&)>;
    // d^m/dz^m of e^{-z} pi(e^z), m in [0, 5].
    using ProportionDerivative = std::function<SmallVec(const PathView&, double z, int order)>;

    // pi(x) = c * x with c supplied per grid point.
    static FeedbackStrategy proportional(std::string label, int num_assets, ProportionFn c);
    // pi(x) = c * x with c fixed.
    static FeedbackStrategy constant_proportional(std::string label, const SmallVec& c);
    // General rule. Without `derivatives`, z-derivatives are taken by central
    // finite differences on the solver grid.
    static FeedbackStrategy from_rule(std::string label, int num_assets, Rule rule,
                                      ProportionDerivative derivatives = {});

    const std::string& label() const { return label_; }
    int num_assets() const { return k_; }

    SmallVec holdings(const PathView& view, double x) const;

    bool is_proportional() const { return static_cast<bool>(proportion_); }
    SmallVec proportion(const PathView& view) const { return proportion_(view); }
    const std::optional<SmallVec>& constant_proportion() const { return constant_; }

    bool has_analytic_derivatives() const { return static_cast<bool>(derivative_); }
    SmallVec proportion_derivative(const PathView& view, double z, int order) const;

    FeedbackStrategy relabeled(std::string label) const;

private:
    std::string label_;
    int k_ = 0;
    Rule rule_;
    ProportionFn proportion_;
    ProportionDerivative derivative_;
    std::optional<SmallVec> constant_;
};

// Merton proportion lambda_1 / (sigma_1 (1 - gamma)) in asset 1, nothing in
// the remaining assets. Needs constant coefficients.
double merton_proportion(const MarketModel& market, double gamma);
void validate_gamma(double gamma);

FeedbackStrategy merton_strategy(const MarketModel& market, double gamma);
FeedbackStrategy scaled_merton(const MarketModel& market, double gamma, double kappa);
// (pi^1, pi^2) = (merton proportion * x, x)
FeedbackStrategy asset2_deviation(const MarketModel& market, double gamma);
FeedbackStrategy zero_strategy(int num_assets);

struct InjectionEvent {
    enum class Kind { multiplier, absolute };
    double time = 0.0;
    Kind kind = Kind::multiplier;
    double value = 1.0;

    double apply(double pre_wealth) const { return kind == Kind::multiplier ? value * pre_wealth : value; }
};

struct InjectionSchedule {
    std::vector<InjectionEvent> events;
};

struct StartPoint {
    double xi = 1.0;
    std::size_t step = 0;
};

// Wealth X at steps start_step .. N. `flags[j]` is a bitmask of kInjected /
// kFloored for X[j].
struct WealthPath {
    static constexpr unsigned char kInjected = 1;
    static constexpr unsigned char kFloored = 2;

    std::string label;
    std::size_t start_step = 0;
    double xi = 0.0;
    double dt = 0.0;
    std::vector<double> X;
    std::vector<unsigned char> flags;
    bool floored = false;

    double terminal() const { return X.back(); }
    double at_step(std::size_t step) const { return X[step - start_step]; }
};

// Relative positivity floor: wealth at or below floor_fraction * xi is flagged.
inline constexpr double kDefaultFloorFraction = 1e-12;

void simulate_wealth_into(WealthPath& out, const FeedbackStrategy& strategy, const BrownianPath& path,
                          const MarketModel& market, const StartPoint& start,
                          const InjectionSchedule& injections = {}, double floor_fraction = kDefaultFloorFraction);

WealthPath simulate_wealth(const FeedbackStrategy& strategy, const BrownianPath& path, const MarketModel& market,
                           const StartPoint& start, const InjectionSchedule& injections = {},
                           double floor_fraction = kDefaultFloorFraction);

void write_wealth_csv(std::ostream& os, const WealthPath& w);

// Sampled check of the derivative bound on sigma * (e^{-z} pi(e^z)) for
// m = 0..5 on a log-wealth grid.
struct RegularityReport {
    std::array<double, 6> sup{};
    std::vector<int> violating_orders;
    bool ok() const { return violating_orders.empty(); }
};

RegularityReport check_regularity(const FeedbackStrategy& strategy, const MarketModel& market, const PathView& view,
                                  double z_min, double z_max, std::size_t points,
                                  double max_abs = std::numeric_limits<double>::infinity());

// Nodewise values of e^{-z} pi(e^z) and its first `max_order` z-derivatives,
// analytic when available, else central differences with spacing dz.
// Result[m][i * k + j] = d^m/dz^m of the j-th component at node i.
std::vector<std::vector<double>> proportion_derivatives_on_grid(const FeedbackStrategy& strategy, const PathView& view,
                                                                double z_min, double dz, std::size_t points,
                                                                int max_order);

struct AdmissibilityReport {
    std::string label;
    std::size_t ensemble_size = 0;
    Estimate sup_wealth;
    Estimate sup_wealth_pow;  // E sup X^gamma (inf X^gamma for gamma < 0 is sup X^gamma)
    std::array<Estimate, 3> sup_wealth_prefix{};  // N/4, N/2, N
    bool diverging = false;
    std::size_t floored = 0;
    RegularityReport regularity;
    std::string note = "sampled evidence of admissibility, not a proof";
};

struct EnsembleSpec {
    double horizon = 1.0;
    double dt = 1e-3;
    std::uint64_t seed = 7;
    std::size_t paths = 10000;
    double x0 = 1.0;
    Exec exec = Exec::parallel;
};

AdmissibilityReport check_admissibility(const FeedbackStrategy& strategy, const MarketModel& market, double gamma,
                                        const EnsembleSpec& ens);

}  // namespace fwdperf
