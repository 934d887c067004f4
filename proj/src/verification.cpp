#include "fwdperf/verification.hpp"

#include "fwdperf/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace fwdperf {

bool VerificationReport::pass() const {
    if (invalid) return false;
    return std::all_of(rows.begin(), rows.end(), [](const ArmResult& r) { return r.pass; });
}

const ArmResult& VerificationReport::row(const std::string& arm) const {
    for (const auto& r : rows)
        if (r.arm == arm) return r;
    throw DomainError("report '" + test + "' has no arm '" + arm + "'");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Absolute slack so that zero-variance arms compare exactly equal values as equal.
double slack(double target) { return 1e-12 * std::max(1.0, std::abs(target)); }

bool within(double est, double target, double band) { return std::abs(est - target) <= band + slack(target); }

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

std::uint64_t inner_seed(std::uint64_t seed) { return seed ^ 0x5DEECE66DA3B1F27ULL; }

// A strategy prepared for repeated wealth simulation.
struct Arm {
    const FeedbackStrategy* strategy = nullptr;
    bool fast = false;
    SmallVec exposure;
    double log_drift = 0.0;
};

Arm make_arm(const FeedbackStrategy& s, const MarketModel& market) {
    Arm a;
    a.strategy = &s;
    a.fast = market.is_constant() && s.constant_proportion().has_value();
    if (a.fast) {
        const Coefficients& c = market.constant_coefficients();
        a.exposure = c.sigma * (*s.constant_proportion());
        a.log_drift = a.exposure.dot(c.lambda) - 0.5 * a.exposure.squaredNorm();
    }
    return a;
}

// Wealth at the requested ascending steps (all >= start.step). Returns true
// if the path hit the positivity floor. With constant exposure the log
// wealth is accumulated exactly and exponentiated only where recorded.
bool run_arm(const Arm& arm, const BrownianPath& path, const MarketModel& market, const StartPoint& start,
             std::span<const std::size_t> steps, std::span<double> out, WealthPath& scratch) {
    if (!arm.fast) {
        simulate_wealth_into(scratch, *arm.strategy, path, market, start);
        for (std::size_t k = 0; k < steps.size(); ++k) out[k] = scratch.at_step(steps[k]);
        return scratch.floored;
    }
    const double log_floor = std::log(kDefaultFloorFraction);
    const double dt = path.dt();
    const int d = path.dims();
    const double step_drift = arm.log_drift * dt;
    double L = 0.0;
    bool floored = false;
    std::size_t k = 0;
    while (k < steps.size() && steps[k] == start.step) out[k++] = start.xi;
    for (std::size_t i = start.step; i < path.steps() && k < steps.size(); ++i) {
        if (!floored) {
            const auto dw = path.increment(i);
            double noise = 0.0;
            for (int r = 0; r < d; ++r) noise += arm.exposure(r) * dw[static_cast<std::size_t>(r)];
            L += step_drift + noise;
            if (!(L > log_floor)) {
                L = log_floor;
                floored = true;
            }
        }
        while (k < steps.size() && steps[k] == i + 1) out[k++] = start.xi * std::exp(L);
    }
    return floored;
}

// S_T / S_0 per asset.
void terminal_ratios(const BrownianPath& path, const MarketModel& market, std::vector<double>& out) {
    const int k = market.num_assets();
    out.resize(static_cast<std::size_t>(k));
    if (market.is_constant()) {
        const Coefficients& c = market.constant_coefficients();
        const auto W = path.value(path.steps());
        for (int j = 0; j < k; ++j) {
            double l = (c.mu(j) - 0.5 * c.sigma.col(j).squaredNorm()) * path.horizon();
            for (int r = 0; r < market.num_factors(); ++r) l += c.sigma(r, j) * W[static_cast<std::size_t>(r)];
            out[static_cast<std::size_t>(j)] = std::exp(l);
        }
        return;
    }
    const AssetPath a = asset_path(path, market);
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(j)] = a.ratio(path.steps(), j);
}

struct Scratch {
    BrownianPath path;
    WealthPath wealth;
    std::vector<double> ratios;
    std::vector<double> values;
};

std::vector<Scratch> make_scratch() { return std::vector<Scratch>(static_cast<std::size_t>(worker_count())); }

void mark_floored(VerificationReport& rep) {
    if (rep.floored_fraction() > kMaxFlooredFraction) {
        rep.invalid = true;
        rep.invalid_reason = "floored fraction " + fmt(rep.floored_fraction()) + " exceeds 1%";
    }
}

void check_minimum(VerificationReport& rep, std::size_t n, std::size_t minimum, const char* what) {
    if (n < minimum) {
        rep.invalid = true;
        rep.invalid_reason = std::string(what) + " " + std::to_string(n) + " is below the minimum of " +
                             std::to_string(minimum);
    }
}

class ClosedFormPathUtility : public PathUtility {
public:
    ClosedFormPathUtility(const BSClosedForm& cf, const BrownianPath& path, const std::vector<std::size_t>& steps)
        : cf_(cf), steps_(steps), q_(steps.size()) {
        for (std::size_t k = 0; k < steps.size(); ++k) {
            const auto W = path.value(steps[k]);
            q_[k] = cf.Q(path.time(steps[k]), W[0], W[1]);
        }
    }

    double U(std::size_t step, double x) const override {
        const auto it = std::find(steps_.begin(), steps_.end(), step);
        if (it == steps_.end()) throw DomainError("closed-form utility was not built for step " + std::to_string(step));
        return cf_.U(x, q_[static_cast<std::size_t>(it - steps_.begin())]);
    }

private:
    BSClosedForm cf_;
    std::vector<std::size_t> steps_;
    std::vector<double> q_;
};

class SpdePathUtility : public PathUtility {
public:
    explicit SpdePathUtility(UtilityField field) : field_(std::move(field)) {}
    double U(std::size_t step, double x) const override { return field_.U(field_.at_step(step), x); }
    const UtilityField* field() const override { return &field_; }

private:
    UtilityField field_;
};

}  // namespace

UtilityFactory closed_form_utility(const BSClosedForm& cf) {
    return [cf](const BrownianPath& path, const std::vector<std::size_t>& steps) -> std::unique_ptr<PathUtility> {
        if (path.dims() != 2) throw DomainError("closed-form utility needs a two-factor path");
        return std::make_unique<ClosedFormPathUtility>(cf, path, steps);
    };
}

UtilityFactory spde_utility(FeedbackStrategy strategy, MarketModel market, SpdeUtilitySpec spec) {
    return [strategy = std::move(strategy), market = std::move(market), spec = std::move(spec)](
               const BrownianPath& path, const std::vector<std::size_t>& steps) -> std::unique_ptr<PathUtility> {
        SolveOptions o = spec.solve;
        o.snapshot_steps = steps;
        o.probe_x = spec.x_bar;
        const RSolution sol = solve_R(strategy, market, spec.R0, path, spec.grid, o);
        const AnchorVolatility anchor = spec.anchor ? spec.anchor : zero_anchor(market.num_factors());
        return std::make_unique<SpdePathUtility>(
            integrate_to_U(sol, strategy, market, spec.x_bar, anchor, spec.zeta0, path));
    };
}

DeviationFamily DeviationFamily::standard(const MarketModel& market, double gamma) {
    DeviationFamily f{merton_strategy(market, gamma), {}};
    for (double kappa : {0.5, 1.5, 2.0}) f.deviations.push_back(scaled_merton(market, gamma, kappa));
    f.deviations.push_back(asset2_deviation(market, gamma));
    f.deviations.push_back(zero_strategy(market.num_assets()));
    return f;
}

std::vector<std::size_t> checkpoint_steps(const std::vector<double>& times, double dt) {
    std::vector<std::size_t> out;
    for (double t : times) {
        const double r = t / dt;
        const double n = std::round(r);
        if (!(t >= 0.0) || std::abs(n - r) > 1e-9 * std::max(1.0, r)) {
            throw ConfigError("checkpoint " + fmt(t) + " is not on the time grid");
        }
        out.push_back(static_cast<std::size_t>(n));
    }
    return out;
}

namespace {

// E[U_t(X_t)] at step 0 and every checkpoint. values[k * N + i].
struct Profile {
    std::vector<std::size_t> steps;
    std::vector<double> values;
    std::vector<char> keep;
    double U0 = 0.0;
};

Profile utility_profile(const UtilityFactory& utility, const FeedbackStrategy& strategy, const MarketModel& market,
                        const std::vector<double>& checkpoints, const VerifySpec& spec) {
    Profile p;
    p.steps.push_back(0);
    for (std::size_t s : checkpoint_steps(checkpoints, spec.dt)) p.steps.push_back(s);
    const std::size_t N = spec.paths;
    const std::size_t K = p.steps.size();
    const std::size_t horizon_steps = grid_steps(spec.horizon, spec.dt);
    for (std::size_t s : p.steps)
        if (s > horizon_steps) throw ConfigError("checkpoint beyond the horizon");
    p.values.assign(K * N, 0.0);
    p.keep.assign(N, 1);
    const Arm arm = make_arm(strategy, market);
    auto scratch = make_scratch();
    for_each_index(N, spec.exec, [&](std::size_t i, int w) {
        auto& sc = scratch[static_cast<std::size_t>(w)];
        simulate_brownian_into(sc.path, market.num_factors(), spec.horizon, spec.dt, spec.seed, i);
        sc.values.resize(K);
        const bool floored = run_arm(arm, sc.path, market, StartPoint{spec.x0, 0}, p.steps, sc.values, sc.wealth);
        const auto u = utility(sc.path, p.steps);
        for (std::size_t k = 0; k < K; ++k) p.values[k * N + i] = u->U(p.steps[k], sc.values[k]);
        p.keep[i] = floored ? 0 : 1;
    });
    // U_0 is deterministic; read it off the first path.
    p.U0 = N ? p.values[0] : 0.0;
    return p;
}

}  // namespace

VerificationReport martingale_test(const UtilityFactory& utility, const FeedbackStrategy& strategy,
                                   const MarketModel& market, const std::vector<double>& checkpoints,
                                   const VerifySpec& spec) {
    const auto t0 = Clock::now();
    VerificationReport rep;
    rep.test = "martingale_test";
    rep.seed = spec.seed;
    rep.ensemble_size = spec.paths;
    rep.notes.push_back("arm " + strategy.label() + ": pass if |E[U_t(X_t)] - U_0(X_0)| <= 3 SE at every checkpoint");
    const Profile p = utility_profile(utility, strategy, market, checkpoints, spec);
    const std::size_t N = spec.paths;
    rep.floored = static_cast<std::size_t>(std::count(p.keep.begin(), p.keep.end(), 0));
    for (std::size_t k = 1; k < p.steps.size(); ++k) {
        const Estimate e = mean_and_se(std::span<const double>(p.values.data() + k * N, N), p.keep);
        ArmResult r;
        r.arm = "t=" + fmt(checkpoints[k - 1]);
        r.estimate = e.mean;
        r.se = e.se;
        r.target = p.U0;
        r.tol = 3.0 * e.se;
        r.pass = within(e.mean, p.U0, r.tol);
        rep.rows.push_back(r);
    }
    check_minimum(rep, N, kMinPaths, "ensemble size");
    mark_floored(rep);
    rep.runtime_seconds = seconds_since(t0);
    return rep;
}

VerificationReport supermartingale_profile(const UtilityFactory& utility, const FeedbackStrategy& strategy,
                                           const MarketModel& market, const std::vector<double>& checkpoints,
                                           const VerifySpec& spec, bool expect_strict_decrease) {
    const auto t0 = Clock::now();
    VerificationReport rep;
    rep.test = "supermartingale_profile";
    rep.seed = spec.seed;
    rep.ensemble_size = spec.paths;
    rep.notes.push_back("arm " + strategy.label() +
                        ": pass if E[U] does not increase between checkpoints by more than 2 paired SE" +
                        (expect_strict_decrease ? ", and U_0(X_0) - E[U_T(X_T)] > 2 SE" : ""));
    const Profile p = utility_profile(utility, strategy, market, checkpoints, spec);
    const std::size_t N = spec.paths;
    rep.floored = static_cast<std::size_t>(std::count(p.keep.begin(), p.keep.end(), 0));
    std::vector<double> diff(N);
    for (std::size_t k = 1; k < p.steps.size(); ++k) {
        const Estimate e = mean_and_se(std::span<const double>(p.values.data() + k * N, N), p.keep);
        for (std::size_t i = 0; i < N; ++i) diff[i] = p.values[k * N + i] - p.values[(k - 1) * N + i];
        const Estimate de = mean_and_se(diff, p.keep);
        ArmResult r;
        r.arm = "t=" + fmt(checkpoints[k - 1]);
        r.estimate = e.mean;
        r.se = e.se;
        r.target = e.mean - de.mean;  // previous checkpoint, same paths
        r.tol = 2.0 * de.se;
        r.pass = de.mean <= r.tol + slack(r.target);
        r.note = "increment " + fmt(de.mean) + " +- " + fmt(de.se);
        rep.rows.push_back(r);
    }
    if (expect_strict_decrease && p.steps.size() > 1) {
        const std::size_t last = p.steps.size() - 1;
        for (std::size_t i = 0; i < N; ++i) diff[i] = p.values[i] - p.values[last * N + i];
        const Estimate de = mean_and_se(diff, p.keep);
        ArmResult r;
        r.arm = "decrease";
        r.estimate = de.mean;
        r.se = de.se;
        r.target = 0.0;
        r.tol = 2.0 * de.se;
        r.pass = de.mean > r.tol;
        rep.rows.push_back(r);
    }
    check_minimum(rep, N, kMinPaths, "ensemble size");
    mark_floored(rep);
    rep.runtime_seconds = seconds_since(t0);
    return rep;
}

VerificationReport deviation_test(const Contract& contract, const DeviationFamily& family, const MarketModel& market,
                                  const VerifySpec& spec, const UtilityFactory& utility) {
    const auto t0 = Clock::now();
    VerificationReport rep;
    rep.test = "deviation_test";
    rep.seed = spec.seed;
    rep.ensemble_size = spec.paths;
    rep.notes.push_back("control: pass if |E[C(X_T)] - u0| <= 3 SE");
    rep.notes.push_back("deviation: pass if u0 - E[C(X_T)] > 2 SE and control - deviation > 2 paired SE "
                        "(common random numbers)");

    std::vector<Arm> arms{make_arm(family.control, market)};
    for (const auto& s : family.deviations) arms.push_back(make_arm(s, market));
    const std::size_t A = arms.size();
    const std::size_t N = spec.paths;
    const std::size_t n_steps = grid_steps(spec.horizon, spec.dt);
    const std::vector<std::size_t> last{n_steps};
    std::vector<double> pay(A * N);
    std::vector<char> keep(N, 1);
    auto scratch = make_scratch();
    for_each_index(N, spec.exec, [&](std::size_t i, int w) {
        auto& sc = scratch[static_cast<std::size_t>(w)];
        simulate_brownian_into(sc.path, market.num_factors(), spec.horizon, spec.dt, spec.seed, i);
        terminal_ratios(sc.path, market, sc.ratios);
        std::unique_ptr<PathUtility> u;
        if (utility) u = utility(sc.path, last);
        const MarketState state{spec.horizon, sc.path.value(n_steps), sc.ratios, u ? u->field() : nullptr};
        double x = 0.0;
        for (std::size_t a = 0; a < A; ++a) {
            if (run_arm(arms[a], sc.path, market, StartPoint{spec.x0, 0}, last, std::span<double>(&x, 1), sc.wealth)) {
                keep[i] = 0;
            }
            pay[a * N + i] = contract(x, state);
        }
    });
    rep.floored = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 0));

    const double u0 = contract.u0();
    const Estimate ctrl = mean_and_se(std::span<const double>(pay.data(), N), keep);
    rep.rows.push_back({"control:" + family.control.label(), ctrl.mean, ctrl.se, u0, 3.0 * ctrl.se,
                        within(ctrl.mean, u0, 3.0 * ctrl.se), ""});
    std::vector<double> diff(N);
    for (std::size_t a = 1; a < A; ++a) {
        const Estimate e = mean_and_se(std::span<const double>(pay.data() + a * N, N), keep);
        for (std::size_t i = 0; i < N; ++i) diff[i] = pay[i] - pay[a * N + i];
        const Estimate de = mean_and_se(diff, keep);
        ArmResult r;
        r.arm = family.deviations[a - 1].label();
        r.estimate = e.mean;
        r.se = e.se;
        r.target = u0;
        r.tol = 2.0 * e.se;
        const bool below = u0 - e.mean > r.tol;
        const bool dominated = de.mean > 2.0 * de.se;
        r.pass = below && dominated;
        r.note = "control - arm = " + fmt(de.mean) + " +- " + fmt(de.se);
        if (!dominated) r.note += "; arm " + r.arm + " not dominated by the control";
        rep.rows.push_back(r);
    }
    check_minimum(rep, N, kMinPaths, "ensemble size");
    mark_floored(rep);
    rep.runtime_seconds = seconds_since(t0);
    return rep;
}

std::size_t hermite_regressor_count(int d) {
    const auto n = static_cast<std::size_t>(d);
    return (n + 3) * (n + 2) * (n + 1) / 6 - 1;
}

void hermite_regressors(std::span<const double> z, std::span<double> out) {
    const std::size_t d = z.size();
    auto he = [](int n, double x) {
        switch (n) {
            case 0: return 1.0;
            case 1: return x;
            case 2: return x * x - 1.0;
            default: return x * x * x - 3.0 * x;
        }
    };
    std::size_t k = 0;
    // Multi-indices of total degree 1..3 in lexicographic order.
    std::vector<int> alpha(d, 0);
    auto emit = [&]() {
        double v = 1.0;
        for (std::size_t r = 0; r < d; ++r)
            if (alpha[r]) v *= he(alpha[r], z[r]);
        out[k++] = v;
    };
    for (int deg = 1; deg <= 3; ++deg) {
        // enumerate compositions of deg into d parts
        std::function<void(std::size_t, int)> rec = [&](std::size_t pos, int left) {
            if (pos + 1 == d) {
                alpha[pos] = left;
                emit();
                return;
            }
            for (int a = left; a >= 0; --a) {
                alpha[pos] = a;
                rec(pos + 1, left - a);
            }
        };
        rec(0, deg);
    }
}

Estimate control_variate_mean(std::span<const double> y, std::span<const double> h, std::size_t p) {
    const std::size_t n = y.size();
    if (n < 4 * (p + 2)) return mean_and_se(y);
    using Mat = Eigen::MatrixXd;
    using Vec = Eigen::VectorXd;
    // Fit on one fold, apply to the other.
    auto fit = [&](std::size_t fold) {
        std::size_t m = 0;
        for (std::size_t i = fold; i < n; i += 2) ++m;
        Mat H(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(p));
        Vec Y(static_cast<Eigen::Index>(m));
        std::size_t r = 0;
        for (std::size_t i = fold; i < n; i += 2, ++r) {
            for (std::size_t j = 0; j < p; ++j) H(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = h[i * p + j];
            Y(static_cast<Eigen::Index>(r)) = y[i];
        }
        const Vec hm = H.colwise().mean();
        H.rowwise() -= hm.transpose();
        Y.array() -= Y.mean();
        Vec beta = (H.transpose() * H).ldlt().solve(H.transpose() * Y);
        if (!beta.allFinite()) beta.setZero();
        return beta;
    };
    const Vec beta_even = fit(0), beta_odd = fit(1);
    std::vector<double> adj(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec& beta = (i % 2 == 0) ? beta_odd : beta_even;
        double c = 0.0;
        for (std::size_t j = 0; j < p; ++j) c += beta(static_cast<Eigen::Index>(j)) * h[i * p + j];
        adj[i] = y[i] - c;
    }
    return mean_and_se(adj);
}

VerificationReport injection_robustness_test(const Contract& contract, const DeviationFamily& family,
                                             const InjectionEvent& scenario, const UtilityFactory& utility,
                                             const MarketModel& market, const VerifySpec& spec,
                                             const NestedSpec& nested, const std::string& label) {
    const auto t0 = Clock::now();
    VerificationReport rep;
    rep.test = "injection_robustness_test";
    rep.seed = spec.seed;
    rep.ensemble_size = nested.outer * nested.inner;
    const std::string prefix = label.empty() ? "" : label + ":";
    rep.notes.push_back(prefix + "scenario " +
                        std::string(scenario.kind == InjectionEvent::Kind::multiplier ? "multiplier" : "absolute") +
                        " at t=" + fmt(scenario.time) + " value " + fmt(scenario.value) + "; outer " +
                        std::to_string(nested.outer) + " x inner " + std::to_string(nested.inner));
    rep.notes.push_back(prefix + "control continuation must beat each deviation by > 2 inner SE on >= " +
                        fmt(100.0 * nested.pass_fraction) + "% of outer paths, and its mean conditional payout "
                        "must match u0 U_tau(xi) / U_0(X_0) within 3 SE");
    rep.notes.push_back(prefix + "inner means use cubic Hermite control variates in the continuation increment, "
                        "two-fold cross-fitted");

    const int d = market.num_factors();
    const auto du = static_cast<std::size_t>(d);
    const std::size_t n_steps = grid_steps(spec.horizon, spec.dt);
    const std::size_t tau = checkpoint_steps({scenario.time}, spec.dt)[0];
    if (tau > n_steps) throw ConfigError("injection time beyond the horizon");
    const std::size_t rest = n_steps - tau;
    const double sqrt_rest = std::sqrt(static_cast<double>(rest) * spec.dt);

    std::vector<Arm> arms{make_arm(family.control, market)};
    for (const auto& s : family.deviations) arms.push_back(make_arm(s, market));
    const std::size_t A = arms.size();
    const std::size_t D = A - 1;
    const std::size_t P = hermite_regressor_count(d);
    const std::size_t NO = nested.outer, NI = nested.inner;

    std::vector<double> cond_mean(NO), cond_se(NO), target(NO);
    std::vector<char> beats(NO * D, 0);
    std::vector<double> diff_mean(NO * D);
    std::vector<std::size_t> floored(NO, 0);

    const std::vector<std::size_t> utility_steps{0, tau};
    const std::vector<std::size_t> last{n_steps};
    const std::vector<std::size_t> at_tau{tau};

    struct NestedScratch {
        BrownianPath outer, inner;
        WealthPath wealth;
        std::vector<double> increments, ratios, y, h, ydiff, hk;
        std::vector<char> ok;
    };
    std::vector<NestedScratch> scratch(static_cast<std::size_t>(worker_count()));
    double U0 = std::numeric_limits<double>::quiet_NaN();
    {
        BrownianPath p0 = simulate_brownian(d, spec.horizon, spec.dt, spec.seed, 0);
        U0 = utility(p0, utility_steps)->U(0, spec.x0);
    }
    if (!(U0 > 0.0)) throw NormalizationError("U_0(X_0) must be positive");

    for_each_index(NO, spec.exec, [&](std::size_t o, int w) {
        auto& sc = scratch[static_cast<std::size_t>(w)];
        simulate_brownian_into(sc.outer, d, spec.horizon, spec.dt, spec.seed, o);
        double x_tau = 0.0;
        run_arm(arms[0], sc.outer, market, StartPoint{spec.x0, 0}, at_tau, std::span<double>(&x_tau, 1), sc.wealth);
        const double xi = scenario.apply(x_tau);
        if (!(xi > 0.0)) throw DomainError("injection scenario produced non-positive wealth; scenario rejected");
        target[o] = contract.u0() * utility(sc.outer, utility_steps)->U(tau, xi) / U0;

        sc.increments.resize(n_steps * du);
        const auto prefix_inc = sc.outer.increments();
        std::copy(prefix_inc.begin(), prefix_inc.begin() + static_cast<std::ptrdiff_t>(tau * du), sc.increments.begin());
        sc.y.assign(A * NI, 0.0);
        sc.h.assign(NI * P, 0.0);
        sc.ok.assign(NI, 1);
        std::vector<double> z(du);
        for (std::size_t i = 0; i < NI; ++i) {
            NormalSource normal(Pcg32(inner_seed(spec.seed), derive_stream(o, i)));
            const double sq = std::sqrt(spec.dt);
            std::fill(z.begin(), z.end(), 0.0);
            for (std::size_t s = tau; s < n_steps; ++s) {
                for (std::size_t r = 0; r < du; ++r) {
                    const double dw = sq * normal();
                    sc.increments[s * du + r] = dw;
                    z[r] += dw;
                }
            }
            for (double& v : z) v = rest ? v / sqrt_rest : 0.0;
            hermite_regressors(z, std::span<double>(sc.h.data() + i * P, P));
            sc.inner.assign_increments(d, spec.dt, sc.increments, spec.seed, o);
            terminal_ratios(sc.inner, market, sc.ratios);
            const MarketState state{spec.horizon, sc.inner.value(n_steps), sc.ratios, nullptr};
            for (std::size_t a = 0; a < A; ++a) {
                double x = 0.0;
                if (run_arm(arms[a], sc.inner, market, StartPoint{xi, tau}, last, std::span<double>(&x, 1),
                            sc.wealth)) {
                    sc.ok[i] = 0;
                }
                sc.y[a * NI + i] = contract(x, state);
            }
        }
        // Drop floored continuations.
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < NI; ++i)
            if (sc.ok[i]) idx.push_back(i);
        floored[o] = NI - idx.size();
        const std::size_t m = idx.size();
        sc.hk.resize(m * P);
        for (std::size_t j = 0; j < m; ++j)
            std::copy_n(sc.h.begin() + static_cast<std::ptrdiff_t>(idx[j] * P), P,
                        sc.hk.begin() + static_cast<std::ptrdiff_t>(j * P));
        std::vector<double> yk(m);
        for (std::size_t j = 0; j < m; ++j) yk[j] = sc.y[idx[j]];
        const Estimate c = control_variate_mean(yk, sc.hk, P);
        cond_mean[o] = c.mean;
        cond_se[o] = c.se;
        for (std::size_t a = 1; a < A; ++a) {
            for (std::size_t j = 0; j < m; ++j) yk[j] = sc.y[idx[j]] - sc.y[a * NI + idx[j]];
            const Estimate de = control_variate_mean(yk, sc.hk, P);
            diff_mean[o * D + (a - 1)] = de.mean;
            beats[o * D + (a - 1)] = de.mean > 2.0 * de.se ? 1 : 0;
        }
    });

    rep.floored = std::accumulate(floored.begin(), floored.end(), std::size_t{0});

    double sum_m = 0.0, sum_t = 0.0, sum_v = 0.0;
    for (std::size_t o = 0; o < NO; ++o) {
        sum_m += cond_mean[o];
        sum_t += target[o];
        sum_v += cond_se[o] * cond_se[o];
    }
    const double n_o = static_cast<double>(NO);
    ArmResult match;
    match.arm = prefix + "control:" + family.control.label();
    match.estimate = sum_m / n_o;
    match.target = sum_t / n_o;
    match.se = std::sqrt(sum_v) / n_o;
    match.tol = 3.0 * match.se;
    match.pass = within(match.estimate, match.target, match.tol);
    match.note = "mean over outer paths of E[C | F_tau] against u0 U_tau(xi) / U_0(X_0)";
    rep.rows.push_back(match);
    for (std::size_t a = 0; a < D; ++a) {
        std::size_t wins = 0;
        double md = 0.0;
        for (std::size_t o = 0; o < NO; ++o) {
            wins += beats[o * D + a];
            md += diff_mean[o * D + a];
        }
        const double frac = static_cast<double>(wins) / n_o;
        ArmResult r;
        r.arm = prefix + family.deviations[a].label();
        r.estimate = frac;
        r.se = std::sqrt(frac * (1.0 - frac) / n_o);
        r.target = nested.pass_fraction;
        r.tol = 0.0;
        r.pass = frac >= nested.pass_fraction;
        r.note = "fraction of outer paths where the control beats this arm; mean gap " + fmt(md / n_o);
        rep.rows.push_back(r);
    }
    check_minimum(rep, NO, kMinNested, "outer ensemble");
    if (!rep.invalid) check_minimum(rep, NI, kMinNested, "inner ensemble");
    mark_floored(rep);
    rep.runtime_seconds = seconds_since(t0);
    return rep;
}

namespace {

bool touches_other_assets(const FeedbackStrategy& s, const MarketModel& market, const VerifySpec& spec) {
    if (s.constant_proportion()) {
        const SmallVec& c = *s.constant_proportion();
        for (int j = 1; j < c.size(); ++j)
            if (c(j) != 0.0) return true;
        return false;
    }
    // Sampled along one path at a few wealth levels.
    const BrownianPath p = simulate_brownian(market.num_factors(), spec.horizon, spec.dt, spec.seed, 0);
    for (std::size_t i = 0; i <= p.steps(); ++i) {
        for (double f : {0.5, 1.0, 2.0}) {
            const SmallVec h = s.holdings(PathView{&p, i}, f * spec.x0);
            for (int j = 1; j < h.size(); ++j)
                if (h(j) != 0.0) return true;
        }
    }
    return false;
}

}  // namespace

VerificationReport principal_value_test(const FeedbackStrategy& control, const std::vector<FeedbackStrategy>& others,
                                        const MarketModel& market, double gamma, const VerifySpec& spec) {
    const auto t0 = Clock::now();
    validate_gamma(gamma);
    if (!market.is_constant()) throw DomainError("principal_value_test needs constant market coefficients");
    VerificationReport rep;
    rep.test = "principal_value_test";
    rep.seed = spec.seed;
    rep.ensemble_size = spec.paths;
    rep.notes.push_back("control: pass if |E[X_T^gamma]/gamma - V(0,X_0)| <= 3 SE");
    rep.notes.push_back("others: pass if E[X_T^gamma]/gamma <= V(0,X_0) + 3 SE; holdings in assets 2..k give J = -inf");

    const double V0 = bs_value_function(0.0, spec.x0, spec.horizon, market.constant_coefficients().lambda(0), gamma);
    std::vector<const FeedbackStrategy*> all{&control};
    for (const auto& s : others) all.push_back(&s);
    std::vector<Arm> arms;
    for (const auto* s : all) arms.push_back(make_arm(*s, market));
    const std::size_t A = arms.size();
    const std::size_t N = spec.paths;
    const std::size_t n_steps = grid_steps(spec.horizon, spec.dt);
    const std::vector<std::size_t> last{n_steps};
    std::vector<double> val(A * N);
    std::vector<char> keep(N, 1);
    auto scratch = make_scratch();
    for_each_index(N, spec.exec, [&](std::size_t i, int w) {
        auto& sc = scratch[static_cast<std::size_t>(w)];
        simulate_brownian_into(sc.path, market.num_factors(), spec.horizon, spec.dt, spec.seed, i);
        for (std::size_t a = 0; a < A; ++a) {
            double x = 0.0;
            if (run_arm(arms[a], sc.path, market, StartPoint{spec.x0, 0}, last, std::span<double>(&x, 1), sc.wealth)) {
                keep[i] = 0;
            }
            val[a * N + i] = std::pow(x, gamma) / gamma;
        }
    });
    rep.floored = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 0));
    for (std::size_t a = 0; a < A; ++a) {
        ArmResult r;
        r.arm = (a == 0 ? "control:" : "") + all[a]->label();
        r.target = V0;
        if (touches_other_assets(*all[a], market, spec)) {
            r.estimate = -std::numeric_limits<double>::infinity();
            r.pass = a != 0;
            r.note = "constraint violated, J = -inf";
            rep.rows.push_back(r);
            continue;
        }
        const Estimate e = mean_and_se(std::span<const double>(val.data() + a * N, N), keep);
        r.estimate = e.mean;
        r.se = e.se;
        r.tol = 3.0 * e.se;
        r.pass = a == 0 ? within(e.mean, V0, r.tol) : e.mean <= V0 + r.tol + slack(V0);
        rep.rows.push_back(r);
    }
    check_minimum(rep, N, kMinPaths, "ensemble size");
    mark_floored(rep);
    rep.runtime_seconds = seconds_since(t0);
    return rep;
}

TargetRule merton_terminal_wealth_rule(const MarketModel& market, double gamma, double x0, double horizon) {
    if (!market.is_constant()) throw DomainError("the Merton target needs constant market coefficients");
    const Coefficients& c = market.constant_coefficients();
    SmallVec prop = SmallVec::Zero(market.num_assets());
    prop(0) = merton_proportion(market, gamma);
    const SmallVec e = c.sigma * prop;
    const double drift = e.dot(c.lambda) - 0.5 * e.squaredNorm();
    std::vector<double> ev(e.data(), e.data() + e.size());
    return [ev, drift, x0, horizon](const MarketState& s) {
        double l = drift * horizon;
        for (std::size_t r = 0; r < ev.size(); ++r) l += ev[r] * s.W[r];
        return x0 * std::exp(l);
    };
}

SpdeErrors spde_path_errors(const BSClosedForm& cf, const SpdeCheckSpec& spec, std::size_t path_index) {
    const MarketModel market = MarketModel::black_scholes(cf.market);
    const FeedbackStrategy merton = merton_strategy(market, cf.gamma);
    const BrownianPath path = simulate_brownian(2, spec.horizon, spec.dt, spec.seed, path_index);
    const double e = cf.epsilon;
    const InitialDensity R0 = [e](double x) { return std::pow(x, -1.0 - e); };

    SolveOptions o;
    o.probe_x = spec.x_bar;
    o.exec = Exec::serial;
    if (spec.snapshots > 0) {
        const std::size_t n = path.steps();
        for (std::size_t k = 0; k <= spec.snapshots; ++k) o.snapshot_steps.push_back(k * n / spec.snapshots);
    }
    const RSolution sol = solve_R(merton, market, R0, path, spec.grid, o);
    const UtilityField field = integrate_to_U(sol, merton, market, spec.x_bar, closed_form_anchor(cf),
                                              closed_form_zeta0(cf, spec.x_bar), path);
    const double lam = std::hypot(cf.lambda1, cf.lambda2);
    SpdeErrors err;
    const std::size_t M = spec.grid.points;
    for (const auto& s : field.snapshots) {
        const auto W = path.value(s.step);
        const double q = cf.Q(s.t, W[0], W[1]);
        const double a1 = -cf.loading1(), a2 = -cf.loading2();
        for (std::size_t i = 0; i < M; ++i) {
            const double x = spec.grid.x(i);
            const double r_exact = cf.R(x, q);
            const double u_exact = cf.U(x, q);
            const double er = std::abs(s.R[i] / r_exact - 1.0);
            err.R = std::max(err.R, er);
            if (s.step == 0) err.R_initial = std::max(err.R_initial, er);
            err.U = std::max(err.U, std::abs(s.U[i] / u_exact - 1.0));
            const double da = std::hypot(s.a[2 * i] - a1 * u_exact, s.a[2 * i + 1] - a2 * u_exact);
            err.a = std::max(err.a, da / (lam * u_exact));
        }
    }
    return err;
}

VerificationReport spde_vs_closed_form(const BSClosedForm& cf, const SpdeCheckSpec& spec) {
    const auto t0 = Clock::now();
    VerificationReport rep;
    rep.test = "spde_vs_closed_form";
    rep.seed = spec.seed;
    rep.ensemble_size = spec.paths;
    rep.notes.push_back("epsilon " + fmt(cf.epsilon) + ", M " + std::to_string(spec.grid.points) + ", dt " +
                        fmt(spec.dt) + ": pass if the max over paths of the max-node relative error of R < " +
                        fmt(spec.tolerance));
    std::vector<SpdeErrors> errs(spec.paths);
    for_each_index(spec.paths, spec.exec, [&](std::size_t i, int) { errs[i] = spde_path_errors(cf, spec, i); });
    auto add = [&](const char* name, auto get, bool gate) {
        std::vector<double> v(errs.size());
        std::transform(errs.begin(), errs.end(), v.begin(), get);
        std::sort(v.begin(), v.end());
        const double mx = v.back();
        const double med = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
        rep.rows.push_back({std::string(name) + " max", mx, 0.0, 0.0, spec.tolerance, !gate || mx < spec.tolerance,
                            gate ? "" : "reported only"});
        rep.rows.push_back({std::string(name) + " median", med, 0.0, 0.0, spec.tolerance, true, "reported only"});
    };
    add("R", [](const SpdeErrors& e) { return e.R; }, true);
    add("U", [](const SpdeErrors& e) { return e.U; }, false);
    add("a", [](const SpdeErrors& e) { return e.a; }, false);
    double r0 = 0.0;
    for (const auto& e : errs) r0 = std::max(r0, e.R_initial);
    // stored as log R, so only round-off is expected
    rep.rows.push_back({"R at t=0", r0, 0.0, 0.0, 1e-12, r0 < 1e-12, ""});
    rep.runtime_seconds = seconds_since(t0);
    return rep;
}

}  // namespace fwdperf
