#include "fwdperf/strategy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

namespace fwdperf {

FeedbackStrategy FeedbackStrategy::proportional(std::string label, int num_assets, ProportionFn c) {
    FeedbackStrategy s;
    s.label_ = std::move(label);
    s.k_ = num_assets;
    s.proportion_ = std::move(c);
    s.rule_ = [p = s.proportion_](const PathView& v, double x) -> SmallVec { return p(v) * x; };
    s.derivative_ = [p = s.proportion_, k = num_assets](const PathView& v, double, int order) -> SmallVec {
        if (order == 0) return p(v);
        return SmallVec::Zero(k);
    };
    return s;
}

FeedbackStrategy FeedbackStrategy::constant_proportional(std::string label, const SmallVec& c) {
    FeedbackStrategy s = proportional(std::move(label), static_cast<int>(c.size()), [c](const PathView&) { return c; });
    s.constant_ = c;
    return s;
}

FeedbackStrategy FeedbackStrategy::from_rule(std::string label, int num_assets, Rule rule,
                                             ProportionDerivative derivatives) {
    FeedbackStrategy s;
    s.label_ = std::move(label);
    s.k_ = num_assets;
    s.rule_ = std::move(rule);
    s.derivative_ = std::move(derivatives);
    return s;
}

SmallVec FeedbackStrategy::holdings(const PathView& view, double x) const { return rule_(view, x); }

SmallVec FeedbackStrategy::proportion_derivative(const PathView& view, double z, int order) const {
    if (!derivative_) throw CoefficientError("strategy '" + label_ + "' has no analytic derivatives");
    return derivative_(view, z, order);
}

FeedbackStrategy FeedbackStrategy::relabeled(std::string label) const {
    FeedbackStrategy s = *this;
    s.label_ = std::move(label);
    return s;
}

void validate_gamma(double gamma) {
    if (!std::isfinite(gamma) || gamma == 0.0 || gamma >= 1.0) {
        std::ostringstream msg;
        msg << "gamma = " << gamma << " is outside the domain (-inf,0) U (0,1)";
        throw DomainError(msg.str());
    }
}

double merton_proportion(const MarketModel& market, double gamma) {
    validate_gamma(gamma);
    if (!market.is_constant()) throw DomainError("the Merton strategy needs constant market coefficients");
    const Coefficients& c = market.constant_coefficients();
    return c.lambda(0) / (c.sigma(0, 0) * (1.0 - gamma));
}

FeedbackStrategy merton_strategy(const MarketModel& market, double gamma) {
    SmallVec c = SmallVec::Zero(market.num_assets());
    c(0) = merton_proportion(market, gamma);
    return FeedbackStrategy::constant_proportional("merton", c);
}

FeedbackStrategy scaled_merton(const MarketModel& market, double gamma, double kappa) {
    SmallVec c = SmallVec::Zero(market.num_assets());
    c(0) = kappa * merton_proportion(market, gamma);
    std::ostringstream label;
    label << "scaled-merton " << kappa;
    return FeedbackStrategy::constant_proportional(label.str(), c);
}

FeedbackStrategy asset2_deviation(const MarketModel& market, double gamma) {
    if (market.num_assets() < 2) throw DomainError("asset2-deviation needs at least two assets");
    SmallVec c = SmallVec::Zero(market.num_assets());
    c(0) = merton_proportion(market, gamma);
    c(1) = 1.0;
    return FeedbackStrategy::constant_proportional("asset2-deviation", c);
}

FeedbackStrategy zero_strategy(int num_assets) {
    return FeedbackStrategy::constant_proportional("zero", SmallVec::Zero(num_assets));
}

namespace {

std::size_t injection_step(const InjectionEvent& e, double dt) {
    const double r = e.time / dt;
    const double n = std::round(r);
    if (!(e.time >= 0.0) || std::abs(n - r) > 1e-9 * std::max(1.0, r)) {
        std::ostringstream msg;
        msg << "injection time " << e.time << " is not on the time grid";
        throw ConfigError(msg.str());
    }
    return static_cast<std::size_t>(n);
}

}  // namespace

void simulate_wealth_into(WealthPath& out, const FeedbackStrategy& strategy, const BrownianPath& path,
                          const MarketModel& market, const StartPoint& start, const InjectionSchedule& injections,
                          double floor_fraction) {
    if (!(start.xi > 0.0)) throw DomainError("initial wealth must be positive");
    if (start.step > path.steps()) throw DomainError("start step lies beyond the path");
    if (strategy.num_assets() != market.num_assets()) throw DomainError("strategy and market disagree on k");

    const std::size_t n = path.steps();
    const double dt = path.dt();
    out.label = strategy.label();
    out.start_step = start.step;
    out.xi = start.xi;
    out.dt = dt;
    out.floored = false;
    out.X.assign(n - start.step + 1, 0.0);
    out.flags.assign(n - start.step + 1, 0);
    out.X[0] = start.xi;

    // Events strictly after the start; (xi, tau) itself is the start.
    std::vector<std::pair<std::size_t, const InjectionEvent*>> events;
    for (const auto& e : injections.events) {
        const std::size_t s = injection_step(e, dt);
        if (s > n) throw ConfigError("injection time lies beyond the horizon");
        if (s > start.step) events.emplace_back(s, &e);
    }
    std::stable_sort(events.begin(), events.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    auto next_event = events.begin();

    const double floor = floor_fraction * start.xi;
    const int d = market.num_factors();

    // Constant coefficients and constant proportion: exact log-stepping with
    // a precomputed exposure.
    const bool fast = market.is_constant() && strategy.constant_proportion().has_value();
    SmallVec exposure;
    double log_drift = 0.0;
    if (fast) {
        const Coefficients& c = market.constant_coefficients();
        exposure = c.sigma * (*strategy.constant_proportion());
        log_drift = exposure.dot(c.lambda) - 0.5 * exposure.squaredNorm();
    }

    double x = start.xi;
    for (std::size_t i = start.step; i < n; ++i) {
        const std::size_t j = i - start.step;
        const auto dw = path.increment(i);
        if (out.floored) {
            out.X[j + 1] = x;
            out.flags[j + 1] |= WealthPath::kFloored;
            continue;
        }
        if (fast) {
            double noise = 0.0;
            for (int r = 0; r < d; ++r) noise += exposure(r) * dw[static_cast<std::size_t>(r)];
            x *= std::exp(log_drift * dt + noise);
        } else {
            const PathView view{&path, i};
            const Coefficients c = market.at(view);
            if (strategy.is_proportional()) {
                const SmallVec e = c.sigma * strategy.proportion(view);
                double noise = 0.0;
                for (int r = 0; r < d; ++r) noise += e(r) * dw[static_cast<std::size_t>(r)];
                x *= std::exp((e.dot(c.lambda) - 0.5 * e.squaredNorm()) * dt + noise);
            } else {
                const SmallVec e = c.sigma * strategy.holdings(view, x);
                double noise = 0.0;
                for (int r = 0; r < d; ++r) noise += e(r) * dw[static_cast<std::size_t>(r)];
                x += e.dot(c.lambda) * dt + noise;
            }
        }
        if (!(x > floor)) {
            x = floor;
            out.floored = true;
            out.flags[j + 1] |= WealthPath::kFloored;
        }
        while (next_event != events.end() && next_event->first == i + 1) {
            x = next_event->second->apply(x);
            if (!(x > 0.0)) throw DomainError("injection produced non-positive wealth");
            out.flags[j + 1] |= WealthPath::kInjected;
            ++next_event;
        }
        out.X[j + 1] = x;
    }
}

WealthPath simulate_wealth(const FeedbackStrategy& strategy, const BrownianPath& path, const MarketModel& market,
                           const StartPoint& start, const InjectionSchedule& injections, double floor_fraction) {
    WealthPath w;
    simulate_wealth_into(w, strategy, path, market, start, injections, floor_fraction);
    return w;
}

void write_wealth_csv(std::ostream& os, const WealthPath& w) {
    os << "t,X,flags\n";
    const auto old_prec = os.precision(17);
    for (std::size_t j = 0; j < w.X.size(); ++j) {
        os << w.dt * static_cast<double>(w.start_step + j) << ',' << w.X[j] << ',';
        const unsigned char f = w.flags[j];
        if (f == 0) os << "none";
        if (f & WealthPath::kInjected) os << "injected";
        if ((f & WealthPath::kInjected) && (f & WealthPath::kFloored)) os << '|';
        if (f & WealthPath::kFloored) os << "floored";
        os << '\n';
    }
    os.precision(old_prec);
}

std::vector<std::vector<double>> proportion_derivatives_on_grid(const FeedbackStrategy& strategy, const PathView& view,
                                                                double z_min, double dz, std::size_t points,
                                                                int max_order) {
    const auto k = static_cast<std::size_t>(strategy.num_assets());
    std::vector<std::vector<double>> out(static_cast<std::size_t>(max_order) + 1,
                                         std::vector<double>(points * k, 0.0));
    if (strategy.has_analytic_derivatives()) {
        for (int m = 0; m <= max_order; ++m) {
            for (std::size_t i = 0; i < points; ++i) {
                const SmallVec v = strategy.proportion_derivative(view, z_min + dz * static_cast<double>(i), m);
                for (std::size_t j = 0; j < k; ++j) out[static_cast<std::size_t>(m)][i * k + j] = v(static_cast<Eigen::Index>(j));
            }
        }
        return out;
    }
    // Padded grid; order m = 2q + r uses D2^q D1^r and consumes q + r nodes
    // on each side.
    const auto pad = static_cast<std::size_t>(max_order);
    const std::size_t ext = points + 2 * pad;
    std::vector<double> f(ext * k);
    for (std::size_t i = 0; i < ext; ++i) {
        const double z = z_min + dz * (static_cast<double>(i) - static_cast<double>(pad));
        const SmallVec h = strategy.holdings(view, std::exp(z));
        for (std::size_t j = 0; j < k; ++j) f[i * k + j] = std::exp(-z) * h(static_cast<Eigen::Index>(j));
    }
    auto d1 = [&](const std::vector<double>& g) {
        std::vector<double> r(g.size(), std::numeric_limits<double>::quiet_NaN());
        for (std::size_t i = 1; i + 1 < ext; ++i)
            for (std::size_t j = 0; j < k; ++j) r[i * k + j] = (g[(i + 1) * k + j] - g[(i - 1) * k + j]) / (2.0 * dz);
        return r;
    };
    auto d2 = [&](const std::vector<double>& g) {
        std::vector<double> r(g.size(), std::numeric_limits<double>::quiet_NaN());
        for (std::size_t i = 1; i + 1 < ext; ++i)
            for (std::size_t j = 0; j < k; ++j)
                r[i * k + j] = (g[(i + 1) * k + j] - 2.0 * g[i * k + j] + g[(i - 1) * k + j]) / (dz * dz);
        return r;
    };
    for (int m = 0; m <= max_order; ++m) {
        std::vector<double> g = f;
        for (int q = 0; q < m / 2; ++q) g = d2(g);
        if (m % 2) g = d1(g);
        for (std::size_t i = 0; i < points; ++i)
            for (std::size_t j = 0; j < k; ++j) out[static_cast<std::size_t>(m)][i * k + j] = g[(i + pad) * k + j];
    }
    return out;
}

RegularityReport check_regularity(const FeedbackStrategy& strategy, const MarketModel& market, const PathView& view,
                                  double z_min, double z_max, std::size_t points, double max_abs) {
    if (points < 8 || !(z_max > z_min)) throw DomainError("check_regularity: bad grid");
    const double dz = (z_max - z_min) / static_cast<double>(points - 1);
    const auto derivs = proportion_derivatives_on_grid(strategy, view, z_min, dz, points, 5);
    const Coefficients c = market.at(view);
    const auto k = static_cast<std::size_t>(strategy.num_assets());
    const int d = market.num_factors();

    // A bounded derivative should not be dominated by the grid edges: compare
    // the sup over the outer tenth on either side with the sup over the
    // central half of the grid.
    const std::size_t edge = std::max<std::size_t>(1, points / 10);
    const std::size_t inner_lo = points / 4, inner_hi = points - points / 4;

    RegularityReport rep;
    for (int m = 0; m <= 5; ++m) {
        double sup = 0.0, sup_inner = 0.0, sup_edge = 0.0;
        bool finite = true;
        for (std::size_t i = 0; i < points; ++i) {
            SmallVec p(static_cast<Eigen::Index>(k));
            for (std::size_t j = 0; j < k; ++j) p(static_cast<Eigen::Index>(j)) = derivs[static_cast<std::size_t>(m)][i * k + j];
            const SmallVec b = c.sigma * p;
            for (int r = 0; r < d; ++r) {
                const double v = std::abs(b(r));
                if (!std::isfinite(v)) finite = false;
                sup = std::max(sup, v);
                if (i >= inner_lo && i < inner_hi) sup_inner = std::max(sup_inner, v);
                if (i < edge || i >= points - edge) sup_edge = std::max(sup_edge, v);
            }
        }
        rep.sup[static_cast<std::size_t>(m)] = sup;
        const bool grows = sup_edge > 10.0 * sup_inner && sup_edge > 1e-12;
        if (!finite || grows || sup > max_abs) rep.violating_orders.push_back(m);
    }
    return rep;
}

AdmissibilityReport check_admissibility(const FeedbackStrategy& strategy, const MarketModel& market, double gamma,
                                        const EnsembleSpec& ens) {
    validate_gamma(gamma);
    AdmissibilityReport rep;
    rep.label = strategy.label();
    rep.ensemble_size = ens.paths;

    std::vector<double> sup_x(ens.paths), sup_pow(ens.paths);
    std::vector<char> keep(ens.paths, 1);
    std::vector<BrownianPath> path_buf(static_cast<std::size_t>(worker_count()));
    std::vector<WealthPath> wealth_buf(static_cast<std::size_t>(worker_count()));

    for_each_index(ens.paths, ens.exec, [&](std::size_t i, int w) {
        auto& path = path_buf[static_cast<std::size_t>(w)];
        auto& wealth = wealth_buf[static_cast<std::size_t>(w)];
        simulate_brownian_into(path, market.num_factors(), ens.horizon, ens.dt, ens.seed, i);
        simulate_wealth_into(wealth, strategy, path, market, StartPoint{ens.x0, 0});
        double hi = 0.0, lo = std::numeric_limits<double>::infinity();
        for (double x : wealth.X) {
            hi = std::max(hi, x);
            lo = std::min(lo, x);
        }
        sup_x[i] = hi;
        sup_pow[i] = gamma > 0.0 ? std::pow(hi, gamma) : std::pow(lo, gamma);
        keep[i] = wealth.floored ? 0 : 1;
    });

    rep.floored = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 0));
    rep.sup_wealth = mean_and_se(sup_x, keep);
    rep.sup_wealth_pow = mean_and_se(sup_pow, keep);
    const std::size_t sizes[3] = {ens.paths / 4, ens.paths / 2, ens.paths};
    for (std::size_t j = 0; j < 3; ++j) {
        rep.sup_wealth_prefix[j] = mean_and_se(std::span<const double>(sup_x.data(), sizes[j]),
                                               std::span<const char>(keep.data(), sizes[j]));
    }
    auto grew = [&](const Estimate& a, const Estimate& b) {
        return b.mean - a.mean > 2.0 * std::sqrt(a.se * a.se + b.se * b.se);
    };
    rep.diverging = grew(rep.sup_wealth_prefix[0], rep.sup_wealth_prefix[1]) &&
                    grew(rep.sup_wealth_prefix[1], rep.sup_wealth_prefix[2]);

    const double z0 = std::log(ens.x0);
    BrownianPath origin = BrownianPath::from_increments(market.num_factors(), ens.dt, {});
    rep.regularity = check_regularity(strategy, market, PathView{&origin, 0}, z0 - 6.0, z0 + 6.0, 512);
    return rep;
}

}  // namespace fwdperf
