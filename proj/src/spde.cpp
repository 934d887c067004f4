#include "fwdperf/spde.hpp"

#include "fwdperf/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

namespace fwdperf {

LogGrid LogGrid::around(double x0, std::size_t points, double half_width, double eta) {
    if (!(x0 > 0.0)) throw DomainError("grid centre must be positive");
    LogGrid g;
    g.z_min = std::log(x0) - half_width;
    g.z_max = std::log(x0) + half_width;
    g.points = points;
    g.eta = eta;
    return g;
}

double LogGrid::x(std::size_t i) const { return std::exp(z(i)); }

void LogGrid::validate(std::optional<double> anchor) const {
    if (points < 64) throw ConfigError("log grid needs at least 64 points");
    if (!(z_max > z_min)) throw ConfigError("log grid needs z_min < z_max");
    if (!(eta > 1.0)) throw ConfigError("weight exponent eta must exceed 1");
    if (anchor) {
        if (!(*anchor > 0.0)) throw ConfigError("anchor wealth must be positive");
        const double za = std::log(*anchor);
        if (!(za > z_min && za < z_max)) throw ConfigError("anchor wealth lies outside the log grid");
    }
}

double LogGrid::weight(double z) const { return std::exp(eta * std::sqrt(1.0 + z * z)); }

double weighted_norm(const LogGrid& grid, std::span<const double> phi, int m) {
    const double dz = grid.dz();
    std::vector<double> g(phi.begin(), phi.end());
    std::size_t lo = 0, hi = g.size();  // valid range [lo, hi)
    double total = 0.0;
    for (int j = 0; j <= m; ++j) {
        for (std::size_t i = lo; i + 1 < hi; ++i) {
            const double w0 = grid.weight(grid.z(i)), w1 = grid.weight(grid.z(i + 1));
            total += 0.5 * dz * (w0 * w0 * g[i] * g[i] + w1 * w1 * g[i + 1] * g[i + 1]);
        }
        if (j == m || hi - lo < 3) break;
        std::vector<double> next(g.size(), 0.0);
        for (std::size_t i = lo + 1; i + 1 < hi; ++i) next[i] = (g[i + 1] - g[i - 1]) / (2.0 * dz);
        g.swap(next);
        ++lo;
        --hi;
    }
    return std::sqrt(total);
}

double LogCoefficients::stable_dt(double dz) const {
    double max_b2 = 0.0, max_adv = 0.0;
    for (std::size_t i = 0; i < points; ++i) {
        max_b2 = std::max(max_b2, B[i]);
        max_adv = std::max(max_adv, std::abs(advection[i]));
    }
    double dt = std::numeric_limits<double>::infinity();
    if (max_b2 > 0.0) dt = std::min(dt, 0.25 * dz * dz / max_b2);
    if (max_adv > 0.0) dt = std::min(dt, 0.5 * dz / max_adv);
    return dt;
}

bool LogCoefficients::is_null() const {
    auto zero = [](const std::vector<double>& v) {
        return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
    };
    return zero(b) && zero(db) && zero(d2b) && zero(c) && zero(source) && zero(advection);
}

LogCoefficients build_log_coefficients(const FeedbackStrategy& strategy, const MarketModel& market,
                                       const PathView& view, const LogGrid& grid) {
    const std::size_t M = grid.points;
    const double dz = grid.dz();
    const Coefficients cf = market.at(view);
    const int d = market.num_factors();
    const int k = market.num_assets();
    const auto du = static_cast<std::size_t>(d);
    const auto ku = static_cast<std::size_t>(k);
    const auto p = proportion_derivatives_on_grid(strategy, view, grid.z_min, dz, M, 2);

    LogCoefficients co;
    co.points = M;
    co.d = d;
    co.lambda = cf.lambda;
    co.b.assign(M * du, 0.0);
    co.db.assign(M * du, 0.0);
    co.d2b.assign(M * du, 0.0);
    co.c.assign(M * du, 0.0);
    co.B.assign(M, 0.0);
    co.dB.assign(M, 0.0);
    co.d2B.assign(M, 0.0);
    co.diffusion.assign(M, 0.0);
    co.advection.assign(M, 0.0);
    co.source.assign(M, 0.0);

    auto check = [&](double v, const char* term, std::size_t node) {
        if (!std::isfinite(v)) {
            std::ostringstream msg;
            msg << "non-finite coefficient '" << term << "' at node " << node << " (z = " << grid.z(node)
                << ", step " << view.step << ")";
            throw CoefficientError(msg.str());
        }
    };

    SmallVec q0(k), q1(k), q2(k);
    for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t j = 0; j < ku; ++j) {
            q0(static_cast<Eigen::Index>(j)) = p[0][i * ku + j];
            q1(static_cast<Eigen::Index>(j)) = p[1][i * ku + j];
            q2(static_cast<Eigen::Index>(j)) = p[2][i * ku + j];
        }
        const SmallVec b = cf.sigma * q0;
        const SmallVec b1 = cf.sigma * q1;
        const SmallVec b2 = cf.sigma * q2;
        const SmallVec c = cf.lambda + b + b1;
        const double B = b.squaredNorm();
        const double dB = 2.0 * b.dot(b1);
        const double d2B = 2.0 * (b1.squaredNorm() + b.dot(b2));
        for (std::size_t r = 0; r < du; ++r) {
            const auto rr = static_cast<Eigen::Index>(r);
            co.b[i * du + r] = b(rr);
            co.db[i * du + r] = b1(rr);
            co.d2b[i * du + r] = b2(rr);
            co.c[i * du + r] = c(rr);
            check(b(rr), "b", i);
            check(b1(rr), "b'", i);
            check(b2(rr), "b''", i);
        }
        co.B[i] = B;
        co.dB[i] = dB;
        co.d2B[i] = d2B;
        co.diffusion[i] = 0.5 * B;
        co.advection[i] = 0.5 * (dB + B - 2.0 * cf.lambda.dot(b));
        co.source[i] = 0.5 * (d2B + 3.0 * dB + 2.0 * B - c.squaredNorm());
        check(co.advection[i], "advection", i);
        check(co.source[i], "source", i);
    }
    return co;
}

std::vector<double> rtilde_drift(const LogCoefficients& coef, std::span<const double> rt, double dz) {
    // (1/2)[ (d+1)(B R') + (d+2)(B) R' + (d^2 + 3d + 2)(B) R ]
    //  = (1/2)[ B R'' + (2B' + 3B) R' + (B'' + 3B' + 2B) R ]
    const std::size_t M = rt.size();
    std::vector<double> out(M, 0.0);
    for (std::size_t i = 1; i + 1 < M; ++i) {
        const double r1 = (rt[i + 1] - rt[i - 1]) / (2.0 * dz);
        const double r2 = (rt[i + 1] - 2.0 * rt[i] + rt[i - 1]) / (dz * dz);
        out[i] = 0.5 * (coef.B[i] * r2 + (2.0 * coef.dB[i] + 3.0 * coef.B[i]) * r1 +
                        (coef.d2B[i] + 3.0 * coef.dB[i] + 2.0 * coef.B[i]) * rt[i]);
    }
    return out;
}

namespace {

void extrapolate_ends(std::span<double> Y) {
    const std::size_t M = Y.size();
    Y[0] = 2.0 * Y[1] - Y[2];
    Y[M - 1] = 2.0 * Y[M - 2] - Y[M - 3];
}

// below this a parallel region costs more than the sweep
constexpr std::size_t kParallelMinPoints = 4096;

template <class Body>
void for_interior(std::size_t M, Exec exec, Body&& body) {
    const auto hi = static_cast<std::ptrdiff_t>(M) - 1;
    if (exec == Exec::parallel) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (M >= kParallelMinPoints)
        for (std::ptrdiff_t i = 1; i < hi; ++i) body(static_cast<std::size_t>(i));
        return;
#endif
    }
    for (std::ptrdiff_t i = 1; i < hi; ++i) body(static_cast<std::size_t>(i));
}

void y_drift(std::span<const double> Y, const LogCoefficients& co, double dz, std::span<double> out, Exec exec) {
    const double inv_dz2 = 1.0 / (dz * dz);
    const double inv_2dz = 0.5 / dz;
    for_interior(Y.size(), exec, [&](std::size_t i) {
        out[i] = co.diffusion[i] * (Y[i + 1] - 2.0 * Y[i] + Y[i - 1]) * inv_dz2 +
                 co.advection[i] * (Y[i + 1] - Y[i - 1]) * inv_2dz + co.source[i];
    });
}

}  // namespace

void YStepper::step(std::span<double> Y, const LogCoefficients& co, double dt, std::span<const double> dW, double dz,
                    Exec exec) {
    const std::size_t M = Y.size();
    if (M < 3 || co.points != M) throw DomainError("step_Y: coefficient grid does not match the field");
    if (dW.size() != static_cast<std::size_t>(co.d)) throw DomainError("step_Y: Brownian increment has wrong size");
    const double limit = co.stable_dt(dz);
    if (dt > limit * (1.0 + 1e-12)) {
        std::ostringstream msg;
        msg << "time step " << dt << " violates the stability bound; need dt <= " << limit;
        throw StabilityError(msg.str(), limit);
    }
    if (drift0_.size() != M) *this = YStepper(M);

    const auto d = static_cast<std::size_t>(co.d);
    const double inv_dz = 1.0 / dz;
    for_interior(M, exec, [&](std::size_t i) {
        double v = 0.0, src = 0.0;
        for (std::size_t r = 0; r < d; ++r) {
            v += co.b[i * d + r] * dW[r];
            src += co.c[i * d + r] * dW[r];
        }
        const double grad = v > 0.0 ? (Y[i] - Y[i - 1]) * inv_dz : (Y[i + 1] - Y[i]) * inv_dz;
        noise_[i] = -(v * grad + src);
    });

    y_drift(Y, co, dz, drift0_, exec);
    for_interior(M, exec, [&](std::size_t i) { pred_[i] = Y[i] + dt * drift0_[i] + noise_[i]; });
    extrapolate_ends(pred_);
    y_drift(pred_, co, dz, drift1_, exec);
    for_interior(M, exec, [&](std::size_t i) { Y[i] += 0.5 * dt * (drift0_[i] + drift1_[i]) + noise_[i]; });
    extrapolate_ends(Y);
}

std::vector<double> step_Y(std::span<const double> Y, const LogCoefficients& coef, double dt,
                           std::span<const double> dW, double dz, Exec exec) {
    std::vector<double> out(Y.begin(), Y.end());
    YStepper stepper(out.size());
    stepper.step(out, coef, dt, dW, dz, exec);
    return out;
}

std::size_t RSolution::snapshot_index(std::size_t step) const {
    const auto it = std::lower_bound(steps.begin(), steps.end(), step);
    if (it == steps.end() || *it != step) throw DomainError("no stored snapshot at step " + std::to_string(step));
    return static_cast<std::size_t>(it - steps.begin());
}

std::vector<double> RSolution::R(std::size_t snapshot) const {
    std::vector<double> r(Y[snapshot].size());
    std::transform(Y[snapshot].begin(), Y[snapshot].end(), r.begin(), [](double y) { return std::exp(y); });
    return r;
}

namespace {

// Four-point Lagrange interpolation of nodal data at z.
double interp_cubic(const LogGrid& grid, std::span<const double> f, double z) {
    const double dz = grid.dz();
    const double s = (z - grid.z_min) / dz;
    auto j = static_cast<std::ptrdiff_t>(std::floor(s)) - 1;
    j = std::clamp<std::ptrdiff_t>(j, 0, static_cast<std::ptrdiff_t>(grid.points) - 4);
    const double u = s - static_cast<double>(j);  // position relative to node j
    const auto ju = static_cast<std::size_t>(j);
    const double l0 = -(u - 1.0) * (u - 2.0) * (u - 3.0) / 6.0;
    const double l1 = u * (u - 2.0) * (u - 3.0) / 2.0;
    const double l2 = -u * (u - 1.0) * (u - 3.0) / 2.0;
    const double l3 = u * (u - 1.0) * (u - 2.0) / 6.0;
    return l0 * f[ju] + l1 * f[ju + 1] + l2 * f[ju + 2] + l3 * f[ju + 3];
}

std::size_t substep_count(double dt, double h_max) {
    if (!std::isfinite(h_max)) return 1;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(dt / h_max * (1.0 - 1e-12))));
}

constexpr std::uint64_t kBridgeSalt = 0xB71D6E5A3C9F0421ULL;

}  // namespace

RSolution solve_R(const FeedbackStrategy& strategy, const MarketModel& market, const InitialDensity& R0,
                  const BrownianPath& path, const LogGrid& grid, const SolveOptions& options) {
    grid.validate(options.probe_x);
    if (path.dims() != market.num_factors()) throw DomainError("solve_R: path dimension does not match the market");
    const std::size_t M = grid.points;
    const std::size_t N = path.steps();
    const double dz = grid.dz();
    const double dt = path.dt();

    RSolution sol;
    sol.grid = grid;
    sol.probe_x = options.probe_x;
    if (options.snapshot_steps.empty()) {
        sol.steps.resize(N + 1);
        for (std::size_t i = 0; i <= N; ++i) sol.steps[i] = i;
    } else {
        sol.steps = options.snapshot_steps;
        std::sort(sol.steps.begin(), sol.steps.end());
        sol.steps.erase(std::unique(sol.steps.begin(), sol.steps.end()), sol.steps.end());
        if (sol.steps.back() > N) throw DomainError("snapshot step beyond the horizon");
    }

    std::vector<double> Y(M);
    for (std::size_t i = 0; i < M; ++i) {
        const double r = R0(grid.x(i));
        if (!(r > 0.0) || !std::isfinite(r)) {
            std::ostringstream msg;
            msg << "initial density must be positive and finite; got " << r << " at x = " << grid.x(i);
            throw DomainError(msg.str());
        }
        Y[i] = std::log(r);
    }

    const double z_probe = options.probe_x ? std::log(*options.probe_x) : 0.0;
    auto record = [&](std::size_t step) {
        if (options.probe_x) sol.probe_Y.push_back(interp_cubic(grid, Y, z_probe));
        if (std::binary_search(sol.steps.begin(), sol.steps.end(), step)) sol.Y.push_back(Y);
    };
    record(0);

    const bool frozen = market.is_constant() && strategy.constant_proportion().has_value();
    std::optional<LogCoefficients> cached;
    if (frozen) cached = build_log_coefficients(strategy, market, PathView{&path, 0}, grid);

    YStepper stepper(M);
    const auto d = static_cast<std::size_t>(market.num_factors());
    std::vector<double> z(d), sub(d);
    for (std::size_t n = 0; n < N; ++n) {
        LogCoefficients fresh;
        if (!frozen) fresh = build_log_coefficients(strategy, market, PathView{&path, n}, grid);
        const LogCoefficients& co = frozen ? *cached : fresh;
        const auto dw = path.increment(n);
        const std::size_t nsub = substep_count(dt, std::min(co.stable_dt(dz), options.max_dt));
        sol.max_substeps = std::max(sol.max_substeps, nsub);
        if (nsub == 1) {
            stepper.step(Y, co, dt, dw, dz, options.exec);
        } else {
            // Discrete Brownian bridge: equal sub-intervals conditioned on
            // summing to the coarse increment.
            const double h = dt / static_cast<double>(nsub);
            const double sqh = std::sqrt(h);
            NormalSource normal(Pcg32(path.seed() ^ kBridgeSalt, derive_stream(path.index(), n)));
            std::vector<double> draws(nsub * d);
            for (double& v : draws) v = normal();
            for (std::size_t r = 0; r < d; ++r) {
                double mean = 0.0;
                for (std::size_t s = 0; s < nsub; ++s) mean += draws[s * d + r];
                z[r] = mean / static_cast<double>(nsub);
            }
            for (std::size_t s = 0; s < nsub; ++s) {
                for (std::size_t r = 0; r < d; ++r) {
                    sub[r] = dw[r] / static_cast<double>(nsub) + sqh * (draws[s * d + r] - z[r]);
                }
                stepper.step(Y, co, h, sub, dz, options.exec);
            }
        }
        record(n + 1);
    }
    return sol;
}

AnchorVolatility zero_anchor(int d) {
    return [d](const AnchorState&) -> SmallVec { return SmallVec::Zero(d); };
}

namespace {

struct HermiteCell {
    std::size_t j;
    double theta;
};

HermiteCell locate(const LogGrid& grid, double z) {
    const double s = (z - grid.z_min) / grid.dz();
    auto j = static_cast<std::ptrdiff_t>(std::floor(s));
    j = std::clamp<std::ptrdiff_t>(j, 0, static_cast<std::ptrdiff_t>(grid.points) - 2);
    return {static_cast<std::size_t>(j), s - static_cast<double>(j)};
}

// Cubic Hermite on [z_j, z_{j+1}] with values f and z-derivatives g.
double hermite(std::span<const double> f, std::span<const double> g, const HermiteCell& c, double dz) {
    const double t = c.theta, t2 = t * t, t3 = t2 * t;
    return (2 * t3 - 3 * t2 + 1) * f[c.j] + (t3 - 2 * t2 + t) * dz * g[c.j] + (-2 * t3 + 3 * t2) * f[c.j + 1] +
           (t3 - t2) * dz * g[c.j + 1];
}

// Trapezoid cumulative integral from node 0.
std::vector<double> cumulative(std::span<const double> g, double dz) {
    std::vector<double> c(g.size(), 0.0);
    for (std::size_t i = 1; i < g.size(); ++i) c[i] = c[i - 1] + 0.5 * dz * (g[i - 1] + g[i]);
    return c;
}

// Cumulative integral shifted to vanish at z_anchor.
std::vector<double> integral_from_anchor(const LogGrid& grid, std::span<const double> g, double z_anchor) {
    auto c = cumulative(g, grid.dz());
    const double at_anchor = hermite(c, g, locate(grid, z_anchor), grid.dz());
    for (double& v : c) v -= at_anchor;
    return c;
}

double left_slope(std::span<const double> Y, double dz) { return (-3.0 * Y[0] + 4.0 * Y[1] - Y[2]) / (2.0 * dz); }

double right_slope(std::span<const double> Y, double dz) {
    const std::size_t M = Y.size();
    return (3.0 * Y[M - 1] - 4.0 * Y[M - 2] + Y[M - 3]) / (2.0 * dz);
}

void fill_snapshot_fields(FieldSnapshot& s, const LogGrid& grid, double x_bar) {
    const std::size_t M = grid.points;
    const double dz = grid.dz();
    s.R.resize(M);
    std::vector<double> f(M);
    for (std::size_t i = 0; i < M; ++i) {
        s.R[i] = std::exp(s.Y[i]);
        f[i] = grid.x(i) * s.R[i];
    }
    const double slope = right_slope(s.Y, dz);
    const double tail_exp = -slope - 1.0;
    if (!(tail_exp > 0.0)) {
        std::ostringstream msg;
        msg << "R is not integrable at +inf: boundary log-slope of R is " << slope << " (need < -1)";
        throw IntegrabilityError(msg.str(), slope);
    }
    const double tail = s.R[M - 1] * grid.x(M - 1) / tail_exp;
    const auto cf = cumulative(f, dz);
    s.V.resize(M);
    std::vector<double> g(M);
    for (std::size_t i = 0; i < M; ++i) {
        s.V[i] = tail + (cf[M - 1] - cf[i]);
        g[i] = grid.x(i) * s.V[i];
    }
    const auto G = integral_from_anchor(grid, g, std::log(x_bar));
    s.U.resize(M);
    for (std::size_t i = 0; i < M; ++i) s.U[i] = s.zeta + G[i];
    s.a = volatility_a(grid, x_bar, s.U, s.R, s.zeta, s.b, s.lambda, s.anchor_vol);
}

std::vector<double> scaled_exposure(const FeedbackStrategy& strategy, const Coefficients& cf, const PathView& view,
                                    const LogGrid& grid) {
    const auto p = proportion_derivatives_on_grid(strategy, view, grid.z_min, grid.dz(), grid.points, 0);
    const auto k = static_cast<std::size_t>(strategy.num_assets());
    const auto d = static_cast<std::size_t>(cf.sigma.rows());
    std::vector<double> b(grid.points * d);
    SmallVec q(static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < grid.points; ++i) {
        for (std::size_t j = 0; j < k; ++j) q(static_cast<Eigen::Index>(j)) = p[0][i * k + j];
        const SmallVec bi = cf.sigma * q;
        for (std::size_t r = 0; r < d; ++r) b[i * d + r] = bi(static_cast<Eigen::Index>(r));
    }
    return b;
}

}  // namespace

std::vector<double> volatility_a(const LogGrid& grid, double x_bar, std::span<const double> U,
                                 std::span<const double> R, double zeta, std::span<const double> b,
                                 const SmallVec& lambda, const SmallVec& anchor_vol) {
    const std::size_t M = grid.points;
    const auto d = static_cast<std::size_t>(lambda.size());
    if (U.size() != M || R.size() != M || b.size() != M * d || static_cast<std::size_t>(anchor_vol.size()) != d) {
        throw DomainError("volatility_a: fields are not on a common grid");
    }
    const double z_bar = std::log(x_bar);
    std::vector<double> a(M * d);
    std::vector<double> h(M);
    for (std::size_t r = 0; r < d; ++r) {
        // sigma pi(y) R(y) dy = e^{2z} b(z) R~(z) dz
        for (std::size_t i = 0; i < M; ++i) {
            const double x = grid.x(i);
            h[i] = x * x * b[i * d + r] * R[i];
        }
        const auto H = integral_from_anchor(grid, h, z_bar);
        const auto rr = static_cast<Eigen::Index>(r);
        for (std::size_t i = 0; i < M; ++i) a[i * d + r] = anchor_vol(rr) - lambda(rr) * (U[i] - zeta) + H[i];
    }
    return a;
}

UtilityField integrate_to_U(const RSolution& sol, const FeedbackStrategy& strategy, const MarketModel& market,
                            double x_bar, const AnchorVolatility& anchor, double zeta0, const BrownianPath& path) {
    sol.grid.validate(x_bar);
    if (!sol.probe_x || std::abs(*sol.probe_x - x_bar) > 1e-14 * x_bar) {
        throw DomainError("integrate_to_U: the solution must be probed at the anchor wealth");
    }
    const std::size_t N = path.steps();
    if (sol.probe_Y.size() != N + 1) throw DomainError("integrate_to_U: solution and path lengths differ");
    const double dt = path.dt();
    const int d = market.num_factors();

    UtilityField field;
    field.grid = sol.grid;
    field.x_bar = x_bar;
    field.d = d;

    auto anchor_exposure2 = [&](std::size_t n) {
        const PathView view{&path, n};
        const Coefficients cf = market.at(view);
        return (cf.sigma * strategy.holdings(view, x_bar)).squaredNorm();
    };
    auto anchor_state = [&](std::size_t n) {
        return AnchorState{n, path.time(n), std::exp(sol.probe_Y[n]), x_bar, &path};
    };

    field.zeta.resize(N + 1);
    field.zeta[0] = zeta0;
    double drift_prev = anchor_exposure2(0) * std::exp(sol.probe_Y[0]);
    for (std::size_t n = 0; n < N; ++n) {
        const SmallVec a = anchor(anchor_state(n));
        if (a.size() != d) throw DomainError("anchor volatility has the wrong dimension");
        const auto dw = path.increment(n);
        double noise = 0.0;
        for (int r = 0; r < d; ++r) noise += a(r) * dw[static_cast<std::size_t>(r)];
        const double drift_next = anchor_exposure2(n + 1) * std::exp(sol.probe_Y[n + 1]);
        field.zeta[n + 1] = field.zeta[n] - 0.25 * (drift_prev + drift_next) * dt + noise;
        drift_prev = drift_next;
    }

    field.snapshots.reserve(sol.steps.size());
    for (std::size_t k = 0; k < sol.steps.size(); ++k) {
        const std::size_t step = sol.steps[k];
        const PathView view{&path, step};
        const Coefficients cf = market.at(view);
        FieldSnapshot s;
        s.step = step;
        s.t = path.time(step);
        s.Y = sol.Y[k];
        s.zeta = field.zeta[step];
        s.lambda = cf.lambda;
        s.sigma = cf.sigma;
        s.anchor_vol = anchor(anchor_state(step));
        s.b = scaled_exposure(strategy, cf, view, sol.grid);
        fill_snapshot_fields(s, sol.grid, x_bar);
        field.snapshots.push_back(std::move(s));
    }
    return field;
}

const FieldSnapshot& UtilityField::at_step(std::size_t step) const {
    for (const auto& s : snapshots)
        if (s.step == step) return s;
    throw DomainError("no field snapshot at step " + std::to_string(step));
}

double UtilityField::R(const FieldSnapshot& s, double x) const {
    const double z = std::log(x);
    const double dz = grid.dz();
    if (z < grid.z_min) return std::exp(s.Y.front() + left_slope(s.Y, dz) * (z - grid.z_min));
    if (z > grid.z_max) return std::exp(s.Y.back() + right_slope(s.Y, dz) * (z - grid.z_max));
    const auto c = locate(grid, z);
    return std::exp((1.0 - c.theta) * s.Y[c.j] + c.theta * s.Y[c.j + 1]);
}

double UtilityField::V(const FieldSnapshot& s, double x) const {
    const double z = std::log(x);
    const double dz = grid.dz();
    const std::size_t M = grid.points;
    if (z > grid.z_max) {
        const double tail_exp = -right_slope(s.Y, dz) - 1.0;
        return s.V.back() * std::pow(x / grid.x(M - 1), -tail_exp);
    }
    if (z < grid.z_min) {
        // R ~ R0 (x/x0)^p below the grid
        const double p = left_slope(s.Y, dz);
        const double x0 = grid.x(0);
        const double q = p + 1.0;
        const double extra = std::abs(q) < 1e-12 ? s.R.front() * x0 * std::log(x0 / x)
                                                  : s.R.front() * x0 * (1.0 - std::pow(x / x0, q)) / q;
        return s.V.front() + extra;
    }
    const auto c = locate(grid, z);
    const double dv0 = -grid.x(c.j) * s.R[c.j];
    const double dv1 = -grid.x(c.j + 1) * s.R[c.j + 1];
    const double t = c.theta, t2 = t * t, t3 = t2 * t;
    return (2 * t3 - 3 * t2 + 1) * s.V[c.j] + (t3 - 2 * t2 + t) * dz * dv0 + (-2 * t3 + 3 * t2) * s.V[c.j + 1] +
           (t3 - t2) * dz * dv1;
}

double UtilityField::U(const FieldSnapshot& s, double x) const {
    if (x == x_bar) return s.zeta;
    const double z = std::log(x);
    const double dz = grid.dz();
    const std::size_t M = grid.points;
    if (z > grid.z_max) {
        // V(y) = Vm (y/xm)^(-s)
        const double se = -right_slope(s.Y, dz) - 1.0;
        const double xm = grid.x(M - 1);
        const double w = 1.0 - se;
        const double inc = std::abs(w) < 1e-12 ? s.V.back() * xm * std::log(x / xm)
                                                : s.V.back() * xm * (std::pow(x / xm, w) - 1.0) / w;
        return s.U.back() + inc;
    }
    if (z < grid.z_min) {
        // V(y) = V0 + R0 x0 (1 - (y/x0)^q) / q with q = p + 1; integrate from x to x0.
        const double p = left_slope(s.Y, dz);
        const double x0 = grid.x(0);
        const double q = p + 1.0;
        const double r0x0 = s.R.front() * x0;
        auto power_integral = [&](double e) {  // int_x^x0 (y/x0)^e dy
            return std::abs(e + 1.0) < 1e-12 ? x0 * std::log(x0 / x) : x0 * (1.0 - std::pow(x / x0, e + 1.0)) / (e + 1.0);
        };
        double integral;
        if (std::abs(q) < 1e-12) {
            // V(y) = V0 + R0 x0 log(x0 / y)
            integral = s.V.front() * (x0 - x) + r0x0 * (x0 - x - x * std::log(x0 / x));
        } else {
            integral = (s.V.front() + r0x0 / q) * (x0 - x) - r0x0 / q * power_integral(q);
        }
        return s.U.front() - integral;
    }
    const auto c = locate(grid, z);
    const double du0 = grid.x(c.j) * s.V[c.j];
    const double du1 = grid.x(c.j + 1) * s.V[c.j + 1];
    const double t = c.theta, t2 = t * t, t3 = t2 * t;
    return (2 * t3 - 3 * t2 + 1) * s.U[c.j] + (t3 - 2 * t2 + t) * dz * du0 + (-2 * t3 + 3 * t2) * s.U[c.j + 1] +
           (t3 - t2) * dz * du1;
}

std::vector<double> x_derivative(const LogGrid& grid, std::span<const double> f, int d) {
    const std::size_t M = grid.points;
    const auto du = static_cast<std::size_t>(d);
    const double dz = grid.dz();
    std::vector<double> out(M * du);
    for (std::size_t r = 0; r < du; ++r) {
        auto at = [&](std::size_t i) { return f[i * du + r]; };
        for (std::size_t i = 0; i < M; ++i) {
            double dfdz;
            if (i == 0) {
                dfdz = (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * dz);
            } else if (i == M - 1) {
                dfdz = (3.0 * at(M - 1) - 4.0 * at(M - 2) + at(M - 3)) / (2.0 * dz);
            } else {
                dfdz = (at(i + 1) - at(i - 1)) / (2.0 * dz);
            }
            out[i * du + r] = dfdz / grid.x(i);
        }
    }
    return out;
}

SmallVec RecoveredStrategy::holdings_at(std::size_t node) const {
    SmallVec h(k);
    for (int j = 0; j < k; ++j) h(j) = holdings[node * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)];
    return h;
}

FeedbackStrategy RecoveredStrategy::as_strategy(std::string label) const {
    // pi(x)/x per node
    const auto ku = static_cast<std::size_t>(k);
    std::vector<double> prop(holdings.size());
    for (std::size_t i = 0; i < grid.points; ++i)
        for (std::size_t j = 0; j < ku; ++j) prop[i * ku + j] = holdings[i * ku + j] / grid.x(i);
    const LogGrid g = grid;
    const int kk = k;
    return FeedbackStrategy::from_rule(std::move(label), k, [g, prop, kk](const PathView&, double x) -> SmallVec {
        const double z = std::clamp(std::log(x), g.z_min, g.z_max);
        const auto c = locate(g, z);
        SmallVec out(kk);
        const auto ku2 = static_cast<std::size_t>(kk);
        for (std::size_t j = 0; j < ku2; ++j)
            out(static_cast<Eigen::Index>(j)) =
                x * ((1.0 - c.theta) * prop[c.j * ku2 + j] + c.theta * prop[(c.j + 1) * ku2 + j]);
        return out;
    });
}

RecoveredStrategy recover_strategy(const UtilityField& field, const FieldSnapshot& snap) {
    const LogGrid& grid = field.grid;
    const std::size_t M = grid.points;
    const SmallMat& sigma = snap.sigma;
    const auto d = static_cast<std::size_t>(sigma.rows());
    const auto k = static_cast<std::size_t>(sigma.cols());
    const SmallMat gram_inv = (sigma.transpose() * sigma).inverse();
    const SmallMat projector = sigma * gram_inv * sigma.transpose();  // (sigma^T)^+ sigma^T
    const SmallMat left_inv = gram_inv * sigma.transpose();          // sigma^+

    const auto da = x_derivative(grid, snap.a, static_cast<int>(d));

    RecoveredStrategy rec;
    rec.grid = grid;
    rec.k = static_cast<int>(k);
    rec.d = static_cast<int>(d);
    rec.holdings.resize(M * k);
    rec.sigma_pi.resize(M * d);
    rec.residual.resize(M);
    SmallVec dai(static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < M; ++i) {
        const double R = snap.R[i];
        if (!(R > 0.0) || !std::isfinite(R)) {
            std::ostringstream msg;
            msg << "U'' vanishes or is not finite at node " << i << " (x = " << grid.x(i) << ")";
            throw SingularityError(msg.str(), i);
        }
        for (std::size_t r = 0; r < d; ++r) dai(static_cast<Eigen::Index>(r)) = da[i * d + r];
        const SmallVec num = snap.lambda * snap.V[i] + projector * dai;
        const SmallVec sp = num / R;
        const SmallVec pi = left_inv * sp;
        const SmallVec check = sigma * pi * (-R) + num;
        rec.residual[i] = check.norm() / std::max(num.norm(), 1e-300);
        for (std::size_t j = 0; j < k; ++j) rec.holdings[i * k + j] = pi(static_cast<Eigen::Index>(j));
        for (std::size_t r = 0; r < d; ++r) rec.sigma_pi[i * d + r] = sp(static_cast<Eigen::Index>(r));
    }
    return rec;
}

void write_field_csv(std::ostream& os, const UtilityField& field, const FieldSnapshot& snap) {
    os << "z,Y,R,V,U";
    for (int r = 0; r < field.d; ++r) os << ",a" << (r + 1);
    os << '\n';
    const auto old = os.precision(17);
    const auto d = static_cast<std::size_t>(field.d);
    for (std::size_t i = 0; i < field.grid.points; ++i) {
        os << field.grid.z(i) << ',' << snap.Y[i] << ',' << snap.R[i] << ',' << snap.V[i] << ',' << snap.U[i];
        for (std::size_t r = 0; r < d; ++r) os << ',' << snap.a[i * d + r];
        os << '\n';
    }
    os.precision(old);
}

}  // namespace fwdperf
