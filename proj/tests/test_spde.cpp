#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fwdperf/contract.hpp"
#include "fwdperf/spde.hpp"

#include <cmath>
#include <sstream>

using namespace fwdperf;

namespace {

const BlackScholes2 kP;
const MarketModel kBS = MarketModel::black_scholes(kP);

// e^{-z} pi(e^z) = (3 + 0.5 tanh z, 0)
FeedbackStrategy tanh_strategy() {
    return FeedbackStrategy::from_rule("tanh", 2, [](const PathView&, double x) {
        SmallVec h = SmallVec::Zero(2);
        h(0) = x * (3.0 + 0.5 * std::tanh(std::log(x)));
        return h;
    });
}

BrownianPath still_path(double T, double dt) {
    return BrownianPath::from_increments(2, dt, std::vector<double>(2 * grid_steps(T, dt), 0.0));
}

}  // namespace

TEST_CASE("grid validation") {
    LogGrid g = LogGrid::around(1.0, 64);
    CHECK_NOTHROW(g.validate(1.0));
    CHECK_THROWS(g.validate(std::exp(7.0)));
    g.points = 32;
    CHECK_THROWS(g.validate());
    g = LogGrid::around(1.0, 128);
    g.eta = 1.0;
    CHECK_THROWS(g.validate());
    CHECK(LogGrid::around(2.0, 101, 5.0).z(50) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("weighted norm of a constant") {
    const LogGrid g = LogGrid::around(1.0, 2001, 2.0, 1.5);
    std::vector<double> one(g.points, 1.0);
    // Simpson oracle for int exp(2 eta sqrt(1+z^2)) dz on [-2, 2].
    const int n = 4000;
    const double h = 4.0 / n;
    double s = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double z = -2.0 + h * i;
        const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
        s += w * std::exp(3.0 * std::sqrt(1.0 + z * z));
    }
    CHECK(weighted_norm(g, one, 0) == doctest::Approx(std::sqrt(s * h / 3.0)).epsilon(1e-5));
    // Derivatives of a constant add nothing.
    CHECK(weighted_norm(g, one, 3) == doctest::Approx(weighted_norm(g, one, 0)).epsilon(1e-12));
}

TEST_CASE("log coefficients match hand-derived formulas") {
    const LogGrid g = LogGrid::around(1.0, 801, 4.0);
    const BrownianPath path = still_path(0.1, 0.1);
    const LogCoefficients co = build_log_coefficients(tanh_strategy(), kBS, PathView{&path, 0}, g);
    const double s1 = kP.sigma1, lam1 = 0.4;
    for (std::size_t i = 10; i < g.points - 10; i += 37) {
        const double z = g.z(i);
        const double t = std::tanh(z), s2 = 1.0 - t * t;
        const double p = 3.0 + 0.5 * t, p1 = 0.5 * s2, p2 = -t * s2;
        // only the first factor loads on asset 1
        const double B = s1 * s1 * p * p;
        const double dB = 2.0 * s1 * s1 * p * p1;
        const double d2B = 2.0 * s1 * s1 * (p1 * p1 + p * p2);
        const double c1 = lam1 + s1 * (p + p1);
        const double A = 0.5 * (dB + B - 2.0 * lam1 * s1 * p);
        const double S = 0.5 * (d2B + 3.0 * dB + 2.0 * B - c1 * c1);
        CHECK(co.diffusion[i] == doctest::Approx(0.5 * B).epsilon(1e-10));
        CHECK(co.advection[i] == doctest::Approx(A).epsilon(1e-4).scale(1.0));
        CHECK(co.source[i] == doctest::Approx(S).epsilon(1e-4).scale(1.0));
        CHECK(co.c[2 * i] == doctest::Approx(c1).epsilon(1e-4));
        CHECK(std::abs(co.c[2 * i + 1]) < 1e-12);
    }
}

TEST_CASE("R-tilde operator agrees with the log form") {
    // For R = e^Y: drift(R)/R = D Y'' + A Y' + S + |b Y' + c|^2 / 2.
    const LogGrid g = LogGrid::around(1.0, 1601, 4.0);
    const BrownianPath path = still_path(0.1, 0.1);
    const LogCoefficients co = build_log_coefficients(tanh_strategy(), kBS, PathView{&path, 0}, g);
    std::vector<double> R(g.points);
    for (std::size_t i = 0; i < g.points; ++i) R[i] = std::exp(-1.5 * g.z(i) + 0.2 * std::sin(g.z(i)));
    const auto drift = rtilde_drift(co, R, g.dz());
    for (std::size_t i = 20; i < g.points - 20; i += 53) {
        const double z = g.z(i);
        const double y1 = -1.5 + 0.2 * std::cos(z), y2 = -0.2 * std::sin(z);
        double q = 0.0;
        for (int r = 0; r < 2; ++r) {
            const double v = co.b[2 * i + r] * y1 + co.c[2 * i + r];
            q += v * v;
        }
        const double expect = co.diffusion[i] * y2 + co.advection[i] * y1 + co.source[i] + 0.5 * q;
        CHECK(std::abs(drift[i] / R[i] - expect) < 1e-4);
    }
}

TEST_CASE("step_Y: stability bound and serial/parallel agreement") {
    const LogGrid g = LogGrid::around(1.0, 256);
    const BrownianPath path = still_path(0.1, 0.1);
    const LogCoefficients co = build_log_coefficients(merton_strategy(kBS, 0.5), kBS, PathView{&path, 0}, g);
    std::vector<double> Y(g.points);
    for (std::size_t i = 0; i < g.points; ++i) Y[i] = -1.5 * g.z(i) + 0.1 * std::cos(g.z(i));
    const std::vector<double> dW{0.01, -0.02};
    const double h = co.stable_dt(g.dz());
    CHECK(h == doctest::Approx(std::min(0.25 * g.dz() * g.dz() / 0.64, 0.5 * g.dz() / std::abs(co.advection[0]))));
    CHECK_THROWS_AS(step_Y(Y, co, 2.0 * h, dW, g.dz()), StabilityError);
    const auto a = step_Y(Y, co, h, dW, g.dz(), Exec::serial);
    const auto b = step_Y(Y, co, h, dW, g.dz(), Exec::parallel);
    CHECK(a == b);
    // large enough for the threaded sweep
    const LogGrid big = LogGrid::around(1.0, 10000);
    const LogCoefficients cb = build_log_coefficients(merton_strategy(kBS, 0.5), kBS, PathView{&path, 0}, big);
    std::vector<double> Yb(big.points);
    for (std::size_t i = 0; i < big.points; ++i) Yb[i] = -1.5 * big.z(i) + 0.1 * std::cos(big.z(i));
    const double hb = cb.stable_dt(big.dz());
    CHECK(step_Y(Yb, cb, hb, dW, big.dz(), Exec::serial) == step_Y(Yb, cb, hb, dW, big.dz(), Exec::parallel));
}

TEST_CASE("solver is exact on the affine closed-form family") {
    const LogGrid g = LogGrid::around(1.0, 128);
    for (double eps : {0.5, 0.3}) {
        const BSClosedForm cf = bs_closed_form(kP, 0.5, eps, 1.0, 1.0);
        const BrownianPath path = simulate_brownian(2, 0.5, 1e-2, 3, 1);
        const RSolution sol = solve_R(merton_strategy(kBS, 0.5), kBS,
                                      [eps](double x) { return std::pow(x, -1.0 - eps); }, path, g);
        CHECK(sol.max_substeps > 1);
        double worst = 0.0;
        for (std::size_t k = 0; k < sol.steps.size(); ++k) {
            const auto W = path.value(sol.steps[k]);
            const double q = cf.Q(path.time(sol.steps[k]), W[0], W[1]);
            const auto R = sol.R(k);
            for (std::size_t i = 0; i < g.points; ++i) worst = std::max(worst, std::abs(R[i] / cf.R(g.x(i), q) - 1.0));
        }
        CHECK(worst < 1e-11);
    }
}

TEST_CASE("second-order convergence on a non-affine, noise-free problem") {
    // Interior errors against a fine reference; M -> 2M and dt -> dt/4 should
    // cut the error by about 4. dt stays below the stability limit so no
    // bridge sub-steps are drawn and the path really is still.
    const FeedbackStrategy s = tanh_strategy();
    auto R0 = [](double x) { return std::pow(x, -1.5) * std::exp(0.3 * std::sin(std::log(x))); };
    auto solve = [&](std::size_t M, double dt) {
        const LogGrid g = LogGrid::around(1.0, M, 6.0);
        SolveOptions o;
        o.snapshot_steps = {grid_steps(0.2, dt)};
        const RSolution sol = solve_R(s, kBS, R0, still_path(0.2, dt), g, o);
        CHECK(sol.max_substeps == 1);
        return sol.Y[0];
    };
    const auto ref = solve(1025, 0.2 / 4096);
    auto err = [&](std::size_t M, double dt) {
        const auto y = solve(M, dt);
        const std::size_t stride = 1024 / (M - 1);
        double e = 0.0;
        for (std::size_t i = 0; i < M; ++i) {
            const double z = -6.0 + 12.0 * static_cast<double>(i) / static_cast<double>(M - 1);
            if (std::abs(z) <= 3.0) e = std::max(e, std::abs(y[i] - ref[i * stride]));
        }
        return e;
    };
    const double e1 = err(129, 0.2 / 64), e2 = err(257, 0.2 / 256);
    MESSAGE("coarse " << e1 << ", refined " << e2 << ", ratio " << e1 / e2);
    CHECK(e1 / e2 >= 3.0);
}

TEST_CASE("sub-steps respect max_dt and the Brownian increment") {
    const LogGrid g = LogGrid::around(1.0, 128);
    const BrownianPath path = simulate_brownian(2, 0.1, 1e-2, 5, 0);
    SolveOptions o;
    o.max_dt = 1e-4;
    const RSolution sol = solve_R(merton_strategy(kBS, 0.5), kBS, [](double x) { return std::pow(x, -1.5); }, path, g, o);
    CHECK(sol.max_substeps == 100);
    const BSClosedForm cf = bs_closed_form(kP, 0.5, 0.5, 1.0, 1.0);
    const auto W = path.value(path.steps());
    const auto R = sol.R(sol.steps.size() - 1);
    CHECK(R[60] == doctest::Approx(cf.R(g.x(60), cf.Q(0.1, W[0], W[1]))).epsilon(1e-11));
    CHECK_THROWS(sol.snapshot_index(1000));
}

TEST_CASE("non-integrable tail is rejected") {
    const LogGrid g = LogGrid::around(1.0, 128);
    const BrownianPath path = simulate_brownian(2, 0.02, 1e-2, 5, 0);
    const FeedbackStrategy m = merton_strategy(kBS, 0.5);
    SolveOptions o;
    o.probe_x = 1.0;
    const RSolution sol = solve_R(m, kBS, [](double x) { return std::pow(x, -0.5); }, path, g, o);
    CHECK_THROWS_AS(integrate_to_U(sol, m, kBS, 1.0, zero_anchor(2), 1.0, path), IntegrabilityError);
}

TEST_CASE("utility field against the closed form") {
    const BSClosedForm cf = bs_closed_form(kP, 0.5, 0.3, 1.0, 1.0);
    const LogGrid g = LogGrid::around(1.0, 512);
    const BrownianPath path = simulate_brownian(2, 0.25, 1e-3, 7, 2);
    const FeedbackStrategy m = merton_strategy(kBS, 0.5);
    SolveOptions o;
    o.probe_x = 1.0;
    o.snapshot_steps = {0, 125, 250};
    const RSolution sol = solve_R(m, kBS, [](double x) { return std::pow(x, -1.3); }, path, g, o);
    const UtilityField f = integrate_to_U(sol, m, kBS, 1.0, closed_form_anchor(cf), closed_form_zeta0(cf, 1.0), path);
    for (const auto& s : f.snapshots) {
        const auto W = path.value(s.step);
        const double q = cf.Q(s.t, W[0], W[1]);
        CHECK(f.U(s, 1.0) == s.zeta);
        // zeta follows an Euler-Maruyama step, so U carries an O(dt) error
        CHECK(s.zeta == doctest::Approx(cf.U(1.0, q)).epsilon(5e-4));
        for (double x : {0.05, 0.5, 1.0, 3.7, 40.0}) {
            CHECK(f.U(s, x) == doctest::Approx(cf.U(x, q)).epsilon(2e-3));
            CHECK(f.V(s, x) == doctest::Approx(cf.V(x, q)).epsilon(1e-4));
            CHECK(f.R(s, x) == doctest::Approx(cf.R(x, q)).epsilon(1e-6));
        }
        // beyond the grid: power-law continuation
        CHECK(f.R(s, 1e4) == doctest::Approx(cf.R(1e4, q)).epsilon(1e-6));
        for (std::size_t i = 1; i < g.points; ++i) {
            CHECK(s.V[i] < s.V[i - 1]);
            CHECK(s.U[i] > s.U[i - 1]);
        }
        const double a1 = -cf.loading1(), a2 = -cf.loading2();
        for (std::size_t i = 100; i < 400; i += 50) {
            CHECK(s.a[2 * i] == doctest::Approx(a1 * cf.U(g.x(i), q)).epsilon(1e-3));
            CHECK(std::abs(s.a[2 * i + 1] - a2 * cf.U(g.x(i), q)) < 1e-3 * s.U[i]);
        }
    }
}

TEST_CASE("volatility field from exact nodal data") {
    const BSClosedForm cf = bs_closed_form(kP, 0.5, 0.3, 1.0, 1.0);
    const LogGrid g = LogGrid::around(1.0, 257, 3.0);
    const double q = 0.8;
    std::vector<double> U(g.points), R(g.points), b(2 * g.points);
    for (std::size_t i = 0; i < g.points; ++i) {
        U[i] = cf.U(g.x(i), q);
        R[i] = cf.R(g.x(i), q);
        b[2 * i] = kP.sigma1 * cf.merton;
    }
    SmallVec lam(2), anchor(2);
    lam << cf.lambda1, cf.lambda2;
    anchor << -cf.loading1() * cf.U(1.0, q), 0.0;
    const auto a = volatility_a(g, 1.0, U, R, cf.U(1.0, q), b, lam, anchor);
    for (std::size_t i = 0; i < g.points; i += 16)
        CHECK(a[2 * i] == doctest::Approx(-cf.loading1() * U[i]).epsilon(1e-3));
}

TEST_CASE("x-derivative is exact for quadratics up to round-off at second order") {
    const LogGrid g = LogGrid::around(1.0, 401, 1.0);
    std::vector<double> f(g.points);
    for (std::size_t i = 0; i < g.points; ++i) f[i] = g.x(i) * g.x(i);
    const auto df = x_derivative(g, f, 1);
    for (std::size_t i = 0; i < g.points; i += 40)
        CHECK(df[i] == doctest::Approx(2.0 * g.x(i)).epsilon(1e-3));
}

TEST_CASE("recovered strategy and field csv") {
    const BSClosedForm cf = bs_closed_form(kP, 0.5, 0.5, 1.0, 1.0);
    const LogGrid g = LogGrid::around(1.0, 256);
    const BrownianPath path = simulate_brownian(2, 0.1, 1e-2, 7, 0);
    const FeedbackStrategy m = merton_strategy(kBS, 0.5);
    SolveOptions o;
    o.probe_x = 1.0;
    const RSolution sol = solve_R(m, kBS, [](double x) { return std::pow(x, -1.5); }, path, g, o);
    const UtilityField f = integrate_to_U(sol, m, kBS, 1.0, zero_anchor(2), closed_form_zeta0(cf, 1.0), path);
    const RecoveredStrategy rec = recover_strategy(f, f.terminal());
    for (std::size_t i = 1; i + 1 < g.points; ++i) CHECK(rec.residual[i] < 1e-8);
    const FeedbackStrategy back = rec.as_strategy();
    for (double x : {0.1, 1.0, 7.0, 1e5}) {
        const SmallVec h = back.holdings(PathView{&path, 0}, x);
        CHECK(h(0) / x == doctest::Approx(4.0).epsilon(1e-6));
        CHECK(std::abs(h(1)) < 1e-8);
    }
    std::ostringstream os;
    write_field_csv(os, f, f.terminal());
    const std::string csv = os.str();
    CHECK(csv.rfind("z,Y,R,V,U,a1,a2\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 257);
}
