#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fwdperf/market.hpp"
#include "fwdperf/rng.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <sstream>

using namespace fwdperf;

TEST_CASE("market price of risk matches an SVD pseudo-inverse") {
    Pcg32 rng(3, 1);
    NormalSource n(rng);
    for (int trial = 0; trial < 50; ++trial) {
        const int k = 1 + trial % 3;
        const int d = k + trial % 2;
        SmallMat s(d, k);
        SmallVec mu(k);
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < k; ++c) s(r, c) = n();
        for (int c = 0; c < k; ++c) mu(c) = 0.1 * n();
        const SmallVec lam = market_price_of_risk(s, mu);
        const Eigen::MatrixXd st = Eigen::MatrixXd(s).transpose();
        const Eigen::VectorXd oracle = st.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(Eigen::VectorXd(mu));
        for (int r = 0; r < d; ++r) CHECK(lam(r) == doctest::Approx(oracle(r)).epsilon(1e-9));
        CHECK((s.transpose() * lam - mu).norm() < 1e-10);
    }
}

TEST_CASE("black-scholes lambda agrees with the closed form") {
    BlackScholes2 p;
    const MarketModel m = MarketModel::black_scholes(p);
    const SmallVec lam = m.constant_coefficients().lambda;
    CHECK(lam(0) == doctest::Approx(0.4).epsilon(1e-14));
    CHECK(std::abs(lam(1)) < 1e-14);
    p.mu2 = 0.1;
    const SmallVec l2 = MarketModel::black_scholes(p).constant_coefficients().lambda;
    CHECK((l2 - p.lambda_closed_form()).norm() < 1e-12);
}

TEST_CASE("dependent columns are rejected") {
    SmallMat s(2, 2);
    s << 0.2, 0.4, 0.1, 0.2;
    SmallVec mu(2);
    mu << 0.05, 0.1;
    CHECK_THROWS_AS(market_price_of_risk(s, mu, 17), DegeneracyError);
    try {
        market_price_of_risk(s, mu, 17);
    } catch (const DegeneracyError& e) {
        CHECK(e.time_index == 17);
    }
}

TEST_CASE("bad black-scholes parameters") {
    BlackScholes2 p;
    p.rho = 1.0;
    CHECK_THROWS(p.validate());
    p = {};
    p.sigma1 = -0.1;
    CHECK_THROWS(p.validate());
}

TEST_CASE("grid steps") {
    CHECK(grid_steps(1.0, 1e-3) == 1000);
    CHECK(grid_steps(0.5, 0.1) == 5);
    CHECK_THROWS_AS(grid_steps(1.0, 0.3), ConfigError);
}

TEST_CASE("brownian increments have the right moments") {
    const double dt = 1e-2;
    double s1 = 0.0, s2 = 0.0, cross = 0.0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < 2000; ++p) {
        const BrownianPath path = simulate_brownian(2, 1.0, dt, 5, p);
        for (std::size_t i = 0; i < path.steps(); ++i) {
            const auto dw = path.increment(i);
            s1 += dw[0];
            s2 += dw[0] * dw[0];
            cross += dw[0] * dw[1];
            ++n;
        }
    }
    const double nn = static_cast<double>(n);
    // Standard errors: sqrt(dt / n) for the mean, dt sqrt(2 / n) for the variance.
    CHECK(std::abs(s1 / nn) < 4.0 * std::sqrt(dt / nn));
    CHECK(std::abs(s2 / nn - dt) < 4.0 * dt * std::sqrt(2.0 / nn));
    CHECK(std::abs(cross / nn) < 4.0 * dt / std::sqrt(nn));
}

TEST_CASE("paths are reproducible per (seed, index)") {
    const BrownianPath a = simulate_brownian(2, 1.0, 1e-2, 9, 4);
    const BrownianPath b = simulate_brownian(2, 1.0, 1e-2, 9, 4);
    const BrownianPath c = simulate_brownian(2, 1.0, 1e-2, 9, 5);
    CHECK(std::equal(a.increments().begin(), a.increments().end(), b.increments().begin()));
    CHECK_FALSE(std::equal(a.increments().begin(), a.increments().end(), c.increments().begin()));
    BrownianPath reused = c;
    simulate_brownian_into(reused, 2, 1.0, 1e-2, 9, 4);
    CHECK(std::equal(a.increments().begin(), a.increments().end(), reused.increments().begin()));
}

TEST_CASE("values are cumulative sums of increments") {
    const BrownianPath a = simulate_brownian(3, 0.5, 1e-2, 1, 0);
    std::vector<double> inc(a.increments().begin(), a.increments().end());
    const BrownianPath b = BrownianPath::from_increments(3, 1e-2, inc);
    CHECK(b.steps() == a.steps());
    double w = 0.0;
    for (std::size_t i = 0; i < a.steps(); ++i) w += a.increment(i)[2];
    CHECK(a.value(a.steps())[2] == doctest::Approx(w).epsilon(1e-14));
    CHECK(b.value(b.steps())[2] == a.value(a.steps())[2]);
    CHECK(a.value(0)[0] == 0.0);
}

TEST_CASE("asset path is exact log-euler") {
    const BlackScholes2 p;
    const MarketModel m = MarketModel::black_scholes(p);
    const BrownianPath path = simulate_brownian(2, 1.0, 1e-3, 2, 0);
    const AssetPath a = asset_path(path, m);
    const SmallMat s = p.sigma_matrix();
    for (std::size_t i : {std::size_t{0}, std::size_t{250}, std::size_t{1000}}) {
        const auto W = path.value(i);
        const double t = path.time(i);
        for (int j = 0; j < 2; ++j) {
            const double var = s(0, j) * s(0, j) + s(1, j) * s(1, j);
            const double mu = j == 0 ? p.mu1 : p.mu2;
            const double expect = (mu - 0.5 * var) * t + s(0, j) * W[0] + s(1, j) * W[1];
            CHECK(a.log_ratio(i, j) == doctest::Approx(expect).epsilon(1e-11).scale(1.0));
        }
    }
}

TEST_CASE("general market evaluates callbacks per step") {
    auto drift = [](const PathView& v) {
        SmallVec mu(1);
        mu << 0.05 + 0.01 * v.t();
        return mu;
    };
    auto vol = [](const PathView&) {
        SmallMat s(1, 1);
        s << 0.25;
        return s;
    };
    const MarketModel m = MarketModel::general(1, 1, drift, vol);
    CHECK_FALSE(m.is_constant());
    const BrownianPath path = simulate_brownian(1, 1.0, 0.5, 0, 0);
    const Coefficients c = m.at(PathView{&path, 2});
    CHECK(c.lambda(0) == doctest::Approx(0.06 / 0.25));
}

TEST_CASE("path csv layout") {
    const MarketModel m = MarketModel::black_scholes({});
    const BrownianPath path = simulate_brownian(2, 0.02, 0.01, 0, 0);
    std::ostringstream os;
    write_path_csv(os, path, asset_path(path, m));
    const std::string s = os.str();
    CHECK(s.rfind("t,W1,W2,S1,S2\n", 0) == 0);
    CHECK(std::count(s.begin(), s.end(), '\n') == 4);
}
