#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fwdperf/contract.hpp"
#include "fwdperf/rng.hpp"

#include <cmath>
#include <sstream>

using namespace fwdperf;

namespace {

const BlackScholes2 kP;

}  // namespace

TEST_CASE("closed-form constants") {
    const BSClosedForm cf = bs_closed_form(kP, 0.5, 0.5, 1.0, 1.0);
    CHECK(cf.lambda1 == doctest::Approx(0.4));
    CHECK(std::abs(cf.lambda2) < 1e-15);
    CHECK(cf.merton == doctest::Approx(4.0));
    CHECK(std::abs(cf.A) < 1e-15);
    CHECK(cf.B == doctest::Approx(0.08));
    CHECK(cf.Q(0.7, 0.3, -1.0) == doctest::Approx(std::exp(-0.08 * 0.7)).epsilon(1e-14));
    CHECK_THROWS(bs_closed_form(kP, 1.0, 0.5, 1.0, 1.0));
    CHECK_THROWS(bs_closed_form(kP, 0.5, 1.0, 1.0, 1.0));
    CHECK_THROWS(bs_closed_form(kP, 0.5, 0.5, -1.0, 1.0));
}

TEST_CASE("U, V, R are consistent derivatives") {
    const BSClosedForm cf = bs_closed_form(kP, 0.5, 0.3, 1.0, 1.0);
    const double q = 1.3, h = 1e-5;
    for (double x : {0.1, 1.0, 5.0}) {
        const double dU = (cf.U(x + h, q) - cf.U(x - h, q)) / (2 * h);
        const double dV = (cf.V(x + h, q) - cf.V(x - h, q)) / (2 * h);
        CHECK(dU == doctest::Approx(cf.V(x, q)).epsilon(1e-8));
        CHECK(-dV == doctest::Approx(cf.R(x, q)).epsilon(1e-7));
    }
    CHECK(cf.U(1.0, 1.0) == doctest::Approx(1.0 / 0.21));
    CHECK(closed_form_zeta0(cf, 2.0) == doctest::Approx(std::pow(2.0, 0.7) / 0.21));
}

TEST_CASE("Q-hat from returns equals Q from the Brownian motion") {
    Pcg32 rng(1, 2);
    NormalSource n(rng);
    for (double eps : {0.5, 0.3, 0.01}) {
        for (double mu2 : {0.06, 0.1}) {
            BlackScholes2 p = kP;
            p.mu2 = mu2;
            const BSClosedForm cf = bs_closed_form(p, 0.5, eps, 1.0, 1.0);
            for (int trial = 0; trial < 200; ++trial) {
                const double t = 0.01 + 0.99 * rng.uniform();
                const double w1 = std::sqrt(t) * n(), w2 = std::sqrt(t) * n();
                const double r = std::sqrt(1.0 - p.rho * p.rho);
                const double s1 = std::exp((p.mu1 - 0.5 * p.sigma1 * p.sigma1) * t + p.sigma1 * w1);
                const double s2 = std::exp((p.mu2 - 0.5 * p.sigma2 * p.sigma2) * t + p.sigma2 * (p.rho * w1 + r * w2));
                CHECK(q_from_returns(t, s1, s2, cf) == doctest::Approx(cf.Q(t, w1, w2)).epsilon(1e-10));
            }
        }
    }
}

TEST_CASE("Q-hat exponents as displayed") {
    // Typed from the published display, with lambda2 != 0 so that every term counts.
    BlackScholes2 p = kP;
    p.mu2 = 0.1;
    const double g = 0.5, eps = 0.3;
    const BSClosedForm cf = bs_closed_form(p, g, eps, 1.0, 1.0);
    const double l1 = p.mu1 / p.sigma1;
    const double r = std::sqrt(1 - p.rho * p.rho);
    const double l2 = (p.mu2 - p.sigma2 * p.rho * l1) / (p.sigma2 * r);
    const double pi = l1 / (p.sigma1 * (1 - g));
    const double rate = 0.5 * (l1 * l1 + l2 * l2) - l1 * p.sigma1 / 2 + eps * pi * p.sigma1 * p.sigma1 / 2 * (1 - pi) -
                        l2 * (p.sigma2 - p.sigma1 * p.rho) / (2 * r);
    const double e1 = eps * pi + p.rho * l2 / (p.sigma1 * r) - l1 / p.sigma1;
    const double e2 = -l2 / (p.sigma2 * r);
    CHECK(cf.qhat_time_rate() == doctest::Approx(rate).epsilon(1e-14));
    CHECK(cf.qhat_exponent1() == doctest::Approx(e1).epsilon(1e-14));
    CHECK(cf.qhat_exponent2() == doctest::Approx(e2).epsilon(1e-14));
}

TEST_CASE("contract payout and its small-epsilon limit") {
    const double W[2] = {0.3, -0.2};
    const MarketState s{1.0, W, {}, nullptr};
    const BSClosedForm cf = bs_closed_form(kP, 0.5, 0.5, 2.0, 1.5);
    const Contract c = cf.contract();
    CHECK(c.kind() == ContractKind::closed_form);
    CHECK(c(1.5, s) == doctest::Approx(2.0 * std::exp(-0.08)));
    CHECK(c(6.0, s) == doctest::Approx(2.0 * 2.0 * std::exp(-0.08)));
    // As epsilon -> 0 the payout tends to u0 (x / X0) Q_T.
    double prev = 1.0;
    for (double eps : {1e-2, 1e-3, 1e-4}) {
        const BSClosedForm e = bs_closed_form(kP, 0.5, eps, 1.0, 1.0);
        const double lim = 3.0 * std::exp(-0.08 - 0.4 * W[0]);
        const double gap = std::abs(e.contract()(3.0, s) / lim - 1.0);
        CHECK(gap < prev);
        prev = gap;
    }
    CHECK(prev < 1e-3);
}

TEST_CASE("anchor volatility reads Q off the density") {
    const BSClosedForm cf = bs_closed_form(kP, 0.5, 0.3, 1.0, 1.0);
    const double q = 0.7, xb = 2.0;
    const SmallVec a = closed_form_anchor(cf)(AnchorState{0, 0.0, cf.R(xb, q), xb, nullptr});
    CHECK(a(0) == doctest::Approx(-cf.loading1() * cf.U(xb, q)).epsilon(1e-13));
    CHECK(a(1) == doctest::Approx(-cf.loading2() * cf.U(xb, q)).epsilon(1e-13).scale(1.0));
}

TEST_CASE("fake contract pays only at the target") {
    const Contract f = fake_contract([](const MarketState&) { return 2.0; }, 1.0);
    const MarketState s{};
    CHECK(f(2.0, s) == 1.0);
    CHECK(f(2.0 * (1 + 1e-9), s) == 1.0);
    CHECK(f(2.0 * (1 + 1e-6), s) == 0.0);
    CHECK(f(4.0, s) == 0.0);
}

TEST_CASE("normalisation") {
    const Contract raw(ContractKind::custom, 1.0, [](double x, const MarketState&) { return 3.0 * x; });
    const Contract c = normalize_contract(raw, 1.5, 2.0);
    CHECK(c(1.0, MarketState{}) == doctest::Approx(4.0));
    CHECK(c.params().count("normalization") == 1);
    CHECK_THROWS_AS(normalize_contract(raw, 0.0, 1.0), NormalizationError);
    CHECK_THROWS_AS(contract_from_U(-1.0, 1.0), NormalizationError);
    const Contract u = contract_from_U([](double x) { return std::sqrt(x); }, 4.0, 2.0);
    CHECK(u(9.0, MarketState{}) == doctest::Approx(1.5));
    CHECK_THROWS(contract_from_U(4.0, 1.0)(1.0, MarketState{}));
}

TEST_CASE("limited liability certificate") {
    const BSClosedForm cf = bs_closed_form(kP, 0.5, 0.5, 1.0, 1.0);
    Contract c = cf.contract();
    CHECK_FALSE(c.limited_liability().has_value());
    const double W[2] = {2.0, -1.0};
    const std::vector<MarketState> states{{1.0, W, {}, nullptr}};
    const std::vector<double> xs{1e-6, 1.0, 1e3};
    CHECK(certify_limited_liability(c, xs, states) > 0.0);
    CHECK(*c.limited_liability());
    Contract bad(ContractKind::custom, 1.0, [](double x, const MarketState&) { return x - 1.0; });
    CHECK(certify_limited_liability(bad, xs, states) < 0.0);
    CHECK_FALSE(*bad.limited_liability());
}

TEST_CASE("description round trip") {
    BlackScholes2 p = kP;
    p.rho = -0.25;
    const BSClosedForm cf = bs_closed_form(p, -2.0, 0.3, 1.7, 2.5, 0.5);
    const std::string text = describe(cf.contract());
    CHECK(text.rfind("type = \"closed-form\"\nu0 = 1.7\n", 0) == 0);
    const Contract back = parse_closed_form_description(text);
    CHECK(describe(back) == text);
    const double W[2] = {0.1, 0.2};
    const MarketState s{0.5, W, {}, nullptr};
    CHECK(back(3.0, s) == cf.contract()(3.0, s));
    CHECK_THROWS_AS(parse_closed_form_description("type = \"fake\"\n"), ConfigError);
    CHECK_THROWS_AS(parse_closed_form_description(text + "bogus = 1\n"), ConfigError);
}

TEST_CASE("value function") {
    CHECK(bs_value_function(1.0, 4.0, 1.0, 0.4, 0.5) == doctest::Approx(4.0));
    CHECK(bs_value_function(0.0, 1.0, 1.0, 0.4, 0.5) == doctest::Approx(2.0 * std::exp(0.08)));
    CHECK_THROWS(bs_value_function(2.0, 1.0, 1.0, 0.4, 0.5));
}

TEST_CASE("payout csv") {
    const BSClosedForm cf = bs_closed_form(kP, 0.5, 0.5, 1.0, 1.0);
    const double W[2] = {0.0, 0.0};
    std::ostringstream os;
    const std::vector<double> xs{1.0, 4.0};
    write_payout_csv(os, cf.contract(), xs, MarketState{1.0, W, {}, nullptr});
    CHECK(os.str().rfind("x,payout\n1,", 0) == 0);
}
