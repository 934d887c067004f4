// Acceptance gate: one line per criterion, exit status 0 iff all requested
// criteria pass. `acceptance --criterion N` runs a single one.

#include "fwdperf/contract.hpp"
#include "fwdperf/market.hpp"
#include "fwdperf/spde.hpp"
#include "fwdperf/strategy.hpp"
#include "fwdperf/verification.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace fwdperf;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

// Reference scenario.
const BlackScholes2 kMarket{0.08, 0.06, 0.2, 0.3, 0.5};
constexpr double kGamma = 0.5;
constexpr double kEps = 0.5;
constexpr double kT = 1.0;
constexpr double kX0 = 1.0;
constexpr double kU0 = 1.0;
constexpr double kDt = 1e-3;

std::string num(double v, int prec = 6) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

VerifySpec verify_spec(std::size_t paths = 100000) {
    VerifySpec v;
    v.horizon = kT;
    v.dt = kDt;
    v.x0 = kX0;
    v.seed = 7;
    v.paths = paths;
    return v;
}

// Oracle pieces written out from the model, not taken from the library.
struct Oracle {
    double s1 = kMarket.sigma1, s2 = kMarket.sigma2, rho = kMarket.rho;
    double rr = std::sqrt(1.0 - rho * rho);
    // Solve sigma^T lambda = mu by substitution on the lower-triangular system.
    double l1 = kMarket.mu1 / s1;
    double l2 = (kMarket.mu2 - s2 * rho * l1) / (s2 * rr);
    double merton = l1 / (s1 * (1.0 - kGamma));

    // sigma p for holdings proportions p = (p1, p2); factors on the rows.
    std::pair<double, double> exposure(double p1, double p2) const { return {s1 * p1 + s2 * rho * p2, s2 * rr * p2}; }

    // E[Q_T (X_T / X0)^(1 - eps)] for a constant proportion, log-normal moments.
    double payout_mean(double p1, double p2, double eps) const {
        const auto [e1, e2] = exposure(p1, p2);
        const double sp = s1 * merton;
        const double A = l1 * sp - sp * sp / 2.0;
        const double B = (l1 * l1 + l2 * l2) / 2.0;
        const double m1 = l1 - eps * sp, m2 = l2;
        const double drift = e1 * l1 + e2 * l2 - (e1 * e1 + e2 * e2) / 2.0;
        const double v1 = (1.0 - eps) * e1 - m1, v2 = (1.0 - eps) * e2 - m2;
        return std::exp((-(B - eps * A) + (1.0 - eps) * drift + 0.5 * (v1 * v1 + v2 * v2)) * kT);
    }

    // E[X_T^gamma] / gamma.
    double power_mean(double p1, double p2) const {
        const auto [e1, e2] = exposure(p1, p2);
        const double drift = e1 * l1 + e2 * l2 - (e1 * e1 + e2 * e2) / 2.0;
        return std::pow(kX0, kGamma) / kGamma *
               std::exp((kGamma * drift + 0.5 * kGamma * kGamma * (e1 * e1 + e2 * e2)) * kT);
    }
};

Outcome criterion1() {
    const MarketModel m = MarketModel::black_scholes(kMarket);
    const SmallVec lam = m.constant_coefficients().lambda;
    // Independent normal equations: (sigma sigma^T) lambda = sigma mu.
    const SmallMat s = kMarket.sigma_matrix();
    const SmallVec mu = kMarket.drift();
    const double g00 = s(0, 0) * s(0, 0) + s(0, 1) * s(0, 1);
    const double g01 = s(0, 0) * s(1, 0) + s(0, 1) * s(1, 1);
    const double g11 = s(1, 0) * s(1, 0) + s(1, 1) * s(1, 1);
    const double r0 = s(0, 0) * mu(0) + s(0, 1) * mu(1);
    const double r1 = s(1, 0) * mu(0) + s(1, 1) * mu(1);
    const double det = g00 * g11 - g01 * g01;
    const double o0 = (g11 * r0 - g01 * r1) / det;
    const double o1 = (g00 * r1 - g01 * r0) / det;
    const SmallVec resid = s.transpose() * lam - mu;
    const double oracle_err = std::max(std::abs(lam(0) - o0), std::abs(lam(1) - o1));
    const double target_err = std::max(std::abs(lam(0) - 0.4), std::abs(lam(1)));
    const bool ok = resid.cwiseAbs().maxCoeff() <= 1e-10 && oracle_err <= 1e-10 && target_err <= 1e-10;
    return {ok, "lambda = (" + num(lam(0), 12) + ", " + num(lam(1), 12) + "), |sigma^T lambda - mu| = " +
                    num(resid.cwiseAbs().maxCoeff(), 3) + ", |lambda - oracle| = " + num(oracle_err, 3)};
}

Outcome criterion2() {
    const BSClosedForm cf = bs_closed_form(kMarket, kGamma, kEps, kU0, kX0, kT);
    const MarketModel m = MarketModel::black_scholes(kMarket);
    bool ok = std::abs(cf.A) <= 1e-12 && std::abs(cf.B - 0.08) <= 1e-12;
    double worst_det = 0.0, worst_hat = 0.0;
    for (double eps : {0.5, 0.3}) {
        const BSClosedForm c = bs_closed_form(kMarket, kGamma, eps, kU0, kX0, kT);
        for (std::size_t i = 0; i < 1000; ++i) {
            const BrownianPath p = simulate_brownian(2, kT, kDt, 11, i);
            const AssetPath a = asset_path(p, m);
            for (std::size_t k : {p.steps() / 4, p.steps() / 2, p.steps()}) {
                const double t = p.time(k);
                const auto W = p.value(k);
                const double q = c.Q(t, W[0], W[1]);
                const double qh = q_from_returns(t, a.ratio(k, 0), a.ratio(k, 1), c);
                worst_hat = std::max(worst_hat, std::abs(qh / q - 1.0));
                if (eps == 0.5) worst_det = std::max(worst_det, std::abs(q / std::exp(-0.08 * t) - 1.0));
            }
        }
    }
    ok = ok && worst_det <= 1e-10 && worst_hat <= 1e-10;
    return {ok, "A = " + num(cf.A, 3) + ", B = " + num(cf.B, 12) + ", max |Q/e^{-0.08t} - 1| = " + num(worst_det, 3) +
                    ", max |Qhat/Q - 1| = " + num(worst_hat, 3) + " (eps 0.5 and 0.3, 1000 paths)"};
}

Outcome criterion3() {
    const BSClosedForm cf = bs_closed_form(kMarket, kGamma, kEps, kU0, kX0, kT);
    const MarketModel m = MarketModel::black_scholes(kMarket);
    const Oracle o;
    // E[U_t(X_t)] = E[Q_t X_t^(1-eps)] / (eps (1-eps)); at the Merton proportion the moment is 1 at every t.
    const double target = o.payout_mean(o.merton, 0.0, kEps) / (kEps * (1.0 - kEps));
    const auto rep = martingale_test(closed_form_utility(cf), merton_strategy(m, kGamma), m, {0.25, 0.5, 1.0},
                                     verify_spec());
    bool ok = !rep.invalid && std::abs(target - 4.0) <= 1e-12;
    std::string d = "oracle " + num(target, 12) + ";";
    for (const auto& r : rep.rows) {
        const bool row_ok = std::abs(r.estimate - target) <= 3.0 * r.se;
        ok = ok && row_ok;
        d += " " + r.arm + ": " + num(r.estimate, 7) + " +- " + num(r.se, 2) + (row_ok ? "" : " (out)");
    }
    return {ok, d};
}

Outcome criterion4() {
    const BSClosedForm cf = bs_closed_form(kMarket, kGamma, kEps, kU0, kX0, kT);
    const MarketModel m = MarketModel::black_scholes(kMarket);
    const Oracle o;
    DeviationFamily f{merton_strategy(m, kGamma), {scaled_merton(m, kGamma, 2.0), asset2_deviation(m, kGamma)}};
    const auto rep = deviation_test(cf.contract(), f, m, verify_spec());
    const double t_ctrl = kU0 * o.payout_mean(o.merton, 0.0, kEps);
    const double t_k2 = kU0 * o.payout_mean(2.0 * o.merton, 0.0, kEps);
    const double t_a2 = kU0 * o.payout_mean(o.merton, 1.0, kEps);
    bool ok = !rep.invalid && std::abs(t_ctrl - 1.0) <= 1e-12 && std::abs(t_k2 - std::exp(-0.08)) <= 1e-12 &&
              std::abs(t_a2 - std::exp(-0.01125)) <= 1e-12;
    std::string d;
    auto check = [&](const ArmResult& r, double target) {
        const bool in = std::abs(r.estimate - target) <= 3.0 * r.se;
        ok = ok && in && r.pass;
        d += r.arm + ": " + num(r.estimate, 7) + " +- " + num(r.se, 2) + " vs " + num(target, 7) +
             (in ? "" : " (out)") + (r.note.empty() ? "" : " [" + r.note + "]") + "; ";
    };
    check(rep.rows[0], t_ctrl);
    check(rep.rows[1], t_k2);
    check(rep.rows[2], t_a2);
    return {ok, d};
}

Outcome criterion5() {
    const MarketModel m = MarketModel::black_scholes(kMarket);
    const Oracle o;
    const double target = o.power_mean(o.merton, 0.0);
    const double zero_target = o.power_mean(0.0, 0.0);
    const auto rep = principal_value_test(merton_strategy(m, kGamma), {zero_strategy(2)}, m, kGamma, verify_spec());
    const ArmResult& c = rep.rows[0];
    const ArmResult& z = rep.rows[1];
    const bool ok = !rep.invalid && std::abs(target - 2.0 * std::exp(0.08)) <= 1e-12 &&
                    std::abs(c.estimate - target) <= 3.0 * c.se && z.estimate == 2.0 && zero_target == 2.0;
    return {ok, "control " + num(c.estimate, 7) + " +- " + num(c.se, 2) + " vs " + num(target, 7) + "; zero " +
                    num(z.estimate, 17)};
}

Outcome criterion6() {
    const BSClosedForm cf = bs_closed_form(kMarket, kGamma, kEps, kU0, kX0, kT);
    const MarketModel m = MarketModel::black_scholes(kMarket);
    const DeviationFamily f = DeviationFamily::standard(m, kGamma);
    const InjectionEvent ev{0.5, InjectionEvent::Kind::multiplier, 2.0};
    const NestedSpec nested{1000, 1000, 0.99};
    const VerifySpec spec = verify_spec();
    const auto real = injection_robustness_test(cf.contract(), f, ev, closed_form_utility(cf), m, spec, nested);
    const Contract fake = fake_contract(merton_terminal_wealth_rule(m, kGamma, kX0, kT), kU0);
    const auto faked = injection_robustness_test(fake, f, ev, closed_form_utility(cf), m, spec, nested, "fake");
    std::string d;
    for (const auto& r : real.rows)
        d += r.arm + " " + num(r.estimate, 6) + (r.arm.rfind("control", 0) == 0 ? " vs " + num(r.target, 6) : "") +
             (r.pass ? "" : " (fail)") + "; ";
    d += real.invalid ? "invalid: " + real.invalid_reason + "; " : "";
    const ArmResult& fc = faked.rows[0];
    d += "fake contract " + std::string(faked.pass() ? "passed (unexpected)" : "fails as expected") + ": " + fc.arm +
         " " + num(fc.estimate, 6) + " vs " + num(fc.target, 6);
    return {real.pass() && !faked.pass(), d};
}

SpdeCheckSpec spde_spec(std::size_t points, double dt, std::size_t paths) {
    SpdeCheckSpec s;
    s.grid = LogGrid::around(kX0, points, 6.0, 1.5);
    s.dt = dt;
    s.horizon = kT;
    s.x_bar = kX0;
    s.paths = paths;
    s.seed = 7;
    return s;
}

Outcome criterion7() {
    const BSClosedForm cf5 = bs_closed_form(kMarket, kGamma, 0.5, kU0, kX0, kT);
    const BSClosedForm cf3 = bs_closed_form(kMarket, kGamma, 0.3, kU0, kX0, kT);
    const SpdeErrors coarse = spde_path_errors(cf5, spde_spec(512, kDt, 1), 0);
    const SpdeErrors fine = spde_path_errors(cf5, spde_spec(1024, kDt / 4.0, 1), 0);
    SpdeCheckSpec s3 = spde_spec(512, kDt, 32);
    s3.tolerance = 1e-2;
    const auto rep3 = spde_vs_closed_form(cf3, s3);
    const double err3 = rep3.row("R max").estimate;
    const double ratio = coarse.R / fine.R;
    const bool a = coarse.R < 1e-3, b = err3 < 1e-2, c = ratio >= 3.0;
    return {a && b && c, "eps 0.5 max rel error " + num(coarse.R, 3) + (a ? "" : " (fail)") +
                             "; eps 0.3 max over 32 paths " + num(err3, 3) + (b ? "" : " (fail)") +
                             "; refined (M 1024, dt/4) " + num(fine.R, 3) + ", ratio " + num(ratio, 3) +
                             (c ? "" : " (fail, needs >= 3)")};
}

Outcome criterion8() {
    const BSClosedForm cf = bs_closed_form(kMarket, kGamma, kEps, kU0, kX0, kT);
    const MarketModel m = MarketModel::black_scholes(kMarket);
    const FeedbackStrategy merton = merton_strategy(m, kGamma);
    const LogGrid grid = LogGrid::around(kX0, 512, 6.0, 1.5);
    const BrownianPath path = simulate_brownian(2, kT, kDt, 7, 0);
    SolveOptions o;
    o.probe_x = kX0;
    o.snapshot_steps = {0, path.steps()};
    const RSolution sol = solve_R(merton, m, [](double x) { return std::pow(x, -1.5); }, path, grid, o);
    const UtilityField field = integrate_to_U(sol, merton, m, kX0, zero_anchor(2), closed_form_zeta0(cf, kX0), path);
    const RecoveredStrategy rec = recover_strategy(field, field.terminal());
    const Oracle orc;
    double e1 = 0.0, e2 = 0.0;
    for (std::size_t i = 1; i + 1 < grid.points; ++i) {
        const SmallVec h = rec.holdings_at(i);
        e1 = std::max(e1, std::abs(h(0) / grid.x(i) - orc.merton));
        e2 = std::max(e2, std::abs(h(1)));
    }
    const bool ok = std::abs(orc.merton - 4.0) <= 1e-12 && e1 < 5e-3 && e2 < 1e-8;
    return {ok, "max interior |pi1/x - 4| = " + num(e1, 3) + " (dz^2 = " + num(grid.dz() * grid.dz(), 3) +
                    "), max |pi2| = " + num(e2, 3)};
}

Outcome criterion9() {
    const BSClosedForm cf = bs_closed_form(kMarket, kGamma, kEps, kU0, kX0, kT);
    Contract c = cf.contract();
    const LogGrid grid = LogGrid::around(kX0, 512, 6.0, 1.5);
    std::vector<double> xs(grid.points);
    for (std::size_t i = 0; i < grid.points; ++i) xs[i] = grid.x(i);
    const std::size_t n_paths = (100000 + grid.points - 1) / grid.points;
    std::vector<std::vector<double>> W(n_paths);
    std::vector<MarketState> states;
    for (std::size_t i = 0; i < n_paths; ++i) {
        const BrownianPath p = simulate_brownian(2, kT, kDt, 7, i);
        W[i].assign(p.value(p.steps()).begin(), p.value(p.steps()).end());
    }
    for (std::size_t i = 0; i < n_paths; ++i) states.push_back(MarketState{kT, W[i], {}, nullptr});
    const double lo = certify_limited_liability(c, xs, states);
    const bool ok = lo >= 0.0 && c.limited_liability().value_or(false);
    return {ok, "min payout " + num(lo, 6) + " over " + std::to_string(n_paths * xs.size()) + " evaluations"};
}

Outcome criterion10() {
    const double eps = 1e-3;
    const BSClosedForm cf = bs_closed_form(kMarket, kGamma, eps, kU0, kX0, kT);
    const Contract c = cf.contract();
    const MarketModel m = MarketModel::black_scholes(kMarket);
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (std::size_t i = 0; i < 1000; ++i) {
        const BrownianPath p = simulate_brownian(2, kT, kDt, 7, i);
        const AssetPath a = asset_path(p, m);
        const std::vector<double> ratios{a.ratio(p.steps(), 0), a.ratio(p.steps(), 1)};
        const MarketState st{kT, {}, ratios, nullptr};
        const double qhat = q_from_returns(kT, ratios[0], ratios[1], cf);
        for (double x : {0.25, 0.5, 1.0, 2.0, 4.0}) {
            const double r = c(x, st) * qhat / (kU0 * x / kX0);
            lo = std::min(lo, r);
            hi = std::max(hi, r);
        }
    }
    const bool ok = lo >= 0.99 && hi <= 1.01;
    return {ok, "C*(x) Qhat_T / (u0 x / X0) ranges over [" + num(lo, 6) + ", " + num(hi, 6) +
                    "] on 1000 paths x 5 wealth levels"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    int only = 0;
    app.add_option("--criterion", only, "run a single criterion (1-10)")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);

    const std::map<int, std::function<Outcome()>> all{
        {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4},  {5, criterion5},
        {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9}, {10, criterion10}};
    bool ok = true;
    for (const auto& [n, run] : all) {
        if (only && n != only) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = run();
        } catch (const std::exception& e) {
            out = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << "criterion " << n << ": " << (out.pass ? "PASS" : "FAIL") << " (" << num(secs, 3) << " s) "
                  << out.detail << std::endl;
        ok = ok && out.pass;
    }
    return ok ? 0 : 1;
}
