#include "fwdperf/pipeline.hpp"

#include "fwdperf/contract.hpp"
#include "fwdperf/report.hpp"

#include <cmath>
#include <fstream>
#include <ostream>

namespace fwdperf {

namespace {

MarketModel market_of(const Scenario& s) { return MarketModel::black_scholes(s.market); }

InjectionSchedule schedule_of(const Scenario& s) {
    InjectionSchedule sch;
    for (const auto& spec : s.injections) sch.events.push_back(parse_injection(spec));
    return sch;
}

DeviationFamily family_of(const Scenario& s, const MarketModel& m) {
    DeviationFamily f{merton_strategy(m, s.gamma), {}};
    for (const auto& label : s.deviations) f.deviations.push_back(strategy_from_label(label, m, s.gamma));
    return f;
}

BSClosedForm closed_form_of(const Scenario& s) {
    return bs_closed_form(s.market, s.gamma, s.epsilon, s.u0, s.x0, s.horizon);
}

VerifySpec verify_spec_of(const Scenario& s) {
    VerifySpec v;
    v.horizon = s.horizon;
    v.dt = s.dt;
    v.x0 = s.x0;
    v.seed = s.seed;
    v.paths = s.paths;
    v.exec = s.exec;
    return v;
}

}  // namespace

void run_simulate(const Scenario& s, const std::filesystem::path& dir, bool overwrite) {
    const MarketModel m = market_of(s);
    const BrownianPath path = simulate_brownian(m.num_factors(), s.horizon, s.dt, s.seed, 0);
    {
        auto out = open_output(dir, "path.csv", overwrite);
        write_path_csv(out, path, asset_path(path, m));
    }
    {
        auto out = open_output(dir, "wealth.csv", overwrite);
        write_wealth_csv(out, simulate_wealth(merton_strategy(m, s.gamma), path, m, StartPoint{s.x0, 0},
                                              schedule_of(s)));
    }
    EnsembleSpec ens;
    ens.horizon = s.horizon;
    ens.dt = s.dt;
    ens.seed = s.seed;
    ens.paths = std::max<std::size_t>(s.paths, 1000);
    ens.x0 = s.x0;
    ens.exec = s.exec;
    auto out = open_output(dir, "admissibility.txt", overwrite);
    const auto rep = check_admissibility(merton_strategy(m, s.gamma), m, s.gamma, ens);
    out.precision(10);
    out << "strategy " << rep.label << '\n'
        << "ensemble " << rep.ensemble_size << ", floored " << rep.floored << '\n'
        << "E sup X = " << rep.sup_wealth.mean << " +- " << rep.sup_wealth.se << '\n'
        << "E sup X^gamma = " << rep.sup_wealth_pow.mean << " +- " << rep.sup_wealth_pow.se << '\n'
        << "E sup X at N/4, N/2, N = " << rep.sup_wealth_prefix[0].mean << ", " << rep.sup_wealth_prefix[1].mean
        << ", " << rep.sup_wealth_prefix[2].mean << '\n'
        << "diverging " << (rep.diverging ? "yes" : "no") << '\n'
        << "regularity " << (rep.regularity.ok() ? "ok" : "violated at orders");
    for (int o : rep.regularity.violating_orders) out << ' ' << o;
    out << '\n' << rep.note << '\n';
}

void run_solve_spde(const Scenario& s, const std::filesystem::path& dir, bool overwrite) {
    const MarketModel m = market_of(s);
    const FeedbackStrategy merton = merton_strategy(m, s.gamma);
    const BSClosedForm cf = closed_form_of(s);
    const BrownianPath path = simulate_brownian(m.num_factors(), s.horizon, s.dt, s.seed, 0);
    const LogGrid grid = s.grid();

    SolveOptions o;
    o.probe_x = s.x_bar;
    o.exec = s.exec;
    o.snapshot_steps.push_back(0);
    for (std::size_t k : checkpoint_steps(s.checkpoints, s.dt)) o.snapshot_steps.push_back(k);
    o.snapshot_steps.push_back(path.steps());
    const double e = s.epsilon;
    const RSolution sol = solve_R(merton, m, [e](double x) { return std::pow(x, -1.0 - e); }, path, grid, o);
    const bool cf_anchor = s.anchor == "closed-form";
    const UtilityField field =
        integrate_to_U(sol, merton, m, s.x_bar, cf_anchor ? closed_form_anchor(cf) : zero_anchor(m.num_factors()),
                       closed_form_zeta0(cf, s.x_bar), path);
    for (const auto& snap : field.snapshots) {
        auto out = open_output(dir, "field_" + std::to_string(snap.step) + ".csv", overwrite);
        write_field_csv(out, field, snap);
    }
    const RecoveredStrategy rec = recover_strategy(field, field.terminal());
    auto out = open_output(dir, "strategy.csv", overwrite);
    out.precision(17);
    out << "z,x";
    for (int j = 0; j < rec.k; ++j) out << ",pi" << (j + 1) << "_over_x";
    out << ",residual\n";
    for (std::size_t i = 0; i < grid.points; ++i) {
        out << grid.z(i) << ',' << grid.x(i);
        const SmallVec h = rec.holdings_at(i);
        for (int j = 0; j < rec.k; ++j) out << ',' << h(j) / grid.x(i);
        out << ',' << rec.residual[i] << '\n';
    }
}

void run_bs_closed_form(const Scenario& s, const std::filesystem::path& dir, bool overwrite) {
    const BSClosedForm cf = closed_form_of(s);
    {
        auto out = open_output(dir, "closed_form.txt", overwrite);
        out.precision(17);
        out << "# constants\n"
            << "lambda1 = " << cf.lambda1 << "\nlambda2 = " << cf.lambda2 << "\nmerton_proportion = " << cf.merton
            << "\nA = " << cf.A << "\nB = " << cf.B << "\nqhat_time_rate = " << cf.qhat_time_rate()
            << "\nqhat_exponent1 = " << cf.qhat_exponent1() << "\nqhat_exponent2 = " << cf.qhat_exponent2()
            << "\nvalue_function_0 = " << bs_value_function(0.0, s.x0, s.horizon, cf.lambda1, s.gamma)
            << "\n# contract\n"
            << describe(cf.contract());
    }
    const BrownianPath path = simulate_brownian(2, s.horizon, s.dt, s.seed, 0);
    const AssetPath assets = asset_path(path, MarketModel::black_scholes(s.market));
    const std::vector<double> ratios{assets.ratio(path.steps(), 0), assets.ratio(path.steps(), 1)};
    const MarketState state{s.horizon, path.value(path.steps()), ratios, nullptr};
    const LogGrid grid = s.grid();
    std::vector<double> xs(grid.points);
    for (std::size_t i = 0; i < grid.points; ++i) xs[i] = grid.x(i);
    auto out = open_output(dir, "payout.csv", overwrite);
    write_payout_csv(out, cf.contract(), xs, state);
}

std::vector<VerificationReport> run_verifications(const Scenario& s, std::ostream& log) {
    const MarketModel m = market_of(s);
    const BSClosedForm cf = closed_form_of(s);
    const UtilityFactory utility = closed_form_utility(cf);
    const FeedbackStrategy merton = merton_strategy(m, s.gamma);
    const DeviationFamily family = family_of(s, m);
    const VerifySpec spec = verify_spec_of(s);
    const Contract contract = cf.contract();
    std::vector<VerificationReport> reports;

    auto step = [&](const std::string& name) { log << "running " << name << std::endl; };

    step("martingale_test");
    reports.push_back(martingale_test(utility, merton, m, s.checkpoints, spec));
    step("deviation_test");
    reports.push_back(deviation_test(contract, family, m, spec));
    step("principal_value_test");
    reports.push_back(principal_value_test(merton, family.deviations, m, s.gamma, spec));
    for (const auto& dev : family.deviations) {
        step("supermartingale_profile " + dev.label());
        auto rep = supermartingale_profile(utility, dev, m, s.checkpoints, spec, true);
        rep.test += ":" + dev.label();
        reports.push_back(rep);
    }
    NestedSpec nested;
    nested.outer = s.outer_paths;
    nested.inner = s.inner_paths;
    for (const auto& spec_text : s.injections) {
        const InjectionEvent ev = parse_injection(spec_text);
        step("injection_robustness_test " + spec_text);
        reports.push_back(injection_robustness_test(contract, family, ev, utility, m, spec, nested, spec_text));
        if (s.fake_contract) {
            step("injection_robustness_test fake " + spec_text);
            const Contract fake = fake_contract(merton_terminal_wealth_rule(m, s.gamma, s.x0, s.horizon), s.u0);
            auto rep = injection_robustness_test(fake, family, ev, utility, m, spec, nested, "fake " + spec_text);
            rep.test = "injection_robustness_test:fake";
            rep.expected_failure = true;
            reports.push_back(rep);
        }
    }
    step("spde_vs_closed_form");
    SpdeCheckSpec sc;
    sc.grid = s.grid();
    sc.dt = s.dt;
    sc.horizon = s.horizon;
    sc.x_bar = s.x_bar;
    sc.paths = s.spde_paths;
    sc.seed = s.seed;
    sc.tolerance = s.spde_tolerance;
    sc.exec = s.exec;
    reports.push_back(spde_vs_closed_form(cf, sc));
    return reports;
}

int run_scenario(const Scenario& s, const std::string& command, bool overwrite, std::ostream& log) {
    const std::filesystem::path dir = s.out;
    {
        auto echo = open_output(dir, "config.toml", overwrite);
        write_scenario(echo, s);
    }
    const bool all = command == "all";
    if (!all && command != "simulate" && command != "solve-spde" && command != "bs-closed-form" && command != "verify") {
        throw ConfigError("unknown subcommand '" + command + "'");
    }
    if (all || command == "simulate") run_simulate(s, dir, overwrite);
    if (all || command == "solve-spde") run_solve_spde(s, dir, overwrite);
    if (all || command == "bs-closed-form") run_bs_closed_form(s, dir, overwrite);
    if (all || command == "verify") {
        const auto reports = run_verifications(s, log);
        emit_report(reports, dir, overwrite);
        write_summary(log, reports);
        for (const auto& r : reports)
            if (!r.as_expected()) return 1;
    }
    return 0;
}

}  // namespace fwdperf
