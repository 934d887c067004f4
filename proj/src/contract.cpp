#include "fwdperf/contract.hpp"

#include "fwdperf/config.hpp"
#include "fwdperf/strategy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

namespace fwdperf {

const char* to_string(ContractKind kind) {
    switch (kind) {
        case ContractKind::closed_form: return "closed-form";
        case ContractKind::spde_built: return "spde-built";
        case ContractKind::fake: return "fake";
        case ContractKind::custom: return "custom";
    }
    return "custom";
}

Contract::Contract(ContractKind kind, double u0, Payout payout, std::map<std::string, std::string> params)
    : kind_(kind), u0_(u0), payout_(std::move(payout)), params_(std::move(params)) {
    if (!(u0 > 0.0)) throw DomainError("participation level u0 must be positive");
}

Contract Contract::scaled(double factor) const {
    Contract c = *this;
    c.payout_ = [p = payout_, factor](double x, const MarketState& s) { return factor * p(x, s); };
    if (factor < 0.0) c.limited_liability_.reset();
    return c;
}

namespace {

std::string num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

BSClosedForm bs_closed_form(const BlackScholes2& market, double gamma, double epsilon, double u0, double X0, double T) {
    market.validate();
    validate_gamma(gamma);
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw DomainError("epsilon must lie in (0,1)");
    if (!(X0 > 0.0)) throw DomainError("X0 must be positive");
    if (!(u0 > 0.0)) throw DomainError("u0 must be positive");
    if (!(T >= 0.0)) throw DomainError("horizon must be non-negative");
    BSClosedForm cf;
    cf.market = market;
    cf.gamma = gamma;
    cf.epsilon = epsilon;
    cf.u0 = u0;
    cf.X0 = X0;
    cf.T = T;
    const SmallVec lambda = market.lambda_closed_form();
    cf.lambda1 = lambda(0);
    cf.lambda2 = lambda(1);
    cf.merton = cf.lambda1 / (market.sigma1 * (1.0 - gamma));
    const double sp = market.sigma1 * cf.merton;
    cf.A = (2.0 * cf.lambda1 * sp - sp * sp) / 2.0;
    cf.B = (cf.lambda1 * cf.lambda1 + cf.lambda2 * cf.lambda2) / 2.0;
    return cf;
}

double BSClosedForm::Q(double t, double W1, double W2) const {
    return std::exp(-(B - epsilon * A) * t - loading1() * W1 - loading2() * W2);
}

double BSClosedForm::U(double x, double q) const {
    return q * std::pow(x, 1.0 - epsilon) / (epsilon * (1.0 - epsilon));
}

double BSClosedForm::V(double x, double q) const { return q * std::pow(x, -epsilon) / epsilon; }

double BSClosedForm::R(double x, double q) const { return q * std::pow(x, -1.0 - epsilon); }

double BSClosedForm::payout(double x, double q_T) const { return u0 * std::pow(x / X0, 1.0 - epsilon) * q_T; }

double BSClosedForm::qhat_time_rate() const {
    const double s1 = market.sigma1, s2 = market.sigma2, rho = market.rho;
    const double r = std::sqrt(1.0 - rho * rho);
    return 0.5 * (lambda1 * lambda1 + lambda2 * lambda2) - lambda1 * s1 / 2.0 +
           epsilon * merton * s1 * s1 / 2.0 * (1.0 - merton) - lambda2 * (s2 - s1 * rho) / (2.0 * r);
}

double BSClosedForm::qhat_exponent1() const {
    const double r = std::sqrt(1.0 - market.rho * market.rho);
    return epsilon * merton + market.rho * lambda2 / (market.sigma1 * r) - lambda1 / market.sigma1;
}

double BSClosedForm::qhat_exponent2() const {
    const double r = std::sqrt(1.0 - market.rho * market.rho);
    return -lambda2 / (market.sigma2 * r);
}

Contract BSClosedForm::contract() const {
    std::map<std::string, std::string> p{
        {"epsilon", num(epsilon)},        {"gamma", num(gamma)},
        {"x0", num(X0)},                  {"horizon", num(T)},
        {"market.mu1", num(market.mu1)},  {"market.mu2", num(market.mu2)},
        {"market.sigma1", num(market.sigma1)}, {"market.sigma2", num(market.sigma2)},
        {"market.rho", num(market.rho)},
    };
    const BSClosedForm self = *this;
    return Contract(ContractKind::closed_form, u0,
                    [self](double x, const MarketState& s) {
                        double q;
                        if (s.W.size() >= 2) {
                            q = self.Q(s.t, s.W[0], s.W[1]);
                        } else if (s.asset_ratio.size() >= 2) {
                            q = q_from_returns(s.t, s.asset_ratio[0], s.asset_ratio[1], self);
                        } else {
                            throw DomainError("closed-form contract needs W_T or the asset returns");
                        }
                        return self.payout(x, q);
                    },
                    std::move(p));
}

double closed_form_zeta0(const BSClosedForm& cf, double x_bar) { return cf.U(x_bar, 1.0); }

AnchorVolatility closed_form_anchor(const BSClosedForm& cf) {
    const double e = cf.epsilon;
    const double l1 = cf.loading1(), l2 = cf.loading2();
    return [e, l1, l2](const AnchorState& s) -> SmallVec {
        const double q = s.R_at_anchor * std::pow(s.x_bar, 1.0 + e);
        const double u = q * std::pow(s.x_bar, 1.0 - e) / (e * (1.0 - e));
        SmallVec a(2);
        a << -l1 * u, -l2 * u;
        return a;
    };
}

double q_from_returns(double t, double s1_ratio, double s2_ratio, const BSClosedForm& cf) {
    if (!(s1_ratio > 0.0) || !(s2_ratio > 0.0)) throw DomainError("asset return ratios must be positive");
    return std::exp(cf.qhat_time_rate() * t + cf.qhat_exponent1() * std::log(s1_ratio) +
                    cf.qhat_exponent2() * std::log(s2_ratio));
}

Contract contract_from_U(double U0_at_X0, double u0) {
    if (!(U0_at_X0 > 0.0)) throw NormalizationError("U_0(X_0) must be positive to normalise the contract");
    const double scale = u0 / U0_at_X0;
    return Contract(ContractKind::spde_built, u0,
                    [scale](double x, const MarketState& s) {
                        if (!s.field) throw DomainError("spde-built contract needs the terminal utility field");
                        return scale * s.field->U(s.field->terminal(), x);
                    },
                    {{"scale", num(scale)}});
}

Contract contract_from_U(std::function<double(double)> U_T, double U0_at_X0, double u0) {
    if (!(U0_at_X0 > 0.0)) throw NormalizationError("U_0(X_0) must be positive to normalise the contract");
    const double scale = u0 / U0_at_X0;
    return Contract(ContractKind::spde_built, u0,
                    [scale, U_T = std::move(U_T)](double x, const MarketState&) { return scale * U_T(x); },
                    {{"scale", num(scale)}});
}

Contract normalize_contract(const Contract& raw, double estimated_mean, double u0) {
    if (!(estimated_mean > 0.0)) throw NormalizationError("estimated mean payout must be positive to normalise");
    const double factor = u0 / estimated_mean;
    Contract c = raw.scaled(factor);
    auto params = raw.params();
    params["normalization"] = num(factor);
    return Contract(raw.kind(), u0, [c](double x, const MarketState& s) { return c(x, s); }, std::move(params));
}

double bs_value_function(double t, double x, double T, double lambda1, double gamma) {
    validate_gamma(gamma);
    if (!(x > 0.0)) throw DomainError("wealth must be positive");
    if (t > T) throw DomainError("t must not exceed the horizon");
    return std::pow(x, gamma) / gamma * std::exp((T - t) * lambda1 * lambda1 * gamma / (2.0 * (1.0 - gamma)));
}

Contract fake_contract(TargetRule target, double u0, double rel_tol) {
    return Contract(ContractKind::fake, u0,
                    [target = std::move(target), u0, rel_tol](double x, const MarketState& s) {
                        const double t = target(s);
                        return std::abs(x - t) <= rel_tol * std::abs(t) ? u0 : 0.0;
                    },
                    {{"tolerance", num(rel_tol)}});
}

double certify_limited_liability(Contract& c, std::span<const double> xs, std::span<const MarketState> states) {
    double lo = std::numeric_limits<double>::infinity();
    for (const auto& s : states)
        for (double x : xs) lo = std::min(lo, c(x, s));
    c.set_limited_liability(lo >= 0.0);
    return lo;
}

std::string describe(const Contract& c) {
    std::ostringstream os;
    os << "type = \"" << to_string(c.kind()) << "\"\n";
    os << "u0 = " << num(c.u0()) << '\n';
    for (const auto& [k, v] : c.params()) os << k << " = " << v << '\n';
    if (c.limited_liability()) os << "limited_liability = " << (*c.limited_liability() ? "true" : "false") << '\n';
    return os.str();
}

Contract parse_closed_form_description(const std::string& text) {
    BlackScholes2 m;
    double gamma = 0.5, epsilon = 0.5, u0 = 1.0, x0 = 1.0, T = 1.0;
    bool typed = false;
    for (const auto& e : parse_key_values(text)) {
        if (e.key == "type") {
            if (!std::holds_alternative<std::string>(e.value.v) || std::get<std::string>(e.value.v) != "closed-form") {
                throw ConfigError("line " + std::to_string(e.line) + ": only closed-form contracts can be rebuilt");
            }
            typed = true;
            continue;
        }
        if (e.key == "limited_liability") continue;
        if (!std::holds_alternative<double>(e.value.v)) {
            throw ConfigError("line " + std::to_string(e.line) + ": '" + e.key + "' expects a number");
        }
        const double v = std::get<double>(e.value.v);
        if (e.key == "u0") u0 = v;
        else if (e.key == "epsilon") epsilon = v;
        else if (e.key == "gamma") gamma = v;
        else if (e.key == "x0") x0 = v;
        else if (e.key == "horizon") T = v;
        else if (e.key == "market.mu1") m.mu1 = v;
        else if (e.key == "market.mu2") m.mu2 = v;
        else if (e.key == "market.sigma1") m.sigma1 = v;
        else if (e.key == "market.sigma2") m.sigma2 = v;
        else if (e.key == "market.rho") m.rho = v;
        else throw ConfigError("line " + std::to_string(e.line) + ": unknown key '" + e.key + "'");
    }
    if (!typed) throw ConfigError("contract description lacks a type");
    return bs_closed_form(m, gamma, epsilon, u0, x0, T).contract();
}

void write_payout_csv(std::ostream& os, const Contract& c, std::span<const double> xs, const MarketState& state) {
    os << "x,payout\n";
    const auto old = os.precision(17);
    for (double x : xs) os << x << ',' << c(x, state) << '\n';
    os.precision(old);
}

}  // namespace fwdperf
