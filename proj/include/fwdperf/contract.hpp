#pragma once

#include "fwdperf/market.hpp"
#include "fwdperf/spde.hpp"

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>

namespace fwdperf {

// What a payout may depend on besides terminal wealth.
struct MarketState {
    double t = 0.0;
    std::span<const double> W;            // W_T
    std::span<const double> asset_ratio;  // S_T / S_0 per asset
    const UtilityField* field = nullptr;  // per-path terminal utility, if any
};

enum class ContractKind { closed_form, spde_built, fake, custom };

const char* to_string(ContractKind kind);

class Contract {
public:
    using Payout = std::function<double(double x, const MarketState&)>;

    Contract(ContractKind kind, double u0, Payout payout, std::map<std::string, std::string> params = {});

    ContractKind kind() const { return kind_; }
    double u0() const { return u0_; }
    const std::map<std::string, std::string>& params() const { return params_; }

    double operator()(double x, const MarketState& state) const { return payout_(x, state); }

    // Unset until certify_limited_liability has been run.
    std::optional<bool> limited_liability() const { return limited_liability_; }
    void set_limited_liability(bool ok) { limited_liability_ = ok; }

    Contract scaled(double factor) const;

private:
    ContractKind kind_;
    double u0_;
    Payout payout_;
    std::map<std::string, std::string> params_;
    std::optional<bool> limited_liability_;
};

// Closed-form Black-Scholes family with constant Merton target.
struct BSClosedForm {
    BlackScholes2 market;
    double gamma = 0.5;
    double epsilon = 0.5;
    double u0 = 1.0;
    double X0 = 1.0;
    double T = 1.0;

    double lambda1 = 0.0;
    double lambda2 = 0.0;
    double merton = 0.0;  // pi*1 / x
    double A = 0.0;
    double B = 0.0;

    // Coefficients of W1, W2 in -log Q.
    double loading1() const { return lambda1 - epsilon * market.sigma1 * merton; }
    double loading2() const { return lambda2; }

    double Q(double t, double W1, double W2) const;
    double U(double x, double q) const;
    double V(double x, double q) const;
    double R(double x, double q) const;
    double payout(double x, double q_T) const;  // u0 (x / X0)^(1-eps) Q_T

    // Exponents of Q-hat as a function of the asset returns:
    // Q = exp(c t) (S1/S1_0)^e1 (S2/S2_0)^e2.
    double qhat_time_rate() const;
    double qhat_exponent1() const;
    double qhat_exponent2() const;

    Contract contract() const;
};

BSClosedForm bs_closed_form(const BlackScholes2& market, double gamma, double epsilon, double u0, double X0,
                            double T = 1.0);

// Anchor volatility -(loading) Q x_bar^(1-eps) / (eps (1 - eps)), with Q read
// off the numerical density at the anchor as R x_bar^(1+eps).
AnchorVolatility closed_form_anchor(const BSClosedForm& cf);
// U_0(x_bar) of the closed form.
double closed_form_zeta0(const BSClosedForm& cf, double x_bar);

double q_from_returns(double t, double s1_ratio, double s2_ratio, const BSClosedForm& cf);

// C(x) = U_T(x) u0 / U_0(X0) where U_T is read from state.field.
Contract contract_from_U(double U0_at_X0, double u0);
// Same with a fixed terminal field (deterministic contract).
Contract contract_from_U(std::function<double(double)> U_T, double U0_at_X0, double u0);

Contract normalize_contract(const Contract& raw, double estimated_mean, double u0);

// Merton value function (x^gamma / gamma) exp((T - t) lambda1^2 gamma / (2 (1 - gamma))).
double bs_value_function(double t, double x, double T, double lambda1, double gamma);

// Pays u0 iff |x - target| <= rel_tol * target.
using TargetRule = std::function<double(const MarketState&)>;
Contract fake_contract(TargetRule target, double u0, double rel_tol = 1e-8);

// Minimum payout over the given (x, state) samples; records the flag.
double certify_limited_liability(Contract& c, std::span<const double> xs, std::span<const MarketState> states);

// Key-value description:
//   type = "closed-form"
//   u0 = 1
//   <param> = <value>   (sorted by key)
std::string describe(const Contract& c);

// Rebuilds a closed-form contract from its description.
Contract parse_closed_form_description(const std::string& text);

// Payout table over an x-grid: header "x,payout".
void write_payout_csv(std::ostream& os, const Contract& c, std::span<const double> xs, const MarketState& state);

}  // namespace fwdperf
