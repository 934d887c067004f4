#include "fwdperf/market.hpp"

#include "fwdperf/rng.hpp"

#include <cmath>
#include <ostream>
#include <sstream>
#include <string>

namespace fwdperf {

void BlackScholes2::validate() const {
    if (!(sigma1 > 0.0) || !(sigma2 > 0.0)) {
        throw DomainError("Black-Scholes volatilities must be positive");
    }
    if (!(std::abs(rho) < 1.0)) {
        throw DomainError("Black-Scholes correlation must lie in (-1, 1)");
    }
    if (!std::isfinite(mu1) || !std::isfinite(mu2)) {
        throw DomainError("Black-Scholes drifts must be finite");
    }
}

SmallMat BlackScholes2::sigma_matrix() const {
    SmallMat s(2, 2);
    s << sigma1, sigma2 * rho,
         0.0, sigma2 * std::sqrt(1.0 - rho * rho);
    return s;
}

SmallVec BlackScholes2::drift() const {
    SmallVec m(2);
    m << mu1, mu2;
    return m;
}

SmallVec BlackScholes2::lambda_closed_form() const {
    SmallVec l(2);
    l << mu1 / sigma1, (mu2 - sigma2 * rho * mu1 / sigma1) / (sigma2 * std::sqrt(1.0 - rho * rho));
    return l;
}

SmallVec market_price_of_risk(const SmallMat& sigma, const SmallVec& mu, std::size_t time_index) {
    if (sigma.cols() != mu.size()) {
        throw DomainError("market_price_of_risk: sigma has " + std::to_string(sigma.cols()) +
                          " columns but mu has " + std::to_string(mu.size()) + " entries");
    }
    if (sigma.rows() < sigma.cols()) {
        throw DomainError("market_price_of_risk: need d >= k");
    }
    Eigen::JacobiSVD<SmallMat> svd(sigma);
    const auto& sv = svd.singularValues();
    const double smax = sv.size() ? sv.maxCoeff() : 0.0;
    const double smin = sv.size() ? sv.minCoeff() : 0.0;
    if (!(smax > 0.0) || !(smin > 1e-10 * smax)) {
        std::ostringstream msg;
        msg << "volatility matrix is rank deficient at time index " << time_index << " (singular values "
            << smin << " / " << smax << ")";
        throw DegeneracyError(msg.str(), time_index);
    }
    const SmallMat gram = sigma.transpose() * sigma;
    const SmallVec y = gram.ldlt().solve(mu);
    return sigma * y;
}

MarketModel MarketModel::black_scholes(const BlackScholes2& p) {
    p.validate();
    MarketModel m = constant(p.drift(), p.sigma_matrix());
    m.bs_ = p;
    return m;
}

MarketModel MarketModel::constant(const SmallVec& mu, const SmallMat& sigma) {
    MarketModel m;
    m.k_ = static_cast<int>(mu.size());
    m.d_ = static_cast<int>(sigma.rows());
    if (m.k_ < 1 || m.d_ > kMaxDim || m.d_ < m.k_ || sigma.cols() != mu.size()) {
        throw DomainError("constant market: inconsistent dimensions");
    }
    Coefficients c{mu, sigma, market_price_of_risk(sigma, mu, 0)};
    m.constant_ = c;
    m.drift_ = [mu](const PathView&) { return mu; };
    m.vol_ = [sigma](const PathView&) { return sigma; };
    return m;
}

MarketModel MarketModel::general(int num_assets, int num_factors, DriftFn drift, VolFn vol) {
    if (num_assets < 1 || num_factors < num_assets || num_factors > kMaxDim) {
        throw DomainError("general market: need 1 <= k <= d <= " + std::to_string(kMaxDim));
    }
    MarketModel m;
    m.k_ = num_assets;
    m.d_ = num_factors;
    m.drift_ = std::move(drift);
    m.vol_ = std::move(vol);
    return m;
}

Coefficients MarketModel::at(const PathView& view) const {
    if (constant_) return *constant_;
    Coefficients c;
    c.mu = drift_(view);
    c.sigma = vol_(view);
    if (c.mu.size() != k_ || c.sigma.rows() != d_ || c.sigma.cols() != k_) {
        throw CoefficientError("market callback returned coefficients of the wrong shape at step " +
                               std::to_string(view.step));
    }
    c.lambda = market_price_of_risk(c.sigma, c.mu, view.step);
    return c;
}

std::size_t grid_steps(double T, double dt) {
    if (!(T >= 0.0) || !std::isfinite(T)) throw ConfigError("horizon must be a finite non-negative number");
    if (!(dt > 0.0)) throw ConfigError("time step must be positive");
    if (T == 0.0) return 0;
    const double ratio = T / dt;
    const double n = std::round(ratio);
    if (n < 1.0 || std::abs(n * dt - T) > 1e-9 * T) {
        std::ostringstream msg;
        msg << "time step " << dt << " does not divide horizon " << T;
        throw ConfigError(msg.str());
    }
    return static_cast<std::size_t>(n);
}

void BrownianPath::rebuild_values() {
    const auto d = static_cast<std::size_t>(dims_);
    values_.assign((steps_ + 1) * d, 0.0);
    for (std::size_t i = 0; i < steps_; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            values_[(i + 1) * d + j] = values_[i * d + j] + increments_[i * d + j];
        }
    }
}

BrownianPath BrownianPath::from_increments(int d, double dt, std::vector<double> increments, std::uint64_t seed,
                                           std::uint64_t index) {
    if (d < 1 || increments.size() % static_cast<std::size_t>(d) != 0) {
        throw DomainError("from_increments: size is not a multiple of the dimension");
    }
    BrownianPath p;
    p.dims_ = d;
    p.dt_ = dt;
    p.steps_ = increments.size() / static_cast<std::size_t>(d);
    p.seed_ = seed;
    p.index_ = index;
    p.increments_ = std::move(increments);
    p.rebuild_values();
    return p;
}

void BrownianPath::assign_increments(int d, double dt, std::span<const double> increments, std::uint64_t seed,
                                     std::uint64_t index) {
    if (d < 1 || increments.size() % static_cast<std::size_t>(d) != 0) {
        throw DomainError("assign_increments: size is not a multiple of the dimension");
    }
    dims_ = d;
    dt_ = dt;
    steps_ = increments.size() / static_cast<std::size_t>(d);
    seed_ = seed;
    index_ = index;
    increments_.assign(increments.begin(), increments.end());
    rebuild_values();
}

void simulate_brownian_into(BrownianPath& out, int d, double T, double dt, std::uint64_t master_seed,
                            std::uint64_t path_index) {
    if (d < 1 || d > kMaxDim) throw ConfigError("Brownian dimension must be in [1, " + std::to_string(kMaxDim) + "]");
    const std::size_t n = grid_steps(T, dt);
    out.dims_ = d;
    out.steps_ = n;
    out.dt_ = dt;
    out.seed_ = master_seed;
    out.index_ = path_index;
    out.increments_.resize(n * static_cast<std::size_t>(d));
    NormalSource normal(Pcg32(master_seed, path_index));
    const double sqdt = std::sqrt(dt);
    for (double& x : out.increments_) x = sqdt * normal();
    out.rebuild_values();
}

BrownianPath simulate_brownian(int d, double T, double dt, std::uint64_t master_seed, std::uint64_t path_index) {
    BrownianPath p;
    simulate_brownian_into(p, d, T, dt, master_seed, path_index);
    return p;
}

double AssetPath::ratio(std::size_t i, int j) const { return std::exp(log_ratio(i, j)); }

AssetPath asset_path(const BrownianPath& path, const MarketModel& market) {
    const int k = market.num_assets();
    const int d = market.num_factors();
    if (path.dims() != d) throw DomainError("asset_path: path dimension does not match the market");
    AssetPath out(k, path.steps());
    for (std::size_t i = 0; i < path.steps(); ++i) {
        const Coefficients c = market.at(PathView{&path, i});
        const auto dw = path.increment(i);
        for (int j = 0; j < k; ++j) {
            const double col_norm2 = c.sigma.col(j).squaredNorm();
            double diffusion = 0.0;
            for (int r = 0; r < d; ++r) diffusion += c.sigma(r, j) * dw[static_cast<std::size_t>(r)];
            out.log_ratio(i + 1, j) = out.log_ratio(i, j) + (c.mu(j) - 0.5 * col_norm2) * path.dt() + diffusion;
        }
    }
    return out;
}

void write_path_csv(std::ostream& os, const BrownianPath& path, const AssetPath& assets, double s0) {
    os << "t";
    for (int j = 0; j < path.dims(); ++j) os << ",W" << (j + 1);
    for (int j = 0; j < assets.assets(); ++j) os << ",S" << (j + 1);
    os << '\n';
    const auto old_prec = os.precision(17);
    for (std::size_t i = 0; i <= path.steps(); ++i) {
        os << path.time(i);
        for (double w : path.value(i)) os << ',' << w;
        for (int j = 0; j < assets.assets(); ++j) os << ',' << s0 * assets.ratio(i, j);
        os << '\n';
    }
    os.precision(old_prec);
}

}  // namespace fwdperf
