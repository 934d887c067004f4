#include "fwdperf/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

namespace fwdperf {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void fail(int line, const std::string& what) {
    throw ConfigError("line " + std::to_string(line) + ": " + what);
}

// Strips a trailing comment that is not inside a string.
std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) quoted = !quoted;
        if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
}

std::string parse_string(const std::string& s, int line) {
    if (s.size() < 2 || s.front() != '"' || s.back() != '"') fail(line, "malformed string " + s);
    std::string out;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
        if (s[i] == '\\' && i + 2 < s.size()) {
            ++i;
            out.push_back(s[i] == 'n' ? '\n' : s[i]);
        } else {
            out.push_back(s[i]);
        }
    }
    return out;
}

double parse_number(const std::string& s, int line) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end) fail(line, "expected a number, got '" + s + "'");
    return v;
}

std::variant<double, std::string> parse_scalar_item(const std::string& s, int line) {
    if (!s.empty() && s.front() == '"') return parse_string(s, line);
    return parse_number(s, line);
}

ConfigValue parse_value(const std::string& raw, int line) {
    const std::string s = trim(raw);
    if (s.empty()) fail(line, "missing value");
    if (s == "true") return {true};
    if (s == "false") return {false};
    if (s.front() == '"') return {parse_string(s, line)};
    if (s.front() == '[') {
        if (s.back() != ']') fail(line, "unterminated list");
        ConfigValue::List list;
        std::string item;
        bool quoted = false;
        for (std::size_t i = 1; i + 1 < s.size(); ++i) {
            const char c = s[i];
            if (c == '"') quoted = !quoted;
            if (c == ',' && !quoted) {
                const auto t = trim(item);
                if (!t.empty()) list.push_back(parse_scalar_item(t, line));
                item.clear();
            } else {
                item.push_back(c);
            }
        }
        const auto t = trim(item);
        if (!t.empty()) list.push_back(parse_scalar_item(t, line));
        return {list};
    }
    return {parse_number(s, line)};
}

std::string format_number(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out.push_back('\\');
        out.push_back(c);
    }
    return out + "\"";
}

}  // namespace

std::vector<ConfigEntry> parse_key_values(const std::string& text) {
    std::vector<ConfigEntry> out;
    std::istringstream is(text);
    std::string raw;
    int line = 0;
    while (std::getline(is, raw)) {
        ++line;
        const std::string s = trim(strip_comment(raw));
        if (s.empty()) continue;
        const auto eq = s.find('=');
        if (eq == std::string::npos) fail(line, "expected 'key = value'");
        const std::string key = trim(s.substr(0, eq));
        if (key.empty()) fail(line, "empty key");
        for (char c : key) {
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-')) {
                fail(line, "invalid character in key '" + key + "'");
            }
        }
        out.push_back({key, parse_value(s.substr(eq + 1), line), line});
    }
    return out;
}

std::string format_value(const ConfigValue& v) {
    struct Visitor {
        std::string operator()(double d) const { return format_number(d); }
        std::string operator()(bool b) const { return b ? "true" : "false"; }
        std::string operator()(const std::string& s) const { return quote(s); }
        std::string operator()(const ConfigValue::List& l) const {
            std::string out = "[";
            for (std::size_t i = 0; i < l.size(); ++i) {
                if (i) out += ", ";
                out += std::holds_alternative<double>(l[i]) ? format_number(std::get<double>(l[i]))
                                                            : quote(std::get<std::string>(l[i]));
            }
            return out + "]";
        }
    };
    return std::visit(Visitor{}, v.v);
}

void Scenario::validate() const {
    auto need = [](bool ok, const std::string& field, const std::string& constraint) {
        if (!ok) throw ConfigError(field + " must satisfy " + constraint);
    };
    try {
        market.validate();
    } catch (const DomainError& e) {
        throw ConfigError(std::string("market: ") + e.what());
    }
    need(std::isfinite(gamma) && gamma != 0.0 && gamma < 1.0, "gamma", "gamma in (-inf,0) U (0,1)");
    need(epsilon > 0.0 && epsilon < 1.0, "epsilon", "epsilon in (0,1)");
    need(u0 > 0.0, "u0", "u0 > 0");
    need(x0 > 0.0, "x0", "x0 > 0");
    need(x_bar > 0.0, "x_bar", "x_bar > 0");
    need(horizon > 0.0, "horizon", "horizon > 0");
    need(dt > 0.0, "dt", "dt > 0");
    grid_steps(horizon, dt);
    need(anchor == "zero" || anchor == "closed-form", "anchor", "anchor in {\"zero\", \"closed-form\"}");
    need(grid_half_width > 0.0, "grid.half_width", "grid.half_width > 0");
    need(grid_points >= 64, "grid.points", "grid.points >= 64");
    need(grid_eta > 1.0, "grid.eta", "grid.eta > 1");
    need(std::abs(std::log(x_bar) - std::log(x0)) < grid_half_width, "x_bar", "log(x_bar) inside the log grid");
    need(paths >= 2, "paths", "paths >= 2");
    need(outer_paths >= 1 && inner_paths >= 2, "outer_paths/inner_paths", "outer_paths >= 1, inner_paths >= 2");
    need(spde_paths >= 1, "spde_paths", "spde_paths >= 1");
    need(spde_tolerance > 0.0, "spde_tolerance", "spde_tolerance > 0");
    for (double c : checkpoints) {
        need(c > 0.0 && c <= horizon, "checkpoints", "every checkpoint in (0, horizon]");
        const double r = c / dt;
        need(std::abs(r - std::round(r)) <= 1e-9 * std::max(1.0, r), "checkpoints", "every checkpoint on the time grid");
    }
    for (const auto& i : injections) {
        const auto e = parse_injection(i);
        need(e.time >= 0.0 && e.time <= horizon, "injections", "injection time in [0, horizon]");
        need(e.value > 0.0, "injections", "injection value > 0");
    }
    const MarketModel m = MarketModel::black_scholes(market);
    for (const auto& d : deviations) strategy_from_label(d, m, gamma);
}

Scenario parse_scenario(const std::string& text) {
    Scenario s;
    for (const auto& e : parse_key_values(text)) {
        auto num = [&]() {
            if (!std::holds_alternative<double>(e.value.v)) fail(e.line, "'" + e.key + "' expects a number");
            return std::get<double>(e.value.v);
        };
        auto count = [&]() {
            const double v = num();
            if (!(v >= 0.0) || v != std::floor(v)) fail(e.line, "'" + e.key + "' expects a non-negative integer");
            return static_cast<std::size_t>(v);
        };
        auto str = [&]() {
            if (!std::holds_alternative<std::string>(e.value.v)) fail(e.line, "'" + e.key + "' expects a string");
            return std::get<std::string>(e.value.v);
        };
        auto list = [&]() {
            if (!std::holds_alternative<ConfigValue::List>(e.value.v)) fail(e.line, "'" + e.key + "' expects a list");
            return std::get<ConfigValue::List>(e.value.v);
        };
        auto numbers = [&]() {
            std::vector<double> out;
            for (const auto& item : list()) {
                if (!std::holds_alternative<double>(item)) fail(e.line, "'" + e.key + "' expects numbers");
                out.push_back(std::get<double>(item));
            }
            return out;
        };
        auto strings = [&]() {
            std::vector<std::string> out;
            for (const auto& item : list()) {
                if (!std::holds_alternative<std::string>(item)) fail(e.line, "'" + e.key + "' expects strings");
                out.push_back(std::get<std::string>(item));
            }
            return out;
        };

        const std::string& k = e.key;
        if (k == "market.mu1") s.market.mu1 = num();
        else if (k == "market.mu2") s.market.mu2 = num();
        else if (k == "market.sigma1") s.market.sigma1 = num();
        else if (k == "market.sigma2") s.market.sigma2 = num();
        else if (k == "market.rho") s.market.rho = num();
        else if (k == "gamma") s.gamma = num();
        else if (k == "epsilon") s.epsilon = num();
        else if (k == "u0") s.u0 = num();
        else if (k == "x0") s.x0 = num();
        else if (k == "x_bar") s.x_bar = num();
        else if (k == "horizon") s.horizon = num();
        else if (k == "dt") s.dt = num();
        else if (k == "anchor") s.anchor = str();
        else if (k == "grid.half_width") s.grid_half_width = num();
        else if (k == "grid.points") s.grid_points = count();
        else if (k == "grid.eta") s.grid_eta = num();
        else if (k == "paths") s.paths = count();
        else if (k == "outer_paths") s.outer_paths = count();
        else if (k == "inner_paths") s.inner_paths = count();
        else if (k == "spde_paths") s.spde_paths = count();
        else if (k == "spde_tolerance") s.spde_tolerance = num();
        else if (k == "checkpoints") s.checkpoints = numbers();
        else if (k == "deviations") s.deviations = strings();
        else if (k == "injections") s.injections = strings();
        else if (k == "fake_contract") {
            if (!std::holds_alternative<bool>(e.value.v)) fail(e.line, "'fake_contract' expects true or false");
            s.fake_contract = std::get<bool>(e.value.v);
        } else if (k == "seed") s.seed = static_cast<std::uint64_t>(count());
        else if (k == "out") s.out = str();
        else if (k == "exec") {
            const auto v = str();
            if (v == "serial") s.exec = Exec::serial;
            else if (v == "parallel") s.exec = Exec::parallel;
            else fail(e.line, "'exec' must be \"serial\" or \"parallel\"");
        } else {
            fail(e.line, "unknown key '" + k + "'");
        }
    }
    s.validate();
    return s;
}

Scenario load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_scenario(ss.str());
}

void write_scenario(std::ostream& os, const Scenario& s) {
    auto line = [&](const char* key, ConfigValue v) { os << key << " = " << format_value(v) << '\n'; };
    auto strings = [](const std::vector<std::string>& xs) {
        ConfigValue::List l(xs.begin(), xs.end());
        return ConfigValue{l};
    };
    ConfigValue::List cps(s.checkpoints.begin(), s.checkpoints.end());
    line("market.mu1", {s.market.mu1});
    line("market.mu2", {s.market.mu2});
    line("market.sigma1", {s.market.sigma1});
    line("market.sigma2", {s.market.sigma2});
    line("market.rho", {s.market.rho});
    line("gamma", {s.gamma});
    line("epsilon", {s.epsilon});
    line("u0", {s.u0});
    line("x0", {s.x0});
    line("x_bar", {s.x_bar});
    line("horizon", {s.horizon});
    line("dt", {s.dt});
    line("anchor", {s.anchor});
    line("grid.half_width", {s.grid_half_width});
    line("grid.points", {static_cast<double>(s.grid_points)});
    line("grid.eta", {s.grid_eta});
    line("paths", {static_cast<double>(s.paths)});
    line("outer_paths", {static_cast<double>(s.outer_paths)});
    line("inner_paths", {static_cast<double>(s.inner_paths)});
    line("spde_paths", {static_cast<double>(s.spde_paths)});
    line("spde_tolerance", {s.spde_tolerance});
    line("checkpoints", {cps});
    line("deviations", strings(s.deviations));
    line("injections", strings(s.injections));
    line("fake_contract", {s.fake_contract});
    line("seed", {static_cast<double>(s.seed)});
    line("out", {s.out});
    line("exec", {std::string(s.exec == Exec::serial ? "serial" : "parallel")});
}

FeedbackStrategy strategy_from_label(const std::string& label, const MarketModel& market, double gamma) {
    if (label == "merton") return merton_strategy(market, gamma);
    if (label == "asset2-deviation") return asset2_deviation(market, gamma);
    if (label == "zero") return zero_strategy(market.num_assets());
    const std::string prefix = "scaled-merton ";
    if (label.rfind(prefix, 0) == 0) {
        const std::string arg = trim(label.substr(prefix.size()));
        double kappa = 0.0;
        auto [p, ec] = std::from_chars(arg.data(), arg.data() + arg.size(), kappa);
        if (ec != std::errc() || p != arg.data() + arg.size()) {
            throw ConfigError("strategy label '" + label + "': scale is not a number");
        }
        return scaled_merton(market, gamma, kappa);
    }
    throw ConfigError("unknown strategy label '" + label + "'");
}

InjectionEvent parse_injection(const std::string& spec) {
    std::istringstream is(spec);
    std::string kind;
    InjectionEvent e;
    if (!(is >> kind >> e.time >> e.value) || !(is >> std::ws).eof()) {
        throw ConfigError("injection '" + spec + "' must read '<multiplier|absolute> <time> <value>'");
    }
    if (kind == "multiplier") e.kind = InjectionEvent::Kind::multiplier;
    else if (kind == "absolute") e.kind = InjectionEvent::Kind::absolute;
    else throw ConfigError("injection kind must be multiplier or absolute, got '" + kind + "'");
    return e;
}

}  // namespace fwdperf
