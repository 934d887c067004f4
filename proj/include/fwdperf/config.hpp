#pragma once

#include "fwdperf/market.hpp"
#include "fwdperf/spde.hpp"
#include "fwdperf/strategy.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

namespace fwdperf {

// Flat `key = value` text, a subset of TOML: bare or dotted keys, numbers,
// booleans, double-quoted strings, one-line lists, `#` comments.
struct ConfigValue {
    using List = std::vector<std::variant<double, std::string>>;
    std::variant<double, bool, std::string, List> v;
};

struct ConfigEntry {
    std::string key;
    ConfigValue value;
    int line = 0;
};

std::vector<ConfigEntry> parse_key_values(const std::string& text);

std::string format_value(const ConfigValue& v);

struct Scenario {
    BlackScholes2 market;
    double gamma = 0.5;
    double epsilon = 0.5;
    double u0 = 1.0;
    double x0 = 1.0;
    double x_bar = 1.0;
    double horizon = 1.0;
    double dt = 1e-3;
    std::string anchor = "zero";  // zero | closed-form

    double grid_half_width = 6.0;
    std::size_t grid_points = 512;
    double grid_eta = 1.5;

    std::size_t paths = 100000;
    std::size_t outer_paths = 1000;
    std::size_t inner_paths = 1000;
    std::size_t spde_paths = 32;
    std::vector<double> checkpoints{0.25, 0.5, 1.0};
    std::vector<std::string> deviations{"scaled-merton 0.5", "scaled-merton 1.5", "scaled-merton 2",
                                        "asset2-deviation", "zero"};
    // "<multiplier|absolute> <time> <value>"
    std::vector<std::string> injections{"multiplier 0.5 2"};
    bool fake_contract = true;
    double spde_tolerance = 1e-3;

    std::uint64_t seed = 7;
    std::string out = "out";
    Exec exec = Exec::parallel;

    // Domain checks; throws ConfigError naming the field and constraint.
    void validate() const;

    LogGrid grid() const { return LogGrid::around(x0, grid_points, grid_half_width, grid_eta); }
};

// Unknown keys raise ConfigError naming the key and line.
Scenario parse_scenario(const std::string& text);
Scenario load_scenario(const std::string& path);

// Every field, defaults included, in the same schema.
void write_scenario(std::ostream& os, const Scenario& s);

FeedbackStrategy strategy_from_label(const std::string& label, const MarketModel& market, double gamma);
InjectionEvent parse_injection(const std::string& spec);

}  // namespace fwdperf
