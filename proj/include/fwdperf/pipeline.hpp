#pragma once

#include "fwdperf/config.hpp"
#include "fwdperf/verification.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace fwdperf {

// path.csv, wealth.csv (Merton with the configured injections), admissibility.txt
void run_simulate(const Scenario& s, const std::filesystem::path& dir, bool overwrite);

// field_<step>.csv at t = 0, the checkpoints and the horizon; strategy.csv
// with the recovered proportions at the horizon.
void run_solve_spde(const Scenario& s, const std::filesystem::path& dir, bool overwrite);

// closed_form.txt (constants and contract description), payout.csv on path 0.
void run_bs_closed_form(const Scenario& s, const std::filesystem::path& dir, bool overwrite);

std::vector<VerificationReport> run_verifications(const Scenario& s, std::ostream& log);

// Dispatches simulate | solve-spde | bs-closed-form | verify | all, echoes the
// effective configuration to dir/config.toml, and returns the exit status:
// 0 iff every requested verification behaved as expected.
int run_scenario(const Scenario& s, const std::string& command, bool overwrite, std::ostream& log);

}  // namespace fwdperf
