#pragma once

#include "fwdperf/verification.hpp"

#include <filesystem>
#include <iosfwd>
#include <vector>

namespace fwdperf {

// CSV columns, in this order: test,arm,estimate,stderr,target,tol,pass
void write_report_csv(std::ostream& os, const std::vector<VerificationReport>& reports);

// Human-readable summary. Runtimes appear here only, so the CSV stays
// byte-identical between runs with the same seed.
void write_summary(std::ostream& os, const std::vector<VerificationReport>& reports);

// Writes report.csv and summary.txt into dir. Refuses to replace existing
// files unless overwrite is set.
void emit_report(const std::vector<VerificationReport>& reports, const std::filesystem::path& dir, bool overwrite);

// Opens dir/name for writing under the same overwrite rule.
std::ofstream open_output(const std::filesystem::path& dir, const std::string& name, bool overwrite);

}  // namespace fwdperf
