#include "fwdperf/report.hpp"

#include <cmath>
#include <fstream>
#include <ostream>

namespace fwdperf {

namespace {

void csv_field(std::ostream& os, const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        os << s;
        return;
    }
    os << '"';
    for (char c : s) {
        if (c == '"') os << '"';
        os << c;
    }
    os << '"';
}

}  // namespace

void write_report_csv(std::ostream& os, const std::vector<VerificationReport>& reports) {
    os << "test,arm,estimate,stderr,target,tol,pass\n";
    const auto old = os.precision(17);
    for (const auto& rep : reports) {
        for (const auto& r : rep.rows) {
            csv_field(os, rep.test);
            os << ',';
            csv_field(os, r.arm);
            os << ',' << r.estimate << ',' << r.se << ',' << r.target << ',' << r.tol << ','
               << (r.pass && !rep.invalid ? "true" : "false") << '\n';
        }
    }
    os.precision(old);
}

void write_summary(std::ostream& os, const std::vector<VerificationReport>& reports) {
    os << "Sufficient conditions for contract optimality, checked by Monte Carlo against a finite\n"
          "deviation family. This does not certify optimality over all admissible contracts.\n\n";
    const auto old = os.precision(6);
    std::size_t failed = 0;
    for (const auto& rep : reports) {
        const bool ok = rep.pass();
        if (!rep.as_expected()) ++failed;
        os << rep.test << ": " << (rep.invalid ? "INVALID" : ok ? "PASS" : "FAIL");
        if (rep.expected_failure) os << (ok ? " (a failure was expected)" : " (expected)");
        os << '\n';
        os << "  seed " << rep.seed << ", ensemble " << rep.ensemble_size << ", floored " << rep.floored << " ("
           << 100.0 * rep.floored_fraction() << "%), runtime " << rep.runtime_seconds << " s\n";
        if (rep.invalid) os << "  invalid: " << rep.invalid_reason << '\n';
        for (const auto& n : rep.notes) os << "  rule: " << n << '\n';
        for (const auto& r : rep.rows) {
            os << "  " << rep.test << ": " << r.arm << '=' << r.estimate;
            if (!std::isinf(r.estimate)) os << "±" << r.se;
            os << " (target " << r.target << ", tol " << r.tol << "), " << (r.pass ? "pass" : "fail");
            if (!r.note.empty()) os << " [" << r.note << ']';
            os << '\n';
        }
        os << '\n';
    }
    os << (failed ? std::to_string(failed) + " of " + std::to_string(reports.size()) + " tests did not behave as expected\n"
                  : "all " + std::to_string(reports.size()) + " tests behaved as expected\n");
    os.precision(old);
}

std::ofstream open_output(const std::filesystem::path& dir, const std::string& name, bool overwrite) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    const auto path = dir / name;
    if (!overwrite && std::filesystem::exists(path)) {
        throw IoError(path.string() + " exists; pass --force-overwrite to replace it");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

void emit_report(const std::vector<VerificationReport>& reports, const std::filesystem::path& dir, bool overwrite) {
    auto csv = open_output(dir, "report.csv", overwrite);
    write_report_csv(csv, reports);
    auto summary = open_output(dir, "summary.txt", overwrite);
    write_summary(summary, reports);
    if (!csv || !summary) throw IoError("write failed in " + dir.string());
}

}  // namespace fwdperf
