#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fwdperf {

// Execution policy for the data-parallel kernels. `serial` is the reference
// path kept for testing; `parallel` dispatches through OpenMP. Both produce
// bitwise-identical results because every work item writes its own slot and
// reductions happen afterwards in index order.
enum class Exec { serial, parallel };

inline int worker_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// Calls body(i, worker) for i in [0, n). `worker` is in [0, worker_count())
// and lets callers keep per-thread scratch buffers.
template <class Body>
void for_each_index(std::size_t n, Exec exec, Body&& body) {
    const auto count = static_cast<std::ptrdiff_t>(n);
    if (exec == Exec::parallel) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 64)
        for (std::ptrdiff_t i = 0; i < count; ++i) {
            body(static_cast<std::size_t>(i), omp_get_thread_num());
        }
        return;
#endif
    }
    for (std::ptrdiff_t i = 0; i < count; ++i) {
        body(static_cast<std::size_t>(i), 0);
    }
}

struct Estimate {
    double mean = 0.0;
    double se = 0.0;
    std::size_t n = 0;
};

// Mean and standard error of the mean, reduced in index order.
inline Estimate mean_and_se(std::span<const double> xs) {
    Estimate e;
    e.n = xs.size();
    if (xs.empty()) return e;
    double sum = 0.0;
    for (double x : xs) sum += x;
    e.mean = sum / static_cast<double>(xs.size());
    if (xs.size() < 2) return e;
    double ss = 0.0;
    for (double x : xs) ss += (x - e.mean) * (x - e.mean);
    const double var = ss / static_cast<double>(xs.size() - 1);
    e.se = std::sqrt(var / static_cast<double>(xs.size()));
    return e;
}

// Same, skipping entries whose mask is false.
inline Estimate mean_and_se(std::span<const double> xs, std::span<const char> keep) {
    std::vector<double> kept;
    kept.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (keep[i]) kept.push_back(xs[i]);
    }
    return mean_and_se(kept);
}

}  // namespace fwdperf
