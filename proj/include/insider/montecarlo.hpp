#pragma once

// Monte Carlo plumbing: per-path work fanned out over threads, results stored
// by path index and reduced sequentially so the answer never depends on the
// thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <mutex>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

namespace insider {

struct PerformanceEstimate {
    double mean = 0.0;
    double stderr = 0.0;
    std::size_t n_paths = 0;
    std::size_t n_rejected = 0;

    double t_statistic() const { return stderr > 0.0 ? mean / stderr : (mean == 0.0 ? 0.0 : INFINITY); }
    double rejection_rate() const {
        const std::size_t total = n_paths + n_rejected;
        return total ? static_cast<double>(n_rejected) / static_cast<double>(total) : 0.0;
    }
};

/// Mean and standard error (sample std / sqrt(n)); NaN entries count as rejected.
inline PerformanceEstimate summarize(std::span<const double> samples) {
    PerformanceEstimate e;
    double sum = 0.0;
    for (double v : samples) {
        if (std::isnan(v)) {
            ++e.n_rejected;
            continue;
        }
        sum += v;
        ++e.n_paths;
    }
    if (e.n_paths == 0) return e;
    e.mean = sum / static_cast<double>(e.n_paths);
    if (e.n_paths < 2) return e;
    double ss = 0.0;
    for (double v : samples)
        if (!std::isnan(v)) ss += (v - e.mean) * (v - e.mean);
    e.stderr = std::sqrt(ss / static_cast<double>(e.n_paths - 1) / static_cast<double>(e.n_paths));
    return e;
}

/// a_i - b_i, NaN where either side is rejected.
inline std::vector<double> paired_difference(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("paired_difference: size mismatch");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return d;
}

inline std::size_t resolve_threads(std::size_t requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

/// out[i] = f(i) for i < n, computed on `threads` workers (0 = hardware concurrency).
template <class T, class F>
std::vector<T> parallel_map(std::size_t n, std::size_t threads, F&& f) {
    std::vector<T> out(n);
    const std::size_t workers = std::min(resolve_threads(threads), std::max<std::size_t>(n, 1));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) out[i] = f(i);
        return out;
    }
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) out[i] = f(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    return out;
}

}  // namespace insider
