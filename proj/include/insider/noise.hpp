#pragma once

// Driving noise: time grids, finite-atom Levy measures, seedable Brownian /
// Poisson path bundles and left-endpoint stochastic integrals.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace insider {

class TimeGrid {
public:
    TimeGrid() = default;
    TimeGrid(double t_start, double t_end, std::size_t n_steps)
        : t_start_(t_start), t_end_(t_end), n_steps_(n_steps) {
        if (n_steps == 0) throw std::invalid_argument("TimeGrid: n_steps must be >= 1");
        if (!(t_end > t_start)) throw std::invalid_argument("TimeGrid: t_end must exceed t_start");
    }

    double t_start() const { return t_start_; }
    double t_end() const { return t_end_; }
    std::size_t n_steps() const { return n_steps_; }
    double dt() const { return (t_end_ - t_start_) / static_cast<double>(n_steps_); }

    // Computed directly from k, never accumulated.
    double time(std::size_t k) const {
        if (k == n_steps_) return t_end_;
        return t_start_ + static_cast<double>(k) * dt();
    }

    /// Index of the node at time t, or -1 when t is not a node (relative tolerance 1e-9).
    std::ptrdiff_t node_of(double t) const {
        const double pos = (t - t_start_) / dt();
        const double r = std::round(pos);
        if (r < 0 || r > static_cast<double>(n_steps_) || std::abs(pos - r) > 1e-9) return -1;
        return static_cast<std::ptrdiff_t>(r);
    }

private:
    double t_start_ = 0.0;
    double t_end_ = 1.0;
    std::size_t n_steps_ = 1;
};

struct LevyAtom {
    double mark;
    double rate;
};

/// Finite-atom approximation of a Levy measure nu(dzeta) = sum_i rate_i * delta_{mark_i}.
class LevySpec {
public:
    LevySpec() = default;
    explicit LevySpec(std::vector<LevyAtom> atoms) : atoms_(std::move(atoms)) {
        for (const auto& a : atoms_) {
            if (!(a.rate >= 0.0) || !std::isfinite(a.rate))
                throw std::invalid_argument("LevySpec: atom rates must be finite and >= 0");
            if (!std::isfinite(a.mark)) throw std::invalid_argument("LevySpec: marks must be finite");
        }
    }

    const std::vector<LevyAtom>& atoms() const { return atoms_; }
    bool empty() const { return atoms_.empty(); }

    double total_rate() const {
        double s = 0.0;
        for (const auto& a : atoms_) s += a.rate;
        return s;
    }

    /// sum_i zeta_i * lambda_i, the per-unit-time compensator of the identity mark function.
    double mean_mark_rate() const {
        double s = 0.0;
        for (const auto& a : atoms_) s += a.mark * a.rate;
        return s;
    }

    bool contains(double mark) const {
        for (const auto& a : atoms_)
            if (a.mark == mark) return true;
        return false;
    }

private:
    std::vector<LevyAtom> atoms_;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace detail

/// Noise channels of a path. Each (seed, path_index, stream, channel) key owns
/// an independent counter-based substream.
enum class Channel : std::uint64_t { brownian = 0, jumps = 1, auxiliary = 2 };

/// Counter-based generator: output n is a pure function of (key, n), so any
/// substream can be regenerated in any order.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t path_index, std::uint64_t stream, Channel channel)
        : key_(detail::splitmix64(detail::splitmix64(detail::splitmix64(seed) ^ path_index) ^
                                  (stream * 4 + static_cast<std::uint64_t>(channel)))) {}

    std::uint64_t next_u64() {
        const std::uint64_t c = counter_++;
        return detail::splitmix64(key_ ^ detail::splitmix64(c));
    }

    /// Uniform on the open interval (0, 1).
    double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    /// Poisson(mean) by sequential inversion; intended for small means (lambda * dt).
    std::size_t poisson(double mean) {
        if (mean <= 0.0) return 0;
        if (mean > 30.0) {
            // Normal approximation keeps the loop bounded for unusually large intensities.
            const double v = std::round(mean + std::sqrt(mean) * normal());
            return v < 0 ? 0 : static_cast<std::size_t>(v);
        }
        const double u = uniform();
        double p = std::exp(-mean);
        double cdf = p;
        std::size_t k = 0;
        while (u > cdf && k < 1000) {
            ++k;
            p *= mean / static_cast<double>(k);
            cdf += p;
        }
        return k;
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// One realization of (B, N(dt, dzeta)) on a time grid. Immutable once built.
class PathBundle {
public:
    PathBundle(TimeGrid grid, std::vector<double> increments, std::vector<std::size_t> jump_offsets,
               std::vector<double> jump_marks, std::uint64_t seed, std::uint64_t path_index,
               double auxiliary_normal = 0.0)
        : grid_(grid),
          increments_(std::move(increments)),
          jump_offsets_(std::move(jump_offsets)),
          jump_marks_(std::move(jump_marks)),
          seed_(seed),
          path_index_(path_index),
          auxiliary_normal_(auxiliary_normal) {
        if (increments_.size() != grid_.n_steps() || jump_offsets_.size() != grid_.n_steps() + 1)
            throw std::invalid_argument("PathBundle: inconsistent sizes");
    }

    const TimeGrid& grid() const { return grid_; }
    std::span<const double> brownian_increments() const { return increments_; }
    double increment(std::size_t k) const { return increments_.at(k); }
    std::uint64_t seed() const { return seed_; }
    std::uint64_t path_index() const { return path_index_; }
    /// A standard normal independent of every increment (used e.g. for X(0) draws).
    double auxiliary_normal() const { return auxiliary_normal_; }

    /// Marks of the jumps realized during step k, i.e. in (t_k, t_{k+1}].
    std::span<const double> jumps_at(std::size_t k) const {
        return std::span<const double>(jump_marks_).subspan(jump_offsets_.at(k),
                                                            jump_offsets_.at(k + 1) - jump_offsets_[k]);
    }
    std::size_t total_jumps() const { return jump_marks_.size(); }

    /// sum over events of f(zeta) minus dt * sum_i lambda_i f(zeta_i): the compensated
    /// Poisson integral of f over step k with the left-endpoint compensator.
    template <class F>
    double compensated_jump(std::size_t k, const LevySpec& levy, F&& f) const {
        double s = 0.0;
        for (double m : jumps_at(k)) s += f(m);
        for (const auto& a : levy.atoms()) s -= grid_.dt() * a.rate * f(a.mark);
        return s;
    }

    double compensated_increment(std::size_t k, const LevySpec& levy) const {
        return compensated_jump(k, levy, [](double m) { return m; });
    }

    /// Copy with the Brownian increments negated (antithetic partner); jumps unchanged.
    PathBundle antithetic() const {
        std::vector<double> neg(increments_);
        for (double& v : neg) v = -v;
        return PathBundle(grid_, std::move(neg), jump_offsets_, jump_marks_, seed_, path_index_,
                          -auxiliary_normal_);
    }

    /// Copy with increment k shifted by h (a discrete Malliavin bump).
    PathBundle bumped(std::size_t k, double h) const {
        std::vector<double> inc(increments_);
        inc.at(k) += h;
        return PathBundle(grid_, std::move(inc), jump_offsets_, jump_marks_, seed_, path_index_,
                          auxiliary_normal_);
    }

    /// Aggregates `factor` consecutive steps into one.
    PathBundle coarsened(std::size_t factor) const {
        if (factor == 0 || grid_.n_steps() % factor != 0)
            throw std::invalid_argument("PathBundle::coarsened: factor must divide n_steps");
        const std::size_t n = grid_.n_steps() / factor;
        std::vector<double> inc(n, 0.0);
        std::vector<std::size_t> offs(n + 1, 0);
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t s = 0; s < factor; ++s) inc[j] += increments_[j * factor + s];
            offs[j + 1] = jump_offsets_[(j + 1) * factor];
        }
        return PathBundle(TimeGrid(grid_.t_start(), grid_.t_end(), n), std::move(inc), std::move(offs),
                          jump_marks_, seed_, path_index_, auxiliary_normal_);
    }

    /// The bundle on [t_start, t_k] followed by `tail` (which must start at t_k with the same dt).
    PathBundle spliced(std::size_t k, const PathBundle& tail) const {
        if (std::abs(tail.grid().dt() - grid_.dt()) > 1e-12 * grid_.dt() ||
            std::abs(tail.grid().t_start() - grid_.time(k)) > 1e-12)
            throw std::invalid_argument("PathBundle::spliced: grid mismatch");
        const std::size_t n = k + tail.grid().n_steps();
        std::vector<double> inc(increments_.begin(), increments_.begin() + static_cast<std::ptrdiff_t>(k));
        inc.insert(inc.end(), tail.increments_.begin(), tail.increments_.end());
        std::vector<double> marks(jump_marks_.begin(),
                                  jump_marks_.begin() + static_cast<std::ptrdiff_t>(jump_offsets_[k]));
        std::vector<std::size_t> offs(jump_offsets_.begin(),
                                      jump_offsets_.begin() + static_cast<std::ptrdiff_t>(k + 1));
        const std::size_t base = jump_offsets_[k];
        for (std::size_t j = 1; j < tail.jump_offsets_.size(); ++j) offs.push_back(base + tail.jump_offsets_[j]);
        marks.insert(marks.end(), tail.jump_marks_.begin(), tail.jump_marks_.end());
        return PathBundle(TimeGrid(grid_.t_start(), tail.grid().t_end(), n), std::move(inc), std::move(offs),
                          std::move(marks), seed_, path_index_, auxiliary_normal_);
    }

    bool operator==(const PathBundle& o) const {
        return increments_ == o.increments_ && jump_offsets_ == o.jump_offsets_ &&
               jump_marks_ == o.jump_marks_ && auxiliary_normal_ == o.auxiliary_normal_;
    }

private:
    TimeGrid grid_;
    std::vector<double> increments_;
    std::vector<std::size_t> jump_offsets_;
    std::vector<double> jump_marks_;
    std::uint64_t seed_;
    std::uint64_t path_index_;
    double auxiliary_normal_;
};

/// Reproducible bundle keyed by (seed, path_index, stream). Brownian increments and
/// jump marks come from separate substreams.
inline PathBundle sample_bundle(const TimeGrid& grid, const LevySpec& levy, std::uint64_t seed,
                                std::uint64_t path_index, std::uint64_t stream = 0) {
    CounterRng bm(seed, path_index, stream, Channel::brownian);
    CounterRng jp(seed, path_index, stream, Channel::jumps);
    CounterRng aux(seed, path_index, stream, Channel::auxiliary);
    const double dt = grid.dt();
    const double sdt = std::sqrt(dt);
    std::vector<double> inc(grid.n_steps());
    for (double& v : inc) v = sdt * bm.normal();
    std::vector<std::size_t> offs(grid.n_steps() + 1, 0);
    std::vector<double> marks;
    for (std::size_t k = 0; k < grid.n_steps(); ++k) {
        for (const auto& a : levy.atoms()) {
            const std::size_t cnt = jp.poisson(a.rate * dt);
            for (std::size_t c = 0; c < cnt; ++c) marks.push_back(a.mark);
        }
        offs[k + 1] = marks.size();
    }
    return PathBundle(grid, std::move(inc), std::move(offs), std::move(marks), seed, path_index, aux.normal());
}

/// B(t_k) = sum_{j<k} dB_j.
inline double brownian_value(const PathBundle& bundle, std::size_t k) {
    if (k > bundle.grid().n_steps()) throw std::out_of_range("brownian_value: step index out of range");
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += bundle.increment(j);
    return s;
}

/// B at every node 0..n_steps.
inline std::vector<double> brownian_path(const PathBundle& bundle) {
    std::vector<double> b(bundle.grid().n_steps() + 1, 0.0);
    for (std::size_t j = 0; j < bundle.grid().n_steps(); ++j) b[j + 1] = b[j] + bundle.increment(j);
    return b;
}

/// Left-endpoint (Ito) sum  sum_k f_k dB_k. The caller guarantees f_k is F_{t_k}-measurable.
inline double ito_integral(std::span<const double> integrand, const PathBundle& bundle) {
    if (integrand.size() != bundle.grid().n_steps())
        throw std::invalid_argument("ito_integral: integrand length must equal n_steps");
    double s = 0.0;
    for (std::size_t k = 0; k < integrand.size(); ++k) s += integrand[k] * bundle.increment(k);
    return s;
}

}  // namespace insider
