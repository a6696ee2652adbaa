#pragma once

// Conditional moments of the Donsker delta functional of a first-order-chaos
// variable Z = int beta dB + int int psi dN~ over [0, T0].
//
// For t < T0 the conditional density is the Fourier integral
//
//   E[delta_Z(z) | F_t] = 1/(2 pi) int exp( i x (m_t - z) + Lambda_t(x) - x^2 s2_t / 2 ) dx,
//
// with m_t the realized value of Z(t), s2_t = int_t^T0 beta^2 ds and
// Lambda_t(x) = int_t^T0 sum_i lambda_i (e^{i x psi} - 1 - i x psi) ds.
// The Malliavin derivatives carry an extra factor i x beta(t) (Brownian) or
// e^{i x psi(t, zeta)} - 1 (jump) under the integral.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "insider/error.hpp"
#include "insider/noise.hpp"

namespace insider {

struct FirstOrderChaosSpec {
    std::function<double(double)> beta;
    /// psi(s, zeta); an empty callback means psi == 0 (pure Brownian Z).
    std::function<double(double, double)> psi;
    LevySpec levy;
    double T0 = 1.0;
    /// Optional closed form of int_a^b beta^2 ds; Simpson on `time_intervals` otherwise.
    std::function<double(double, double)> beta_sq_integral;
    std::size_t time_intervals = 256;

    /// Z = B(T0).
    static FirstOrderChaosSpec brownian(double T0) {
        FirstOrderChaosSpec s;
        s.beta = [](double) { return 1.0; };
        s.T0 = T0;
        s.beta_sq_integral = [](double a, double b) { return b - a; };
        return s;
    }

    bool has_jumps() const { return static_cast<bool>(psi) && !levy.empty(); }
    double psi_at(double s, double mark) const { return psi ? psi(s, mark) : 0.0; }

    double beta_sq_between(double a, double b) const {
        if (beta_sq_integral) return beta_sq_integral(a, b);
        if (b <= a) return 0.0;
        const std::size_t n = time_intervals + (time_intervals % 2);
        const double h = (b - a) / static_cast<double>(n);
        double s = 0.0;
        for (std::size_t j = 0; j <= n; ++j) {
            const double w = (j == 0 || j == n) ? 1.0 : (j % 2 ? 4.0 : 2.0);
            const double v = beta(a + h * static_cast<double>(j));
            s += w * v * v;
        }
        return s * h / 3.0;
    }

    /// sigma^2(t) = int_t^T0 beta^2 ds.
    double residual_variance(double t) const { return beta_sq_between(t, T0); }

    void validate() const {
        if (!beta) throw std::invalid_argument("FirstOrderChaosSpec: beta callback is required");
        if (!(T0 > 0.0)) throw std::invalid_argument("FirstOrderChaosSpec: T0 must be positive");
        if (!(beta_sq_between(0.0, T0) > 0.0))
            throw std::invalid_argument("FirstOrderChaosSpec: int_0^T0 beta^2 ds must be positive");
    }
};

struct JumpEvent {
    double time;
    double mark;
};

/// The F_t-measurable record entering the conditional moments at time t.
struct HistorySnapshot {
    double t = 0.0;
    /// int_0^t beta dB (realized).
    double accumulated_b = 0.0;
    std::vector<JumpEvent> jumps;
    /// int_0^t sum_i lambda_i psi(s, zeta_i) ds, left-endpoint on the generating grid.
    double jump_compensator = 0.0;
    /// B at the generating grid nodes up to t; needed only by path-functional K callbacks.
    std::vector<double> brownian_nodes;
    double dt = 0.0;

    /// Realized Z(t) = int_0^t beta dB + int_0^t int psi dN~.
    double mean(const FirstOrderChaosSpec& spec) const {
        double m = accumulated_b - jump_compensator;
        for (const auto& e : jumps) m += spec.psi_at(e.time, e.mark);
        return m;
    }

    static HistorySnapshot brownian_only(double t, double accumulated_b) {
        HistorySnapshot h;
        h.t = t;
        h.accumulated_b = accumulated_b;
        return h;
    }

    /// Snapshot at node k of `bundle`. Jumps of step j are stamped at t_{j+1}.
    static HistorySnapshot from_bundle(const FirstOrderChaosSpec& spec, const PathBundle& bundle,
                                       std::size_t k) {
        if (k > bundle.grid().n_steps()) throw std::out_of_range("HistorySnapshot::from_bundle: step out of range");
        HistorySnapshot h;
        h.t = bundle.grid().time(k);
        h.dt = bundle.grid().dt();
        h.brownian_nodes.assign(1, 0.0);
        h.append_steps(spec, bundle, 0, k);
        return h;
    }

    /// This snapshot continued along `tail`, which starts at t.
    HistorySnapshot extended(const FirstOrderChaosSpec& spec, const PathBundle& tail) const {
        if (std::abs(tail.grid().t_start() - t) > 1e-12)
            throw std::invalid_argument("HistorySnapshot::extended: continuation must start at t");
        HistorySnapshot h = *this;
        if (h.brownian_nodes.empty()) h.brownian_nodes.assign(1, 0.0);
        h.dt = tail.grid().dt();
        h.append_steps(spec, tail, 0, tail.grid().n_steps());
        h.t = tail.grid().t_end();
        return h;
    }

    /// Appends steps [from, to) of `b` (whose step `from` must start at t) and moves t forward.
    void advance(const FirstOrderChaosSpec& spec, const PathBundle& b, std::size_t from, std::size_t to) {
        if (brownian_nodes.empty()) brownian_nodes.assign(1, 0.0);
        dt = b.grid().dt();
        append_steps(spec, b, from, to);
        t = b.grid().time(to);
    }

private:
    void append_steps(const FirstOrderChaosSpec& spec, const PathBundle& b, std::size_t from, std::size_t to) {
        const double dtb = b.grid().dt();
        for (std::size_t j = from; j < to; ++j) {
            const double s = b.grid().time(j);
            accumulated_b += spec.beta(s) * b.increment(j);
            brownian_nodes.push_back(brownian_nodes.back() + b.increment(j));
            if (spec.has_jumps()) {
                for (double m : b.jumps_at(j)) jumps.push_back({b.grid().time(j + 1), m});
                for (const auto& a : spec.levy.atoms()) jump_compensator += dtb * a.rate * spec.psi(s, a.mark);
            }
        }
    }
};

struct QuadratureOptions {
    /// Stopping tolerance relative to the natural scale of the integral.
    double rel_tol = 1e-12;
    std::size_t initial_intervals = 64;
    std::size_t min_intervals = 0;
    std::size_t max_intervals = std::size_t{1} << 22;
    /// Truncate at |x| where exp(-x^2 s2 / 2) drops below this.
    double damping_cutoff = 1e-12;
};

inline constexpr double kVarianceFloor = 1e-12;
inline constexpr double kDivisionFloor = 1e-300;

struct DonskerValue {
    double value = 0.0;
    bool clamped = false;
    std::size_t intervals = 0;
    double x_max = 0.0;
};

namespace detail {

enum class FourierKind { density, malliavin_b, malliavin_n };

/// Time-quadrature table for Lambda_t(x).
class LevyExponent {
public:
    LevyExponent(const FirstOrderChaosSpec& spec, double t) {
        if (!spec.has_jumps()) return;
        const std::size_t n = spec.time_intervals + (spec.time_intervals % 2);
        const double h = (spec.T0 - t) / static_cast<double>(n);
        for (const auto& a : spec.levy.atoms()) {
            if (a.rate == 0.0) continue;
            for (std::size_t j = 0; j <= n; ++j) {
                const double w = (j == 0 || j == n) ? 1.0 : (j % 2 ? 4.0 : 2.0);
                weights_.push_back(a.rate * w * h / 3.0);
                psis_.push_back(spec.psi(t + h * static_cast<double>(j), a.mark));
            }
        }
    }

    std::complex<double> operator()(double x) const {
        std::complex<double> s = 0.0;
        for (std::size_t j = 0; j < psis_.size(); ++j) {
            const double a = x * psis_[j];
            s += weights_[j] * std::complex<double>(std::cos(a) - 1.0, std::sin(a) - a);
        }
        return s;
    }

    bool trivial() const { return psis_.empty(); }

private:
    std::vector<double> weights_, psis_;
};

inline void check_time(const FirstOrderChaosSpec& spec, const HistorySnapshot& hist, double& s2) {
    if (!(hist.t < spec.T0))
        throw DegenerateVariance("conditional moments require t < T0 (t=" + std::to_string(hist.t) +
                                 ", T0=" + std::to_string(spec.T0) + ")");
    s2 = spec.residual_variance(hist.t);
    if (!(s2 >= kVarianceFloor))
        throw DegenerateVariance("residual variance int_t^T0 beta^2 ds is below 1e-12");
}

/// (1/pi) int_0^X Re[ g(x) e^{Lambda(x)} e^{i x y} ] e^{-x^2 s2/2} dx by composite Simpson
/// with interval halving (trapezoid sums reused between levels).
inline DonskerValue fourier_integral(const FirstOrderChaosSpec& spec, double z, const HistorySnapshot& hist,
                                     FourierKind kind, double factor, const QuadratureOptions& opts) {
    double s2 = 0.0;
    check_time(spec, hist, s2);
    const double y = hist.mean(spec) - z;
    const LevyExponent lambda(spec, hist.t);
    const double x_max = std::sqrt(-2.0 * std::log(opts.damping_cutoff) / s2);

    auto f = [&](double x) {
        std::complex<double> e = std::exp(std::complex<double>(0.0, x * y) - 0.5 * x * x * s2);
        if (!lambda.trivial()) e *= std::exp(lambda(x));
        switch (kind) {
            case FourierKind::density:
                return e.real();
            case FourierKind::malliavin_b:
                return -x * factor * e.imag();  // Re(i x beta e)
            case FourierKind::malliavin_n: {
                const std::complex<double> g(std::cos(x * factor) - 1.0, std::sin(x * factor));
                return (g * e).real();
            }
        }
        return 0.0;
    };

    // Natural scales: the density envelope 1/sqrt(2 pi s2), divided by sqrt(s2)
    // for the derivative-type integrand.
    double scale = 1.0 / std::sqrt(2.0 * std::numbers::pi * s2);
    if (kind == FourierKind::malliavin_b) scale *= std::max(std::abs(factor), 1e-300) / std::sqrt(s2);
    const double tol = opts.rel_tol * scale;

    std::size_t n = std::max<std::size_t>(opts.initial_intervals, 2);
    double h = x_max / static_cast<double>(n);
    double edge = 0.5 * (f(0.0) + f(x_max));
    double inner = 0.0;
    for (std::size_t j = 1; j < n; ++j) inner += f(h * static_cast<double>(j));
    double trap = h * (edge + inner);
    double simpson_prev = std::numeric_limits<double>::quiet_NaN();
    while (true) {
        double mid = 0.0;
        for (std::size_t j = 0; j < n; ++j) mid += f(h * (static_cast<double>(j) + 0.5));
        const double trap2 = 0.5 * h * (edge + inner + mid);
        const double simpson = (4.0 * trap2 - trap) / 3.0;
        inner += mid;
        n *= 2;
        h *= 0.5;
        trap = trap2;
        if (std::isfinite(simpson_prev) && std::abs(simpson - simpson_prev) <= tol && n >= opts.min_intervals) {
            DonskerValue out;
            out.value = simpson / std::numbers::pi;
            out.intervals = n;
            out.x_max = x_max;
            return out;
        }
        simpson_prev = simpson;
        if (n > opts.max_intervals)
            throw QuadratureFailure("Fourier quadrature did not reach tolerance within " +
                                    std::to_string(opts.max_intervals) + " intervals");
    }
}

}  // namespace detail

/// E[delta_Z(z) | F_t] with solver diagnostics. Negative quadrature noise is clamped to 0.
inline DonskerValue conditional_delta_detailed(const FirstOrderChaosSpec& spec, double z,
                                               const HistorySnapshot& hist, const QuadratureOptions& opts = {}) {
    DonskerValue v = detail::fourier_integral(spec, z, hist, detail::FourierKind::density, 0.0, opts);
    if (v.value < 0.0) {
        v.value = 0.0;
        v.clamped = true;
    }
    return v;
}

inline double conditional_delta(const FirstOrderChaosSpec& spec, double z, const HistorySnapshot& hist,
                                const QuadratureOptions& opts = {}) {
    return conditional_delta_detailed(spec, z, hist, opts).value;
}

/// E[D_s delta_Z(z) | F_t] for s = derivative_time (default s = t).
inline double conditional_malliavin_b(const FirstOrderChaosSpec& spec, double z, const HistorySnapshot& hist,
                                      const QuadratureOptions& opts = {}, double derivative_time = -1.0) {
    const double s = derivative_time < 0.0 ? hist.t : derivative_time;
    return detail::fourier_integral(spec, z, hist, detail::FourierKind::malliavin_b, spec.beta(s), opts).value;
}

/// E[D_{t,zeta} delta_Z(z) | F_t]; zeta must be an atom of the Levy measure.
inline double conditional_malliavin_n(const FirstOrderChaosSpec& spec, double z, const HistorySnapshot& hist,
                                      double zeta, const QuadratureOptions& opts = {}) {
    if (!spec.levy.contains(zeta)) throw UnknownMark("mark " + std::to_string(zeta) + " is not an atom of nu");
    const double shift = spec.psi_at(hist.t, zeta);
    if (shift == 0.0) {
        double s2 = 0.0;
        detail::check_time(spec, hist, s2);
        return 0.0;
    }
    return detail::fourier_integral(spec, z, hist, detail::FourierKind::malliavin_n, shift, opts).value;
}

/// Phi_1(t,z) = E[D_t delta | F_t] / E[delta | F_t].
inline double phi1(const FirstOrderChaosSpec& spec, double z, const HistorySnapshot& hist,
                   const QuadratureOptions& opts = {}) {
    const double den = conditional_delta(spec, z, hist, opts);
    if (!(den > kDivisionFloor)) throw DivisionUnstable("E[delta_Z(z)|F_t] underflows; Phi_1 is undefined");
    return conditional_malliavin_b(spec, z, hist, opts) / den;
}

// Closed forms for psi == 0, where the conditional law of Z is N(m_t, s2_t).

inline void require_gaussian(const FirstOrderChaosSpec& spec) {
    if (spec.has_jumps()) throw std::invalid_argument("closed-form Donsker weights need psi == 0");
}

inline double gaussian_conditional_delta(const FirstOrderChaosSpec& spec, double z, const HistorySnapshot& hist) {
    require_gaussian(spec);
    double s2 = 0.0;
    detail::check_time(spec, hist, s2);
    const double d = z - hist.accumulated_b;
    return std::exp(-0.5 * d * d / s2) / std::sqrt(2.0 * std::numbers::pi * s2);
}

inline double gaussian_phi1(const FirstOrderChaosSpec& spec, double z, const HistorySnapshot& hist) {
    require_gaussian(spec);
    double s2 = 0.0;
    detail::check_time(spec, hist, s2);
    return spec.beta(hist.t) * (z - hist.accumulated_b) / s2;
}

inline double gaussian_malliavin_b(const FirstOrderChaosSpec& spec, double z, const HistorySnapshot& hist,
                                   double derivative_time = -1.0) {
    const double s = derivative_time < 0.0 ? hist.t : derivative_time;
    const double s2 = spec.residual_variance(hist.t);
    return gaussian_conditional_delta(spec, z, hist) * spec.beta(s) * (z - hist.accumulated_b) / s2;
}

/// Route for the Donsker weights inside Monte Carlo loops. The closed form is exact for psi == 0
/// and much cheaper; the Fourier route is general.
enum class DonskerMethod { fourier, closed_form };

inline double donsker_weight(const FirstOrderChaosSpec& spec, double z, const HistorySnapshot& hist,
                             DonskerMethod method, const QuadratureOptions& opts = {}) {
    return method == DonskerMethod::closed_form ? gaussian_conditional_delta(spec, z, hist)
                                                : conditional_delta(spec, z, hist, opts);
}

inline double donsker_malliavin_b(const FirstOrderChaosSpec& spec, double z, const HistorySnapshot& hist,
                                  DonskerMethod method, const QuadratureOptions& opts = {}) {
    return method == DonskerMethod::closed_form ? gaussian_malliavin_b(spec, z, hist)
                                                : conditional_malliavin_b(spec, z, hist, opts);
}

inline double donsker_phi1(const FirstOrderChaosSpec& spec, double z, const HistorySnapshot& hist,
                           DonskerMethod method, const QuadratureOptions& opts = {}) {
    return method == DonskerMethod::closed_form ? gaussian_phi1(spec, z, hist) : phi1(spec, z, hist, opts);
}

/// K(z) of the terminal utility weight. Deterministic K cancels from Phi_K; a stochastic K
/// is a functional of the Brownian nodes on [0, horizon] and must come with its derivative.
struct KFunctional {
    std::function<double(double z)> deterministic;
    std::function<double(std::span<const double> b_nodes, double z)> value;
    /// D_{t_k} K evaluated on the same nodes.
    std::function<double(std::span<const double> b_nodes, std::size_t k, double z)> derivative;
    double horizon = 0.0;
    std::size_t n_continuations = 10000;
    std::uint64_t seed = 0;

    static KFunctional constant(double c) {
        KFunctional k;
        k.deterministic = [c](double) { return c; };
        return k;
    }

    bool is_deterministic() const { return static_cast<bool>(deterministic); }
};

struct PhiEstimate {
    double value = 0.0;
    double stderr = 0.0;
    std::size_t n = 0;
};

/// Phi_K(t,z) = E[D_t(K E[delta|F_T]) | F_t] / E[K E[delta|F_T] | F_t].
/// Stochastic K: nested conditional Monte Carlo over continuations of the history to the
/// horizon, with a delta-method standard error for the ratio.
inline PhiEstimate phi_k_estimate(const FirstOrderChaosSpec& spec, const KFunctional& k_model, double z,
                                  const HistorySnapshot& hist, const QuadratureOptions& opts = {}) {
    if (k_model.is_deterministic()) {
        const double kz = k_model.deterministic(z);
        if (!(std::abs(kz) > kDivisionFloor)) throw DivisionUnstable("K(z) == 0; Phi_K is undefined");
        return {phi1(spec, z, hist, opts), 0.0, 0};
    }
    if (!k_model.value || !k_model.derivative)
        throw MissingDerivativeCallback("stochastic K requires both value and Malliavin-derivative callbacks");
    if (hist.brownian_nodes.empty() || !(hist.dt > 0.0))
        throw std::invalid_argument("phi_k: stochastic K needs a history built from a path bundle");
    if (!(k_model.horizon > hist.t) || !(k_model.horizon < spec.T0))
        throw std::invalid_argument("phi_k: K horizon must satisfy t < horizon < T0");
    const auto m = static_cast<std::size_t>(std::llround((k_model.horizon - hist.t) / hist.dt));
    const TimeGrid cgrid(hist.t, k_model.horizon, std::max<std::size_t>(m, 1));
    const std::size_t n = k_model.n_continuations;
    const std::size_t k_t = hist.brownian_nodes.size() - 1;
    std::vector<double> num(n), den(n);
    for (std::size_t i = 0; i < n; ++i) {
        const PathBundle tail = sample_bundle(cgrid, spec.levy, k_model.seed, i);
        const HistorySnapshot end = hist.extended(spec, tail);
        const double kv = k_model.value(end.brownian_nodes, z);
        const double dk = k_model.derivative(end.brownian_nodes, k_t, z);
        const double cd = conditional_delta(spec, z, end, opts);
        const double md = conditional_malliavin_b(spec, z, end, opts, hist.t);
        num[i] = dk * cd + kv * md;
        den[i] = kv * cd;
    }
    double mn = 0.0, md = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mn += num[i];
        md += den[i];
    }
    mn /= static_cast<double>(n);
    md /= static_cast<double>(n);
    if (!(std::abs(md) > kDivisionFloor)) throw DivisionUnstable("E[K E[delta|F_T] | F_t] underflows");
    const double r = mn / md;
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = num[i] - r * den[i];
        var += e * e;
    }
    var /= static_cast<double>(n - 1);
    return {r, std::sqrt(var / static_cast<double>(n)) / std::abs(md), n};
}

inline double phi_k(const FirstOrderChaosSpec& spec, const KFunctional& k_model, double z,
                    const HistorySnapshot& hist, const QuadratureOptions& opts = {}) {
    return phi_k_estimate(spec, k_model, z, hist, opts).value;
}

}  // namespace insider
