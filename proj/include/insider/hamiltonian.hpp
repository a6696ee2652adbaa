#pragma once

// Hamiltonian, Monte Carlo performance estimators j(u)(z), the perturbation family
// u + a*beta, the derivative process chi, the reduced adjoint of the multiplicative
// wealth problem, and a simulation check of the x-independent stationarity condition.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "insider/donsker.hpp"
#include "insider/error.hpp"
#include "insider/montecarlo.hpp"
#include "insider/noise.hpp"
#include "insider/spde.hpp"

namespace insider {

struct PerformanceSpec {
    StateCoeff h;                                                  ///< profit rate density; empty = 0
    std::function<double(double x, double y, double z)> k;        ///< terminal payoff density; empty = 0
    std::function<double(double x, double y, double z)> dk_dy;    ///< needed by the stationarity check
    SpatialRule rule = SpatialRule::trapezoid;
    /// Reject paths whose state is <= 0 on a quadrature node (logarithmic payoffs).
    bool positive_state_required = false;

    bool trivial() const { return !h && !k; }
};

struct AdjointTriple {
    double p = 0.0;
    double q = 0.0;
    std::function<double(double mark)> r;  ///< empty = 0
};

/// H = w h + (A_u phi + a) p + b q + sum_i lambda_i c(zeta_i) r(zeta_i) at grid node i.
inline double hamiltonian(double t, std::size_t i, double y, std::span<const double> phi, double u, double z,
                          const AdjointTriple& adj, double donsker_w, const CoefficientSet& coeffs,
                          const OperatorSpec& op, const PerformanceSpec& perf, const SpatialGrid& grid) {
    const double x = grid.x(i);
    double v = 0.0;
    if (perf.h) v += donsker_w * perf.h(t, x, y, u, z);
    if (adj.p != 0.0) v += (apply_operator_row(op, grid, t, u, z, i, phi) + eval_or_zero(coeffs.a, t, x, y, u, z)) * adj.p;
    if (adj.q != 0.0) v += eval_or_zero(coeffs.b, t, x, y, u, z) * adj.q;
    if (adj.r && coeffs.c)
        for (const auto& a : coeffs.levy.atoms()) v += a.rate * coeffs.c(t, x, y, u, z, a.mark) * adj.r(a.mark);
    return v;
}

/// Coefficients, operator and grids of one forward problem; bundles are sampled with coeffs.levy.
struct ForwardProblem {
    CoefficientSet coeffs;
    OperatorSpec op;
    SpatialGrid space;
    TimeGrid time;
};

struct EstimatorOptions {
    std::size_t n_paths = 1000;
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    std::size_t threads = 1;
    /// Average each path with its antithetic partner; n_paths counts bundles, so n_paths/2 pairs.
    bool antithetic = false;
    DonskerMethod method = DonskerMethod::fourier;
    QuadratureOptions quadrature;
};

inline void check_horizon(const FirstOrderChaosSpec& spec, const TimeGrid& tg) {
    if (tg.t_end() > spec.T0 - 0.5 * tg.dt())
        throw std::invalid_argument("performance horizon T must satisfy T <= T0 - dt (weights need t < T0)");
}

/// One path's contribution sum_k dt w_k int h dx + w_T int k(Y_T) dx; NaN if the path is rejected.
inline double j_path_value(const ForwardSolver& solver, const ControlPolicy& control, const PerformanceSpec& perf,
                           const FirstOrderChaosSpec& spec, const PathBundle& bundle, const EstimatorOptions& opts) {
    if (perf.trivial()) return 0.0;
    const SpatialGrid& g = solver.grid();
    const TimeGrid& tg = bundle.grid();
    const double z = solver.z();
    const std::size_t n = tg.n_steps();
    HistorySnapshot hist;
    hist.t = tg.t_start();
    hist.dt = tg.dt();
    hist.brownian_nodes.assign(1, 0.0);
    bool rejected = false;
    double total = 0.0;
    std::vector<double> integrand(g.n_nodes(), 0.0);
    const std::size_t lo = perf.rule == SpatialRule::interior ? 1 : 0;
    const std::size_t hi = perf.rule == SpatialRule::interior ? g.n_cells() - 1 : g.n_cells();
    sweep_forward(solver, control, bundle, [&](std::size_t k, std::span<const double> y, std::span<const double> u) {
        if (rejected) return;
        if (perf.positive_state_required) {
            for (std::size_t i = lo; i <= hi; ++i)
                if (!(y[i] > 0.0)) {
                    rejected = true;
                    return;
                }
        }
        if (k < n) {
            if (perf.h) {
                const double w = donsker_weight(spec, z, hist, opts.method, opts.quadrature);
                for (std::size_t i = 0; i < g.n_nodes(); ++i)
                    integrand[i] = perf.h(tg.time(k), g.x(i), y[i], u.size() == 1 ? u[0] : u[i], z);
                total += tg.dt() * w * integrate(g, integrand, perf.rule);
            }
            hist.advance(spec, bundle, k, k + 1);
        } else if (perf.k) {
            const double w = donsker_weight(spec, z, hist, opts.method, opts.quadrature);
            for (std::size_t i = lo; i <= hi; ++i) integrand[i] = perf.k(g.x(i), y[i], z);
            integrand[0] = lo ? 0.0 : integrand[0];
            integrand[g.n_cells()] = lo ? 0.0 : integrand[g.n_cells()];
            total += w * integrate(g, integrand, perf.rule);
        }
    });
    return rejected ? std::numeric_limits<double>::quiet_NaN() : total;
}

/// Per-sample values of j(u)(z): one per path, or one per antithetic pair.
inline std::vector<double> j_samples(const ForwardProblem& prob, const ControlPolicy& control,
                                     const PerformanceSpec& perf, const FirstOrderChaosSpec& spec, double z,
                                     const EstimatorOptions& opts) {
    if (opts.n_paths < 2) throw std::invalid_argument("estimate_j: n_paths must be >= 2");
    check_horizon(spec, prob.time);
    const ForwardSolver solver(prob.coeffs, prob.op, prob.space, z);
    if (!opts.antithetic) {
        return parallel_map<double>(opts.n_paths, opts.threads, [&](std::size_t i) {
            const PathBundle b = sample_bundle(prob.time, prob.coeffs.levy, opts.seed, i, opts.stream);
            return j_path_value(solver, control, perf, spec, b, opts);
        });
    }
    return parallel_map<double>(opts.n_paths / 2, opts.threads, [&](std::size_t i) {
        const PathBundle b = sample_bundle(prob.time, prob.coeffs.levy, opts.seed, i, opts.stream);
        return 0.5 * (j_path_value(solver, control, perf, spec, b, opts) +
                      j_path_value(solver, control, perf, spec, b.antithetic(), opts));
    });
}

inline PerformanceEstimate estimate_j(const ForwardProblem& prob, const ControlPolicy& control,
                                      const PerformanceSpec& perf, const FirstOrderChaosSpec& spec, double z,
                                      const EstimatorOptions& opts) {
    return summarize(j_samples(prob, control, perf, spec, z, opts));
}

/// beta = delta * beta0 with the clamp delta = min(dist(u, boundary of U) / (2 K), 1).
struct PerturbationDirection {
    ControlPolicy beta0;
    double K_bound = 1.0;

    static PerturbationDirection zero() { return {ControlPolicy::constant(0.0), 1.0}; }
};

inline double clamp_factor(const ControlRange& r, double u, double K) {
    return std::min(r.distance_to_boundary(u) / (2.0 * K), 1.0);
}

/// The policy u + a * delta(u) * beta0.
inline ControlPolicy perturbed(const ControlPolicy& u, const PerturbationDirection& d, double a) {
    if (!(std::abs(a) < 1.0)) throw StepTooLarge("perturbation size |a| must be < 1");
    if (!(d.K_bound > 0.0)) throw std::invalid_argument("PerturbationDirection: K_bound must be positive");
    const ControlMode mode = (u.mode() == ControlMode::x_dependent || d.beta0.mode() == ControlMode::x_dependent)
                                 ? ControlMode::x_dependent
                                 : ControlMode::x_independent;
    const ControlRange range = u.range();
    return ControlPolicy(mode, range, [u, d, a, range](const PathBundle& b, double z, const SpatialGrid& g) {
        BoundRule ru = u.bind_raw(b, z, g);
        BoundRule rb = d.beta0.bind_raw(b, z, g);
        const double K = d.K_bound;
        return BoundRule([ru, rb, a, range, K](std::size_t k, std::size_t i, std::span<const double> y) {
            const double uv = ru(k, i, y);
            const double bv = rb(k, i, y);
            if (std::abs(bv) > K * (1.0 + 1e-12))
                throw std::invalid_argument("perturbation direction exceeds its bound K");
            const double v = uv + a * clamp_factor(range, uv, K) * bv;
            if (!range.contains(v)) throw StepTooLarge("u + a*beta leaves U at step " + std::to_string(k));
            return v;
        });
    });
}

inline double default_a_step(const ControlRange& r) {
    return std::isfinite(r.diameter()) ? 1e-3 * r.diameter() : 1e-3;
}

struct GateauxOptions : EstimatorOptions {
    /// Independent paths for the two sides instead of common random numbers.
    bool independent_sampling = false;
};

/// d/da j(u + a beta)|_{a=0} by central difference.
inline PerformanceEstimate gateaux_derivative(const ForwardProblem& prob, const ControlPolicy& u,
                                              const PerturbationDirection& dir, const PerformanceSpec& perf,
                                              const FirstOrderChaosSpec& spec, double z, double a_step,
                                              const GateauxOptions& opts) {
    if (!(a_step > 0.0)) throw std::invalid_argument("gateaux_derivative: a_step must be positive");
    const ControlPolicy plus = perturbed(u, dir, a_step);
    const ControlPolicy minus = perturbed(u, dir, -a_step);
    if (!opts.independent_sampling) {
        const auto jp = j_samples(prob, plus, perf, spec, z, opts);
        const auto jm = j_samples(prob, minus, perf, spec, z, opts);
        auto d = paired_difference(jp, jm);
        for (double& v : d) v /= 2.0 * a_step;
        return summarize(d);
    }
    EstimatorOptions other = opts;
    other.stream = opts.stream + 1;
    const PerformanceEstimate ep = estimate_j(prob, plus, perf, spec, z, opts);
    const PerformanceEstimate em = estimate_j(prob, minus, perf, spec, z, other);
    PerformanceEstimate e;
    e.mean = (ep.mean - em.mean) / (2.0 * a_step);
    e.stderr = std::hypot(ep.stderr, em.stderr) / (2.0 * a_step);
    e.n_paths = std::min(ep.n_paths, em.n_paths);
    e.n_rejected = ep.n_rejected + em.n_rejected;
    return e;
}

/// chi = (Y^{u + a beta} - Y^{u - a beta}) / (2a) along one bundle.
inline StateField state_sensitivity(const ForwardProblem& prob, const ControlPolicy& u, const PerturbationDirection& dir,
                                    double z, const PathBundle& bundle, double a_step) {
    const StateField yp = solve_forward(prob.coeffs, prob.op, prob.space, perturbed(u, dir, a_step), z, bundle);
    const StateField ym = solve_forward(prob.coeffs, prob.op, prob.space, perturbed(u, dir, -a_step), z, bundle);
    StateField chi = yp;
    for (std::size_t k = 0; k < chi.values.size(); ++k)
        for (std::size_t i = 0; i < chi.values[k].size(); ++i)
            chi.values[k][i] = (yp.values[k][i] - ym.values[k][i]) / (2.0 * a_step);
    return chi;
}

namespace detail {

inline double central_diff(const std::function<double(double)>& f, double v, double rel = 1e-5) {
    const double h = rel * std::max(1.0, std::abs(v));
    return (f(v + h) - f(v - h)) / (2.0 * h);
}

}  // namespace detail

/// Max-norm defect of chi in the discrete linearized ("d chi") equation
///   (I - dt A_u) chi_{k+1} - dt (dA/du beta) Y_{k+1} = chi_k + dt (a_y chi + a_u beta) + (b_y chi + b_u beta) dB + jumps,
/// with the partial derivatives taken by central finite differences. Assumes the control is
/// open-loop in the state (beta is evaluated along the unperturbed path).
inline double chi_residual(const ForwardProblem& prob, const ControlPolicy& u, const PerturbationDirection& dir, double z,
                           const PathBundle& bundle, const StateField& chi) {
    const StateField y = solve_forward(prob.coeffs, prob.op, prob.space, u, z, bundle);
    const SpatialGrid& g = prob.space;
    const TimeGrid& tg = bundle.grid();
    const CoefficientSet& c = prob.coeffs;
    const BoundRule ru = u.bind(bundle, z, g);
    const BoundRule rb = dir.beta0.bind_raw(bundle, z, g);
    const ControlMode mode = (u.mode() == ControlMode::x_dependent || dir.beta0.mode() == ControlMode::x_dependent)
                                 ? ControlMode::x_dependent
                                 : ControlMode::x_independent;
    const std::size_t nn = g.n_nodes();
    double worst = 0.0;
    std::vector<double> uv(nn), bv(nn), up(nn), um(nn);
    for (std::size_t k = 0; k < tg.n_steps(); ++k) {
        const double t = tg.time(k), t1 = tg.time(k + 1), dt = tg.dt(), dB = bundle.increment(k);
        const auto& yk = y.values[k];
        const auto& yk1 = y.values[k + 1];
        const auto& ck = chi.values[k];
        const auto& ck1 = chi.values[k + 1];
        for (std::size_t i = 0; i < nn; ++i) {
            const std::size_t node = mode == ControlMode::x_independent ? kAnyNode : i;
            uv[i] = ru(k, node, yk);
            bv[i] = clamp_factor(u.range(), uv[i], dir.K_bound) * rb(k, node, yk);
        }
        const double hu = 1e-5;
        for (std::size_t i = 0; i < nn; ++i) {
            up[i] = uv[i] + hu * bv[i];
            um[i] = uv[i] - hu * bv[i];
        }
        const GridMatrix a0 = assemble_operator(prob.op, g, t1, uv, z);
        const GridMatrix ap = assemble_operator(prob.op, g, t1, up, z);
        const GridMatrix am = assemble_operator(prob.op, g, t1, um, z);
        const auto a_chi = a0.apply(ck1);
        const auto ap_y = ap.apply(yk1);
        const auto am_y = am.apply(yk1);
        for (std::size_t i = 1; i + 1 < nn; ++i) {
            const double x = g.x(i);
            auto partial_y = [&](const StateCoeff& f) {
                if (!f) return 0.0;
                return detail::central_diff([&](double v) { return f(t, x, v, uv[i], z); }, yk[i]);
            };
            auto partial_u = [&](const StateCoeff& f) {
                if (!f) return 0.0;
                return detail::central_diff([&](double v) { return f(t, x, yk[i], v, z); }, uv[i]);
            };
            double rhs = ck[i] + dt * (partial_y(c.a) * ck[i] + partial_u(c.a) * bv[i]) +
                         (partial_y(c.b) * ck[i] + partial_u(c.b) * bv[i]) * dB;
            if (c.c) {
                auto jump_lin = [&](double m) {
                    const double cy = detail::central_diff([&](double v) { return c.c(t, x, v, uv[i], z, m); }, yk[i]);
                    const double cu = detail::central_diff([&](double v) { return c.c(t, x, yk[i], v, z, m); }, uv[i]);
                    return cy * ck[i] + cu * bv[i];
                };
                for (double m : bundle.jumps_at(k)) rhs += jump_lin(m);
                for (const auto& at : c.levy.atoms()) rhs -= dt * at.rate * jump_lin(at.mark);
            }
            const double lhs = ck1[i] - dt * a_chi[i] - dt * (ap_y[i] - am_y[i]) / (2.0 * hu);
            worst = std::max(worst, std::abs(lhs - rhs));
        }
    }
    return worst;
}

inline constexpr double kVolatilityFloor = 1e-8;

struct ReducedAdjointPath {
    std::vector<double> values;  ///< p~(t_k, z), k = 0..n
    std::vector<double> theta;   ///< b0 pi - a0 / b0 per step
    double p0 = 0.0;

    double terminal() const { return values.back(); }
};

/// p~(t) = p~(0) exp(sum theta dB - 1/2 sum theta^2 dt), theta = b0 pi - a0/b0, with p~(0) fixed
/// so that p~(T) equals `terminal`. `pi` holds one control value per step.
inline ReducedAdjointPath reduced_adjoint_solve(const std::function<double(double, double)>& a0,
                                                const std::function<double(double, double)>& b0,
                                                std::span<const double> pi, double terminal,
                                                const PathBundle& bundle, double z) {
    const TimeGrid& tg = bundle.grid();
    if (pi.size() != tg.n_steps()) throw std::invalid_argument("reduced_adjoint_solve: pi needs one value per step");
    ReducedAdjointPath out;
    out.theta.resize(tg.n_steps());
    std::vector<double> exponent(tg.n_steps() + 1, 0.0);
    for (std::size_t k = 0; k < tg.n_steps(); ++k) {
        const double t = tg.time(k);
        const double bv = b0(t, z);
        if (!(std::abs(bv) >= kVolatilityFloor))
            throw DegenerateVolatility("|b0| below 1e-8 at t=" + std::to_string(t));
        const double th = bv * pi[k] - a0(t, z) / bv;
        out.theta[k] = th;
        exponent[k + 1] = exponent[k] + th * bundle.increment(k) - 0.5 * th * th * tg.dt();
    }
    out.p0 = terminal / std::exp(exponent.back());
    out.values.resize(exponent.size());
    for (std::size_t k = 0; k < exponent.size(); ++k) out.values[k] = out.p0 * std::exp(exponent[k]);
    return out;
}

struct StationarityOptions {
    std::vector<std::size_t> sample_steps;  ///< time indices k (0 < k < n)
    std::size_t n_outer_paths = 2;
    std::size_t n_continuations = 2000;
    double bump = 1e-4;            ///< size of the dB_k bump for the Malliavin derivative
    double control_fd = 1e-4;      ///< step of the finite difference in u
    double threshold = 3.0;        ///< in standard errors
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    DonskerMethod method = DonskerMethod::fourier;
    QuadratureOptions quadrature;
};

struct StationaritySample {
    std::size_t path = 0;
    std::size_t step = 0;
    double t = 0.0;
    double statistic = 0.0;
    double stderr = 0.0;

    double t_stat() const { return stderr > 0.0 ? statistic / stderr : 0.0; }
};

struct StationarityReport {
    std::vector<StationaritySample> samples;
    double threshold = 3.0;
    std::uint64_t seed = 0;

    double max_abs_statistic() const {
        double m = 0.0;
        for (const auto& s : samples) m = std::max(m, std::abs(s.statistic));
        return m;
    }
    double max_abs_t() const {
        double m = 0.0;
        for (const auto& s : samples) m = std::max(m, std::abs(s.t_stat()));
        return m;
    }
    /// Every sample within threshold standard errors of 0.
    bool stationary() const {
        for (const auto& s : samples)
            if (!(std::abs(s.statistic) <= threshold * s.stderr)) return false;
        return true;
    }
    /// +1 or -1 when every sample exceeds the threshold with that sign, 0 otherwise.
    int definite_sign() const {
        if (samples.empty()) return 0;
        int sign = 0;
        for (const auto& s : samples) {
            if (!(std::abs(s.statistic) > threshold * s.stderr)) return 0;
            const int sg = s.statistic > 0 ? 1 : -1;
            if (sign != 0 && sg != sign) return 0;
            sign = sg;
        }
        return sign;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["statistic"] = max_abs_statistic();
        j["max_abs_t"] = max_abs_t();
        j["threshold"] = threshold;
        j["verdict"] = stationary() ? "stationary" : (definite_sign() != 0 ? "definite-sign" : "inconclusive");
        j["definite_sign"] = definite_sign();
        j["seeds"] = {seed};
        auto& arr = j["samples"] = nlohmann::json::array();
        for (const auto& s : samples)
            arr.push_back({{"path", s.path}, {"step", s.step}, {"t", s.t}, {"statistic", s.statistic},
                           {"stderr", s.stderr}, {"t_stat", s.t_stat()}});
        return j;
    }
};

/// Simulation check of int_D dH/du dx = 0 for an x-independent control.
///
/// The adjoint enters only through p~ = int Y p dx and q~ = int Y q dx, which is exact when
/// the drift and volatility are linear in the state (so dH/du only sees those integrals).
/// Along each continuation from (t_k, path) p~(t_k) is sampled as
///   P = int dk/dy(Y_T) Y_T dx w_T + sum_{j>=k} dt int dh/dy Y w dx,
/// and int (p b + Y q) dx, the martingale integrand of p~, as the discrete Malliavin
/// derivative of P in dB_k. The fields handed to the Hamiltonian are p = p~ Y / |Y|^2 and
/// likewise for q.
inline StationarityReport verify_x_independent_stationarity(const ForwardProblem& prob, const ControlPolicy& control,
                                                            const PerformanceSpec& perf, const FirstOrderChaosSpec& spec,
                                                            double z, const StationarityOptions& opts) {
    if (control.mode() != ControlMode::x_independent)
        throw std::invalid_argument("verify_x_independent_stationarity: control must be x-independent");
    check_horizon(spec, prob.time);
    const TimeGrid& tg = prob.time;
    const std::size_t n = tg.n_steps();
    for (std::size_t k : opts.sample_steps)
        if (k == 0 || k >= n) throw std::invalid_argument("stationarity sample steps must satisfy 0 < k < n");
    if (perf.k && !perf.dk_dy) throw MissingDerivativeCallback("stationarity check needs dk/dy");
    const SpatialGrid& g = prob.space;
    const ForwardSolver solver(prob.coeffs, prob.op, g, z);
    const std::size_t nn = g.n_nodes();
    const std::size_t lo = perf.rule == SpatialRule::interior ? 1 : 0;
    const std::size_t hi = perf.rule == SpatialRule::interior ? g.n_cells() - 1 : g.n_cells();

    auto masked_integral = [&](std::vector<double>& f) {
        if (lo) f.front() = f.back() = 0.0;
        return integrate(g, f, perf.rule);
    };

    // P along a full bundle, continuing from state yk at node k.
    auto adjoint_sample = [&](const PathBundle& full, std::size_t k, const std::vector<double>& yk) {
        if (perf.trivial()) return 0.0;
        HistorySnapshot hist = HistorySnapshot::from_bundle(spec, full, k);
        double total = 0.0;
        std::vector<double> f(nn, 0.0);
        sweep_forward(solver, control, full, [&](std::size_t j, std::span<const double> y, std::span<const double> u) {
            const double w = donsker_weight(spec, z, hist, opts.method, opts.quadrature);
            if (j < n) {
                if (perf.h) {
                    for (std::size_t i = 0; i < nn; ++i) {
                        const double t = tg.time(j), x = g.x(i);
                        f[i] = y[i] * detail::central_diff([&](double v) { return perf.h(t, x, v, u[0], z); }, y[i]);
                    }
                    total += tg.dt() * w * masked_integral(f);
                }
                hist.advance(spec, full, j, j + 1);
            } else if (perf.k) {
                for (std::size_t i = lo; i <= hi; ++i) f[i] = perf.dk_dy(g.x(i), y[i], z) * y[i];
                total += w * masked_integral(f);
            }
        }, yk, k);
        return total;
    };

    struct Job {
        std::size_t path, step;
    };
    std::vector<Job> jobs;
    for (std::size_t p = 0; p < opts.n_outer_paths; ++p)
        for (std::size_t k : opts.sample_steps) jobs.push_back({p, k});

    StationarityReport report;
    report.threshold = opts.threshold;
    report.seed = opts.seed;
    report.samples = parallel_map<StationaritySample>(jobs.size(), opts.threads, [&](std::size_t jdx) {
        const Job job = jobs[jdx];
        const PathBundle outer = sample_bundle(tg, prob.coeffs.levy, opts.seed, job.path, 0);
        std::vector<double> yk;
        double uk = 0.0;
        sweep_forward(solver, control, outer, [&](std::size_t j, std::span<const double> y, std::span<const double> u) {
            if (j == job.step) {
                yk.assign(y.begin(), y.end());
                uk = u[0];
            }
        });
        const HistorySnapshot hist_k = HistorySnapshot::from_bundle(spec, outer, job.step);
        const double w_k = perf.h ? donsker_weight(spec, z, hist_k, opts.method, opts.quadrature) : 0.0;
        const double t = tg.time(job.step);
        std::vector<double> ysq(nn);
        for (std::size_t i = 0; i < nn; ++i) ysq[i] = yk[i] * yk[i];
        const double norm2 = masked_integral(ysq);
        const TimeGrid tail_grid(t, tg.t_end(), n - job.step);
        const std::uint64_t stream = 1 + jdx;
        std::vector<double> stats(opts.n_continuations);
        std::vector<double> b_field(nn), p_field(nn), q_field(nn), dh(nn);
        for (std::size_t c = 0; c < opts.n_continuations; ++c) {
            const PathBundle tail = sample_bundle(tail_grid, prob.coeffs.levy, opts.seed, c, stream);
            const PathBundle full = outer.spliced(job.step, tail);
            const double P = adjoint_sample(full, job.step, yk);
            double S = 0.0;
            {
                const double Pp = adjoint_sample(full.bumped(job.step, opts.bump), job.step, yk);
                const double Pm = adjoint_sample(full.bumped(job.step, -opts.bump), job.step, yk);
                const double gamma = (Pp - Pm) / (2.0 * opts.bump);
                for (std::size_t i = 0; i < nn; ++i) {
                    p_field[i] = norm2 > 0.0 ? P * yk[i] / norm2 : 0.0;
                    b_field[i] = p_field[i] * eval_or_zero(prob.coeffs.b, t, g.x(i), yk[i], uk, z);
                }
                const double q_tilde = gamma - masked_integral(b_field);
                for (std::size_t i = 0; i < nn; ++i) q_field[i] = norm2 > 0.0 ? q_tilde * yk[i] / norm2 : 0.0;
                for (std::size_t i = 0; i < nn; ++i) {
                    const AdjointTriple adj{p_field[i], q_field[i], {}};
                    auto H = [&](double v) {
                        return hamiltonian(t, i, yk[i], yk, v, z, adj, w_k, prob.coeffs, prob.op, perf, g);
                    };
                    const double e = opts.control_fd * std::max(1.0, std::abs(uk));
                    dh[i] = (H(uk + e) - H(uk - e)) / (2.0 * e);
                }
                S = masked_integral(dh);
            }
            stats[c] = S;
        }
        const PerformanceEstimate est = summarize(stats);
        return StationaritySample{job.path, job.step, t, est.mean, est.stderr};
    });
    return report;
}

}  // namespace insider
