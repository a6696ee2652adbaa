#pragma once

// Partially observed signal and its unnormalized conditional density:
//
//   dX = alpha(X, R, u) dt + beta(X, R, u) dv + int gamma N~(dt, dzeta),   dR = h(X) dt + dw,
//   dy = L*_{R,u} y dt + h y dR                                             (Zakai),
//
// integrated by splitting: an implicit Fokker-Planck step with the exact transpose of
// the generator stencil, then the pointwise likelihood factor exp(h dR - h^2 dt / 2).
// Oracles: Kalman-Bucy recursion for linear-Gaussian models and a bootstrap particle filter.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <numbers>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "insider/error.hpp"
#include "insider/linalg.hpp"
#include "insider/montecarlo.hpp"
#include "insider/noise.hpp"
#include "insider/spde.hpp"

namespace insider {

/// dx * sum_i f_i; the quantity the zero-flux stencil conserves exactly.
inline double grid_mass(const SpatialGrid& g, std::span<const double> f) {
    double s = 0.0;
    for (double v : f) s += v;
    return s * g.dx();
}

/// u(t, R(t)): control of the signal, allowed to depend on the observation so far.
using SignalControl = std::function<double(double t, double r)>;

struct SignalModel {
    std::function<double(double x, double r, double u)> alpha;  ///< empty = 0
    std::function<double(double x, double r, double u)> beta;   ///< empty = 0
    std::function<double(double x, double r, double u, double mark)> gamma;  ///< empty = 0
    LevySpec levy;
    std::function<double(double x)> h_obs;  ///< empty = 0
    std::function<double(double x, double z)> F_init;
    /// Truncated signal state space carrying the densities.
    SpatialGrid state_grid{-5.0, 5.0, 200};
    /// X(0) from a standard normal draw; defaults to inverse-CDF sampling of F_init on the grid.
    std::function<double(double normal, double z)> initial_sampler;
    /// True when alpha and beta ignore (r, u): the Fokker-Planck factorization is then reused.
    bool autonomous = false;

    double alpha_at(double x, double r, double u) const { return alpha ? alpha(x, r, u) : 0.0; }
    double beta_at(double x, double r, double u) const { return beta ? beta(x, r, u) : 0.0; }
    double h_at(double x) const { return h_obs ? h_obs(x) : 0.0; }

    /// F_init integrates to 1 and h is bounded on the grid (the Novikov surrogate).
    void validate(double z, double tol = 1e-8) const {
        if (!F_init) throw std::invalid_argument("SignalModel: F_init is required");
        std::vector<double> f(state_grid.n_nodes());
        for (std::size_t i = 0; i < f.size(); ++i) {
            f[i] = F_init(state_grid.x(i), z);
            if (!(f[i] >= 0.0)) throw std::invalid_argument("SignalModel: F_init must be nonnegative");
            if (!std::isfinite(h_at(state_grid.x(i)))) throw std::invalid_argument("SignalModel: h_obs unbounded on grid");
        }
        const double mass = grid_mass(state_grid, f);
        if (std::abs(mass - 1.0) > tol)
            throw std::invalid_argument("SignalModel: F_init has mass " + std::to_string(mass) + " on the grid");
    }

    double sample_initial(double normal, double z) const {
        if (initial_sampler) return initial_sampler(normal, z);
        const SpatialGrid& g = state_grid;
        std::vector<double> cdf(g.n_nodes(), 0.0);
        for (std::size_t i = 1; i < cdf.size(); ++i)
            cdf[i] = cdf[i - 1] + 0.5 * g.dx() * (F_init(g.x(i - 1), z) + F_init(g.x(i), z));
        const double u = 0.5 * std::erfc(-normal / std::numbers::sqrt2) * cdf.back();
        const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
        if (it == cdf.begin()) return g.x_left();
        if (it == cdf.end()) return g.x_right();
        const std::size_t j = static_cast<std::size_t>(it - cdf.begin());
        const double span = cdf[j] - cdf[j - 1];
        const double w = span > 0.0 ? (u - cdf[j - 1]) / span : 0.0;
        return g.x(j - 1) + w * g.dx();
    }
};

struct ObservationPath {
    TimeGrid grid;
    std::vector<double> increments;  ///< dR_k

    std::vector<double> values() const {
        std::vector<double> r(increments.size() + 1, 0.0);
        for (std::size_t k = 0; k < increments.size(); ++k) r[k + 1] = r[k] + increments[k];
        return r;
    }

    ObservationPath coarsened(std::size_t factor) const {
        if (factor == 0 || grid.n_steps() % factor != 0)
            throw std::invalid_argument("ObservationPath::coarsened: factor must divide n_steps");
        ObservationPath o{TimeGrid(grid.t_start(), grid.t_end(), grid.n_steps() / factor), {}};
        o.increments.assign(o.grid.n_steps(), 0.0);
        for (std::size_t k = 0; k < increments.size(); ++k) o.increments[k / factor] += increments[k];
        return o;
    }
};

struct SignalPath {
    std::vector<double> x;  ///< X(t_k), k = 0..n
};

/// Euler-Maruyama for X driven by `v`, and dR_k = h(X_k) dt + dw_k with dw from `w`.
inline std::pair<SignalPath, ObservationPath> simulate_signal_observation(const SignalModel& model,
                                                                          const SignalControl& control, double z,
                                                                          const PathBundle& v, const PathBundle& w) {
    const TimeGrid& tg = v.grid();
    if (w.grid().n_steps() != tg.n_steps() || w.grid().dt() != tg.dt())
        throw std::invalid_argument("simulate_signal_observation: bundles must share a grid");
    SignalPath s;
    ObservationPath o{tg, std::vector<double>(tg.n_steps())};
    s.x.resize(tg.n_steps() + 1);
    double x = model.sample_initial(v.auxiliary_normal(), z);
    double r = 0.0;
    s.x[0] = x;
    for (std::size_t k = 0; k < tg.n_steps(); ++k) {
        const double t = tg.time(k);
        const double u = control ? control(t, r) : 0.0;
        o.increments[k] = model.h_at(x) * tg.dt() + w.increment(k);
        double next = x + model.alpha_at(x, r, u) * tg.dt() + model.beta_at(x, r, u) * v.increment(k);
        if (model.gamma) next += v.compensated_jump(k, model.levy, [&](double m) { return model.gamma(x, r, u, m); });
        r += o.increments[k];
        x = next;
        s.x[k + 1] = x;
    }
    return {s, o};
}

/// K_k = exp(sum_{j<k} h(X_j) dR_j - 1/2 h(X_j)^2 dt).
inline std::vector<double> girsanov_weight(const SignalModel& model, const SignalPath& signal,
                                           const ObservationPath& obs) {
    if (signal.x.size() != obs.increments.size() + 1)
        throw std::invalid_argument("girsanov_weight: signal and observation grids differ");
    std::vector<double> K(signal.x.size(), 1.0);
    double e = 0.0;
    const double dt = obs.grid.dt();
    for (std::size_t k = 0; k < obs.increments.size(); ++k) {
        const double hv = model.h_at(signal.x[k]);
        e += hv * obs.increments[k] - 0.5 * hv * hv * dt;
        K[k + 1] = std::exp(e);
    }
    return K;
}

struct UnnormalizedDensity {
    SpatialGrid grid;
    std::vector<double> values;
    double t = 0.0;
    /// Sum of negative parts removed by clamping, accumulated over steps.
    double clamped_defect = 0.0;

    double mass() const { return grid_mass(grid, values); }
    /// Share of the mass sitting in the two outermost cells (truncation telemetry).
    double boundary_mass_fraction() const {
        const double m = mass();
        if (!(m > 0.0)) return 0.0;
        const std::size_t n = grid.n_cells();
        const double edge = grid.dx() * (values[0] + values[1] + values[n - 1] + values[n]);
        return edge / m;
    }
};

inline UnnormalizedDensity initial_density(const SignalModel& model, double z) {
    UnnormalizedDensity d{model.state_grid, std::vector<double>(model.state_grid.n_nodes()), 0.0, 0.0};
    for (std::size_t i = 0; i < d.values.size(); ++i) d.values[i] = model.F_init(model.state_grid.x(i), z);
    return d;
}

/// Generator stencil L phi = alpha phi' + 1/2 beta^2 phi'' with zero-flux ghost nodes at the ends,
/// so every row sums to 0. Where |alpha| dx > beta^2 the first derivative is upwinded to keep
/// the off-diagonals nonnegative.
inline GridMatrix generator_matrix(const SignalModel& model, double r, double u) {
    const SpatialGrid& g = model.state_grid;
    const std::size_t n = g.n_nodes();
    const double dx = g.dx();
    GridMatrix L(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = g.x(i);
        const double a = model.alpha_at(x, r, u);
        const double b = model.beta_at(x, r, u);
        const double d = 0.5 * b * b / (dx * dx);
        if (i == 0) {
            L.diag(i) = -2.0 * d;
            L.upper(i) = 2.0 * d;
            continue;
        }
        if (i + 1 == n) {
            L.lower(i) = 2.0 * d;
            L.diag(i) = -2.0 * d;
            continue;
        }
        double lo = d, up = d;
        if (std::abs(a) * dx <= b * b) {
            lo -= a / (2.0 * dx);
            up += a / (2.0 * dx);
        } else if (a > 0.0) {
            up += a / dx;
        } else {
            lo -= a / dx;
        }
        L.lower(i) = lo;
        L.upper(i) = up;
        L.diag(i) = -(lo + up);
    }
    return L;
}

/// Fokker-Planck half step with caching for autonomous models.
class ZakaiSolver {
public:
    explicit ZakaiSolver(SignalModel model) : model_(std::move(model)) {}

    const SignalModel& model() const { return model_; }

    /// One splitting step over dt with control u, current observation value r and increment dR.
    UnnormalizedDensity step(const UnnormalizedDensity& y, double u, double r, double dR, double dt) const {
        if (y.values.size() != model_.state_grid.n_nodes()) throw std::invalid_argument("zakai_step: grid mismatch");
        std::vector<double> next = solver(r, u, dt).solve(y.values);
        UnnormalizedDensity out{y.grid, std::move(next), y.t + dt, y.clamped_defect};
        for (std::size_t i = 0; i < out.values.size(); ++i) {
            const double hv = model_.h_at(y.grid.x(i));
            double v = out.values[i] * std::exp(hv * dR - 0.5 * hv * hv * dt);
            if (v < 0.0) {
                out.clamped_defect += -v * y.grid.dx();
                v = 0.0;
            }
            out.values[i] = v;
        }
        return out;
    }

private:
    GridSolver solver(double r, double u, double dt) const {
        if (model_.autonomous) {
            std::lock_guard<std::mutex> lock(*mutex_);
            for (const auto& [cdt, s] : cache_)
                if (cdt == dt) return *s;
            cache_.emplace_back(dt, std::make_shared<GridSolver>(generator_matrix(model_, 0.0, 0.0).transposed().implicit_system(dt)));
            return *cache_.back().second;
        }
        return GridSolver(generator_matrix(model_, r, u).transposed().implicit_system(dt));
    }

    SignalModel model_;
    mutable std::vector<std::pair<double, std::shared_ptr<GridSolver>>> cache_;
    std::shared_ptr<std::mutex> mutex_ = std::make_shared<std::mutex>();
};

inline UnnormalizedDensity zakai_step(const UnnormalizedDensity& y, const SignalModel& model, double u, double r,
                                      double dR, double dt) {
    return ZakaiSolver(model).step(y, u, r, dR, dt);
}

/// Densities at every node of the observation grid, starting from F_init(., z).
inline std::vector<UnnormalizedDensity> zakai_solve(const ZakaiSolver& solver, const SignalControl& control, double z,
                                                    const ObservationPath& obs) {
    std::vector<UnnormalizedDensity> out;
    out.reserve(obs.increments.size() + 1);
    out.push_back(initial_density(solver.model(), z));
    out.back().t = obs.grid.t_start();
    double r = 0.0;
    for (std::size_t k = 0; k < obs.increments.size(); ++k) {
        const double t = obs.grid.time(k);
        const double u = control ? control(t, r) : 0.0;
        out.push_back(solver.step(out.back(), u, r, obs.increments[k], obs.grid.dt()));
        out.back().t = obs.grid.time(k + 1);
        r += obs.increments[k];
    }
    return out;
}

inline constexpr double kMassFloor = 1e-300;

struct NormalizedDensity {
    std::vector<double> density;
    double mass = 0.0;
};

inline NormalizedDensity normalize(const UnnormalizedDensity& y, double eps = kMassFloor) {
    const double m = y.mass();
    if (!(m > eps)) throw MassCollapse("unnormalized density has mass " + std::to_string(m));
    NormalizedDensity n{y.values, m};
    for (double& v : n.density) v /= m;
    return n;
}

/// Posterior mean and variance of X from a grid density.
inline std::pair<double, double> density_moments(const SpatialGrid& g, std::span<const double> y) {
    std::vector<double> f(y.size());
    const double m0 = grid_mass(g, y);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = g.x(i) * y[i];
    const double mean = grid_mass(g, f) / m0;
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = (g.x(i) - mean) * (g.x(i) - mean) * y[i];
    return {mean, grid_mass(g, f) / m0};
}

/// CSV with columns t, x, unnormalized, normalized.
inline void write_filter_csv(std::ostream& os, const std::vector<UnnormalizedDensity>& snaps, std::size_t stride = 1) {
    os << "t,x,unnormalized,normalized\n";
    char buf[128];
    for (std::size_t k = 0; k < snaps.size(); k += std::max<std::size_t>(stride, 1)) {
        const auto& s = snaps[k];
        const double m = s.mass();
        for (std::size_t i = 0; i < s.values.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", s.t, s.grid.x(i), s.values[i],
                          m > 0.0 ? s.values[i] / m : 0.0);
            os << buf;
        }
    }
}

struct LinearGaussianModel {
    double a = 0.0;  ///< dX = a X dt + b dv
    double b = 0.0;
    double c = 0.0;  ///< dR = c X dt + dw
    double m0 = 0.0;
    double P0 = 1.0;
};

struct KalmanBucyPath {
    std::vector<double> mean;
    std::vector<double> variance;
};

/// Exact discrete recursion at the observation resolution: exact Gaussian prediction over dt,
/// then the update with dR ~ N(c dt X, dt).
inline KalmanBucyPath kalman_bucy_oracle(const LinearGaussianModel& lg, const ObservationPath& obs) {
    const double dt = obs.grid.dt();
    const double phi = std::exp(lg.a * dt);
    const double q = lg.a != 0.0 ? lg.b * lg.b * (phi * phi - 1.0) / (2.0 * lg.a) : lg.b * lg.b * dt;
    KalmanBucyPath out;
    out.mean.assign(1, lg.m0);
    out.variance.assign(1, lg.P0);
    double m = lg.m0, P = lg.P0;
    const double H = lg.c * dt;
    for (double dR : obs.increments) {
        m *= phi;
        P = phi * phi * P + q;
        const double S = H * H * P + dt;
        const double gain = P * H / S;
        m += gain * (dR - H * m);
        P *= 1.0 - gain * H;
        out.mean.push_back(m);
        out.variance.push_back(P);
    }
    return out;
}

/// Stationary variance of the continuous filter: the positive root of 2aP + b^2 - c^2 P^2 = 0.
inline double kalman_bucy_steady_variance(const LinearGaussianModel& lg) {
    if (lg.c == 0.0) {
        if (!(lg.a < 0.0)) throw std::invalid_argument("no steady state without observations unless a < 0");
        return -lg.b * lg.b / (2.0 * lg.a);
    }
    const double c2 = lg.c * lg.c;
    return (lg.a + std::sqrt(lg.a * lg.a + c2 * lg.b * lg.b)) / c2;
}

/// The linear-Gaussian benchmark as a SignalModel on a truncated grid.
inline SignalModel linear_gaussian_signal(const LinearGaussianModel& lg, SpatialGrid grid) {
    SignalModel m;
    const double a = lg.a, b = lg.b, c = lg.c, m0 = lg.m0, P0 = lg.P0;
    m.alpha = [a](double x, double, double) { return a * x; };
    m.beta = [b](double, double, double) { return b; };
    m.h_obs = [c](double x) { return c * x; };
    m.F_init = [m0, P0](double x, double) {
        return std::exp(-0.5 * (x - m0) * (x - m0) / P0) / std::sqrt(2.0 * std::numbers::pi * P0);
    };
    m.initial_sampler = [m0, P0](double normal, double) { return m0 + std::sqrt(P0) * normal; };
    m.state_grid = grid;
    m.autonomous = true;
    return m;
}

struct ParticleFilterOptions {
    std::size_t n_particles = 10000;
    std::size_t replicates = 1;
    std::size_t substeps = 1;            ///< Euler substeps per observation step
    double resample_threshold = 0.5;     ///< resample when ESS < threshold * N
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::function<double(double)> phi;   ///< optional test function
};

struct ParticleFilterResult {
    std::vector<double> mean;        ///< E[X_t | R_t], averaged over replicates
    std::vector<double> mean_stderr; ///< across replicates (0 with one replicate)
    std::vector<double> second_moment;
    std::vector<double> phi_mean;    ///< E[phi(X_t) | R_t] when phi is set
    std::vector<double> mass;        ///< product of mean incremental weights, estimates E~[K_t | R_t]
    std::vector<double> mass_stderr;
    double min_ess = std::numeric_limits<double>::infinity();
    std::vector<double> final_particles;  ///< equally weighted after a final resample (first replicate)
};

namespace detail {

inline void systematic_resample(std::vector<double>& x, const std::vector<double>& w, double u0) {
    const std::size_t n = x.size();
    std::vector<double> out(n);
    double cum = w[0];
    std::size_t j = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double target = (static_cast<double>(i) + u0) / static_cast<double>(n);
        while (target > cum && j + 1 < n) cum += w[++j];
        out[i] = x[j];
    }
    x.swap(out);
}

struct ReplicateOutput {
    std::vector<double> mean, second, phi, log_mass;
    double min_ess = std::numeric_limits<double>::infinity();
    std::vector<double> final_particles;
};

inline ReplicateOutput run_particle_replicate(const SignalModel& model, const SignalControl& control, double z,
                                              const ObservationPath& obs, const ParticleFilterOptions& opts,
                                              std::size_t rep) {
    const std::size_t N = opts.n_particles;
    const std::size_t n = obs.increments.size();
    const double dt = obs.grid.dt();
    const std::size_t sub = std::max<std::size_t>(opts.substeps, 1);
    const double h = dt / static_cast<double>(sub);
    CounterRng init(opts.seed, rep, 0, Channel::auxiliary);
    CounterRng noise(opts.seed, rep, 0, Channel::brownian);
    CounterRng jumps(opts.seed, rep, 0, Channel::jumps);
    CounterRng resample(opts.seed, rep, 1, Channel::auxiliary);
    std::vector<double> x(N), w(N, 1.0 / static_cast<double>(N)), logw(N);
    for (auto& v : x) v = model.sample_initial(init.normal(), z);
    ReplicateOutput out;
    auto record = [&] {
        double m = 0.0, s = 0.0, p = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            m += w[i] * x[i];
            s += w[i] * x[i] * x[i];
            if (opts.phi) p += w[i] * opts.phi(x[i]);
        }
        out.mean.push_back(m);
        out.second.push_back(s);
        out.phi.push_back(p);
    };
    record();
    out.log_mass.push_back(0.0);
    double r = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const double t = obs.grid.time(k);
        const double u = control ? control(t, r) : 0.0;
        const double sh = std::sqrt(h);
        for (std::size_t i = 0; i < N; ++i) {
            double xi = x[i];
            for (std::size_t s = 0; s < sub; ++s) {
                double next = xi + model.alpha_at(xi, r, u) * h + model.beta_at(xi, r, u) * sh * noise.normal();
                if (model.gamma) {
                    for (const auto& a : model.levy.atoms()) {
                        const std::size_t cnt = jumps.poisson(a.rate * h);
                        next += static_cast<double>(cnt) * model.gamma(xi, r, u, a.mark) - h * a.rate * model.gamma(xi, r, u, a.mark);
                    }
                }
                xi = next;
            }
            x[i] = xi;
        }
        const double dR = obs.increments[k];
        double maxlog = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < N; ++i) {
            const double hv = model.h_at(x[i]);
            logw[i] = hv * dR - 0.5 * hv * hv * dt;
            maxlog = std::max(maxlog, logw[i]);
        }
        // Incremental mass: sum_i w_i exp(logw_i), with w summing to 1.
        double inc = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            w[i] *= std::exp(logw[i] - maxlog);
            inc += w[i];
        }
        out.log_mass.push_back(out.log_mass.back() + std::log(inc) + maxlog);
        double ss = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            w[i] /= inc;
            ss += w[i] * w[i];
        }
        const double ess = 1.0 / ss;
        out.min_ess = std::min(out.min_ess, ess);
        if (ess < 2.0) throw WeightDegeneracy("effective sample size " + std::to_string(ess) + " < 2 at step " + std::to_string(k));
        record();
        if (ess < opts.resample_threshold * static_cast<double>(N)) {
            systematic_resample(x, w, resample.uniform());
            std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(N));
        }
        r += dR;
    }
    if (rep == 0) {
        out.final_particles = x;
        systematic_resample(out.final_particles, w, resample.uniform());
    }
    return out;
}

}  // namespace detail

/// Bootstrap filter with systematic resampling. Standard errors come from independent replicates.
inline ParticleFilterResult particle_filter_oracle(const SignalModel& model, const SignalControl& control, double z,
                                                   const ObservationPath& obs, const ParticleFilterOptions& opts) {
    if (opts.n_particles < 100) throw std::invalid_argument("particle_filter_oracle: n_particles must be >= 100");
    const std::size_t R = std::max<std::size_t>(opts.replicates, 1);
    const auto reps = parallel_map<detail::ReplicateOutput>(
        R, opts.threads, [&](std::size_t r) { return detail::run_particle_replicate(model, control, z, obs, opts, r); });
    ParticleFilterResult res;
    const std::size_t steps = obs.increments.size() + 1;
    auto across = [&](auto get, std::vector<double>& mean, std::vector<double>* se) {
        mean.assign(steps, 0.0);
        if (se) se->assign(steps, 0.0);
        for (std::size_t k = 0; k < steps; ++k) {
            std::vector<double> v(R);
            for (std::size_t r = 0; r < R; ++r) v[r] = get(reps[r], k);
            const PerformanceEstimate e = summarize(v);
            mean[k] = e.mean;
            if (se) (*se)[k] = e.stderr;
        }
    };
    across([](const detail::ReplicateOutput& o, std::size_t k) { return o.mean[k]; }, res.mean, &res.mean_stderr);
    across([](const detail::ReplicateOutput& o, std::size_t k) { return o.second[k]; }, res.second_moment, nullptr);
    if (opts.phi) across([](const detail::ReplicateOutput& o, std::size_t k) { return o.phi[k]; }, res.phi_mean, nullptr);
    across([](const detail::ReplicateOutput& o, std::size_t k) { return std::exp(o.log_mass[k]); }, res.mass,
           &res.mass_stderr);
    for (const auto& o : reps) res.min_ess = std::min(res.min_ess, o.min_ess);
    res.final_particles = reps.front().final_particles;
    return res;
}

/// L1 distance between the CDF of a grid density and the empirical CDF of equally weighted particles.
inline double cdf_l1_gap(const SpatialGrid& g, std::span<const double> density, std::vector<double> particles) {
    std::sort(particles.begin(), particles.end());
    const double m = grid_mass(g, density);
    double cdf = 0.0, gap = 0.0;
    std::size_t j = 0;
    for (std::size_t i = 0; i < g.n_nodes(); ++i) {
        if (i > 0) cdf += 0.5 * g.dx() * (density[i - 1] + density[i]) / m;
        while (j < particles.size() && particles[j] <= g.x(i)) ++j;
        const double emp = static_cast<double>(j) / static_cast<double>(particles.size());
        gap += std::abs(cdf - emp) * (i == 0 || i == g.n_cells() ? 0.5 : 1.0) * g.dx();
    }
    return gap;
}

struct FilterPerformance {
    std::function<double(double t, double x)> f;  ///< running profit; empty = 0
    std::function<double(double x)> g;            ///< bequest; empty = 0
};

/// E~[ sum_k dt int f y_k dx + int g y_T dx ] with R simulated as a reference-measure Brownian motion.
inline PerformanceEstimate transformed_performance(const SignalModel& model, const SignalControl& control,
                                                   const FilterPerformance& perf, double z, const TimeGrid& tg,
                                                   std::size_t n_paths, std::uint64_t seed, std::size_t threads = 1) {
    const ZakaiSolver solver(model);
    const SpatialGrid& g = model.state_grid;
    const auto samples = parallel_map<double>(n_paths, threads, [&](std::size_t p) {
        const PathBundle w = sample_bundle(tg, LevySpec{}, seed, p, 1);
        ObservationPath obs{tg, std::vector<double>(w.brownian_increments().begin(), w.brownian_increments().end())};
        UnnormalizedDensity y = initial_density(model, z);
        double total = 0.0, r = 0.0;
        std::vector<double> f(g.n_nodes());
        for (std::size_t k = 0; k <= tg.n_steps(); ++k) {
            const double t = tg.time(k);
            if (k < tg.n_steps()) {
                if (perf.f) {
                    for (std::size_t i = 0; i < f.size(); ++i) f[i] = perf.f(t, g.x(i)) * y.values[i];
                    total += tg.dt() * grid_mass(g, f);
                }
                const double u = control ? control(t, r) : 0.0;
                y = solver.step(y, u, r, obs.increments[k], tg.dt());
                r += obs.increments[k];
            } else if (perf.g) {
                for (std::size_t i = 0; i < f.size(); ++i) f[i] = perf.g(g.x(i)) * y.values[i];
                total += grid_mass(g, f);
            }
        }
        return total;
    });
    return summarize(samples);
}

/// The same functional evaluated directly under P: E[ sum_k dt f(t_k, X_k) + g(X_T) ].
inline PerformanceEstimate direct_performance(const SignalModel& model, const SignalControl& control,
                                              const FilterPerformance& perf, double z, const TimeGrid& tg,
                                              std::size_t n_paths, std::uint64_t seed, std::size_t threads = 1) {
    const auto samples = parallel_map<double>(n_paths, threads, [&](std::size_t p) {
        const PathBundle v = sample_bundle(tg, model.levy, seed, p, 0);
        const PathBundle w = sample_bundle(tg, LevySpec{}, seed, p, 1);
        const auto [sig, obs] = simulate_signal_observation(model, control, z, v, w);
        double total = 0.0;
        if (perf.f)
            for (std::size_t k = 0; k < tg.n_steps(); ++k) total += tg.dt() * perf.f(tg.time(k), sig.x[k]);
        if (perf.g) total += perf.g(sig.x.back());
        return total;
    });
    return summarize(samples);
}

struct CoercivityResult {
    double lhs = 0.0;  ///< 2 <-L*_pi y, y>
    double rhs = 0.0;  ///< pi^2 beta^2 |y'|^2
    double ratio() const { return rhs != 0.0 ? lhs / rhs : (lhs == 0.0 ? 1.0 : INFINITY); }
};

/// Discrete energy identity for L*_pi y = -pi alpha y' + 1/2 pi^2 beta^2 y'' with y = 0 on the boundary.
/// L*_pi is the transpose of the central-difference generator; |y'|^2 uses central differences
/// at interior nodes.
inline CoercivityResult coercivity_check(std::span<const double> y, const SpatialGrid& g, double pi, double beta_vol,
                                         double alpha = 1.0, double tol = 0.0) {
    if (y.size() != g.n_nodes()) throw std::invalid_argument("coercivity_check: size mismatch");
    if (std::abs(y.front()) > tol || std::abs(y.back()) > tol)
        throw BoundaryViolation("coercivity_check: y must vanish at the boundary");
    const std::size_t n = g.n_nodes();
    const double dx = g.dx();
    GridMatrix L(n);
    const double a = pi * alpha;
    const double d = 0.5 * pi * pi * beta_vol * beta_vol / (dx * dx);
    for (std::size_t i = 1; i + 1 < n; ++i) {
        L.lower(i) = d - a / (2.0 * dx);
        L.diag(i) = -2.0 * d;
        L.upper(i) = d + a / (2.0 * dx);
    }
    const std::vector<double> ly = L.transposed().apply(y);
    CoercivityResult res;
    for (std::size_t i = 0; i < n; ++i) res.lhs -= 2.0 * ly[i] * y[i] * dx;
    double grad = 0.0;
    for (std::size_t i = 1; i + 1 < n; ++i) {
        const double dy = (y[i + 1] - y[i - 1]) / (2.0 * dx);
        grad += dy * dy * dx;
    }
    res.rhs = pi * pi * beta_vol * beta_vol * grad;
    return res;
}

/// pi^ = -alpha E[p'] / (beta^2 E[p'']) under a normalized posterior density on the grid.
inline double feedback_pi(const std::function<double(double)>& dp, const std::function<double(double)>& d2p,
                          const SpatialGrid& g, std::span<const double> posterior, double alpha, double beta,
                          double eps = 1e-12) {
    std::vector<double> f1(g.n_nodes()), f2(g.n_nodes());
    for (std::size_t i = 0; i < g.n_nodes(); ++i) {
        f1[i] = dp(g.x(i)) * posterior[i];
        f2[i] = d2p(g.x(i)) * posterior[i];
    }
    const double num = grid_mass(g, f1);
    const double den = beta * beta * grid_mass(g, f2);
    if (!(std::abs(den) >= eps)) throw DegenerateCurvature("beta^2 E[p''] is below 1e-12 in magnitude");
    return -alpha * num / den;
}

}  // namespace insider
