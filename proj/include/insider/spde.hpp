#pragma once

// Controlled, z-parametrized forward SPDE on an interval with Dirichlet data:
//
//   dY = [A_u Y + a] dt + b dB + int c N~(dt, dzeta),   Y(0) = xi,   Y = theta on the boundary,
//
// with A_u = s(t,x,u,z) d^2/dx^2 + f(t,x,u,z) d/dx (+ optional nonlocal jump part).
// Time stepping is semi-implicit Euler-Maruyama: implicit in A_u, explicit in a, b, c.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "insider/error.hpp"
#include "insider/linalg.hpp"
#include "insider/noise.hpp"

namespace insider {

class SpatialGrid {
public:
    SpatialGrid() = default;
    SpatialGrid(double x_left, double x_right, std::size_t n_cells)
        : x_left_(x_left), x_right_(x_right), n_cells_(n_cells) {
        if (n_cells < 2) throw std::invalid_argument("SpatialGrid: n_cells must be >= 2");
        if (!(x_right > x_left)) throw std::invalid_argument("SpatialGrid: x_right must exceed x_left");
    }

    double x_left() const { return x_left_; }
    double x_right() const { return x_right_; }
    std::size_t n_cells() const { return n_cells_; }
    std::size_t n_nodes() const { return n_cells_ + 1; }
    double dx() const { return (x_right_ - x_left_) / static_cast<double>(n_cells_); }
    double x(std::size_t i) const { return i == n_cells_ ? x_right_ : x_left_ + static_cast<double>(i) * dx(); }
    bool is_boundary(std::size_t i) const { return i == 0 || i == n_cells_; }

    std::vector<double> nodes() const {
        std::vector<double> v(n_nodes());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = x(i);
        return v;
    }

    /// Discrete L2 pairing dx * sum_i f_i g_i.
    double inner(std::span<const double> f, std::span<const double> g) const {
        double s = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) s += f[i] * g[i];
        return s * dx();
    }

private:
    double x_left_ = 0.0;
    double x_right_ = 1.0;
    std::size_t n_cells_ = 2;
};

/// Quadrature over D used by performance functionals. `interior` drops the two boundary
/// nodes, for integrands that are undefined where Dirichlet data pins the state (ln 0).
enum class SpatialRule { trapezoid, interior };

inline double integrate(const SpatialGrid& g, std::span<const double> f, SpatialRule rule = SpatialRule::trapezoid) {
    const std::size_t n = g.n_cells();
    double s = 0.0;
    for (std::size_t i = 1; i < n; ++i) s += f[i];
    if (rule == SpatialRule::trapezoid) s += 0.5 * (f[0] + f[n]);
    return s * g.dx();
}

using SpaceTimeCoeff = std::function<double(double t, double x, double u, double z)>;

struct OperatorSpec {
    SpaceTimeCoeff second_coeff;
    SpaceTimeCoeff first_coeff;
    /// Nonlocal part sum_i lambda_i [phi(x + gamma(t,x,u,z,zeta_i)) - phi(x)], phi interpolated linearly.
    std::function<double(double t, double x, double u, double z, double mark)> jump_shift;
    LevySpec levy;
    /// Hints for factorization reuse across steps.
    bool time_homogeneous = false;
    bool depends_on_control = true;

    /// (1/2) d^2/dx^2.
    static OperatorSpec half_laplacian() {
        OperatorSpec op;
        op.second_coeff = [](double, double, double, double) { return 0.5; };
        op.time_homogeneous = true;
        op.depends_on_control = false;
        return op;
    }

    bool reusable() const { return time_homogeneous && !depends_on_control; }
};

namespace detail {

/// Linear-interpolation weights of the point x on the grid (clamped to D).
inline void interpolation_weights(const SpatialGrid& g, double x, std::size_t& j, double& w_right) {
    const double xc = std::min(std::max(x, g.x_left()), g.x_right());
    double pos = (xc - g.x_left()) / g.dx();
    j = static_cast<std::size_t>(std::floor(pos));
    if (j >= g.n_cells()) j = g.n_cells() - 1;
    w_right = pos - static_cast<double>(j);
}

inline void check_parabolic(double s, double t, double x) {
    if (!(s >= 0.0))
        throw NonParabolic("second-order coefficient is negative (" + std::to_string(s) + ") at t=" +
                           std::to_string(t) + ", x=" + std::to_string(x));
}

}  // namespace detail

/// Discretized A_u at time t. `u` holds one control value per node (or a single value for
/// x-independent controls). Boundary rows are left zero.
inline GridMatrix assemble_operator(const OperatorSpec& op, const SpatialGrid& g, double t, std::span<const double> u,
                                    double z) {
    const std::size_t n = g.n_nodes();
    if (u.size() != n && u.size() != 1) throw std::invalid_argument("assemble_operator: control size mismatch");
    auto u_at = [&](std::size_t i) { return u.size() == 1 ? u[0] : u[i]; };
    GridMatrix m(n);
    const double dx = g.dx();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = g.x(i);
        const double s = op.second_coeff ? op.second_coeff(t, x, u_at(i), z) : 0.0;
        detail::check_parabolic(s, t, x);
        if (g.is_boundary(i)) continue;
        const double f = op.first_coeff ? op.first_coeff(t, x, u_at(i), z) : 0.0;
        m.lower(i) = s / (dx * dx) - f / (2.0 * dx);
        m.diag(i) = -2.0 * s / (dx * dx);
        m.upper(i) = s / (dx * dx) + f / (2.0 * dx);
    }
    if (op.jump_shift && !op.levy.empty()) {
        for (std::size_t i = 1; i + 1 < n; ++i) {
            for (const auto& a : op.levy.atoms()) {
                std::size_t j = 0;
                double w = 0.0;
                detail::interpolation_weights(g, g.x(i) + op.jump_shift(t, g.x(i), u_at(i), z, a.mark), j, w);
                m.dense(i, j) += a.rate * (1.0 - w);
                m.dense(i, j + 1) += a.rate * w;
                m.dense(i, i) -= a.rate;
            }
        }
    }
    return m;
}

/// (A_u phi)(x_i) for a single interior node with scalar control u.
inline double apply_operator_row(const OperatorSpec& op, const SpatialGrid& g, double t, double u, double z,
                                 std::size_t i, std::span<const double> phi) {
    if (g.is_boundary(i)) return 0.0;
    const double dx = g.dx();
    const double x = g.x(i);
    const double s = op.second_coeff ? op.second_coeff(t, x, u, z) : 0.0;
    detail::check_parabolic(s, t, x);
    const double f = op.first_coeff ? op.first_coeff(t, x, u, z) : 0.0;
    double v = s * (phi[i - 1] - 2.0 * phi[i] + phi[i + 1]) / (dx * dx) + f * (phi[i + 1] - phi[i - 1]) / (2.0 * dx);
    if (op.jump_shift) {
        for (const auto& a : op.levy.atoms()) {
            std::size_t j = 0;
            double w = 0.0;
            detail::interpolation_weights(g, x + op.jump_shift(t, x, u, z, a.mark), j, w);
            v += a.rate * ((1.0 - w) * phi[j] + w * phi[j + 1] - phi[i]);
        }
    }
    return v;
}

using StateCoeff = std::function<double(double t, double x, double y, double u, double z)>;

struct CoefficientSet {
    StateCoeff a;  ///< drift; empty = 0
    StateCoeff b;  ///< Brownian volatility; empty = 0
    std::function<double(double t, double x, double y, double u, double z, double mark)> c;  ///< jump size; empty = 0
    std::function<double(double x, double z)> xi;                                               ///< initial data
    std::function<double(double t, double x)> theta;  ///< Dirichlet data; empty = 0
    /// Jump compensator atoms for c (usually the same measure the bundles are sampled with).
    LevySpec levy;
};

struct ControlRange {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();

    bool contains(double u) const { return u >= lo && u <= hi; }
    double distance_to_boundary(double u) const { return std::min(u - lo, hi - u); }
    double diameter() const { return hi - lo; }
};

enum class ControlMode { x_dependent, x_independent };

/// Token passed as the node index when an x-independent rule is evaluated.
inline constexpr std::size_t kAnyNode = std::numeric_limits<std::size_t>::max();

/// Control rule bound to one path: u at time node k, spatial node i, given the state at t_k.
using BoundRule = std::function<double(std::size_t k, std::size_t i, std::span<const double> state)>;

/// A control u(t,x,z) adapted to the path history. A policy is a binder: given a path
/// bundle and z it returns the rule for that path (so per-path precomputation is allowed).
class ControlPolicy {
public:
    using Binder = std::function<BoundRule(const PathBundle&, double z, const SpatialGrid&)>;

    ControlPolicy() = default;
    ControlPolicy(ControlMode mode, ControlRange range, Binder binder)
        : mode_(mode), range_(range), binder_(std::move(binder)) {}

    static ControlPolicy constant(double value, ControlRange range = {}) {
        return ControlPolicy(ControlMode::x_independent, range, [value](const PathBundle&, double, const SpatialGrid&) {
            return BoundRule([value](std::size_t, std::size_t, std::span<const double>) { return value; });
        });
    }

    /// Deterministic u(t), x-independent.
    static ControlPolicy of_time(std::function<double(double t)> f, ControlRange range = {}) {
        return ControlPolicy(ControlMode::x_independent, range,
                             [f](const PathBundle& b, double, const SpatialGrid&) {
                                 const TimeGrid tg = b.grid();
                                 return BoundRule([f, tg](std::size_t k, std::size_t, std::span<const double>) {
                                     return f(tg.time(k));
                                 });
                             });
    }

    /// Deterministic u(t, x).
    static ControlPolicy of_time_space(std::function<double(double t, double x)> f, ControlRange range = {}) {
        return ControlPolicy(ControlMode::x_dependent, range,
                             [f](const PathBundle& b, double, const SpatialGrid& g) {
                                 const TimeGrid tg = b.grid();
                                 return BoundRule([f, tg, g](std::size_t k, std::size_t i, std::span<const double>) {
                                     return f(tg.time(k), g.x(i));
                                 });
                             });
    }

    ControlMode mode() const { return mode_; }
    const ControlRange& range() const { return range_; }
    bool valid() const { return static_cast<bool>(binder_); }

    /// The rule for one path, wrapped so that every value is checked against U.
    BoundRule bind(const PathBundle& bundle, double z, const SpatialGrid& g) const {
        if (!binder_) throw std::invalid_argument("ControlPolicy: empty policy");
        BoundRule raw = binder_(bundle, z, g);
        const ControlRange r = range_;
        return [raw = std::move(raw), r](std::size_t k, std::size_t i, std::span<const double> y) {
            const double u = raw(k, i, y);
            if (!r.contains(u) || !std::isfinite(u))
                throw std::out_of_range("control value " + std::to_string(u) + " leaves U at step " + std::to_string(k));
            return u;
        };
    }

    /// The unchecked rule (for composing perturbations).
    BoundRule bind_raw(const PathBundle& bundle, double z, const SpatialGrid& g) const { return binder_(bundle, z, g); }

    /// u + c with the same range.
    ControlPolicy shifted(double c) const {
        Binder inner = binder_;
        return ControlPolicy(mode_, range_, [inner, c](const PathBundle& b, double z, const SpatialGrid& g) {
            BoundRule r = inner(b, z, g);
            return BoundRule([r, c](std::size_t k, std::size_t i, std::span<const double> y) { return r(k, i, y) + c; });
        });
    }

    /// Per-node control values at step k (a single entry for x-independent policies).
    void evaluate(const BoundRule& rule, std::size_t k, std::span<const double> state, std::vector<double>& out) const {
        if (mode_ == ControlMode::x_independent) {
            out.assign(1, rule(k, kAnyNode, state));
            return;
        }
        out.resize(state.size());
        for (std::size_t i = 0; i < state.size(); ++i) out[i] = rule(k, i, state);
    }

private:
    ControlMode mode_ = ControlMode::x_independent;
    ControlRange range_;
    Binder binder_;
};

/// Y(t_k, x_i, z) for one (path, z) pair.
struct StateField {
    SpatialGrid grid;
    TimeGrid time;
    double z = 0.0;
    std::vector<std::vector<double>> values;

    const std::vector<double>& at(std::size_t k) const { return values.at(k); }
    const std::vector<double>& terminal() const { return values.back(); }

    /// CSV with columns t, x, value; every `stride`-th time node.
    void write_csv(std::ostream& os, std::size_t stride = 1) const {
        os << "t,x,value\n";
        char buf[96];
        for (std::size_t k = 0; k < values.size(); k += std::max<std::size_t>(stride, 1)) {
            for (std::size_t i = 0; i < grid.n_nodes(); ++i) {
                std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", time.time(k), grid.x(i), values[k][i]);
                os << buf;
            }
        }
    }
};

inline double eval_or_zero(const StateCoeff& f, double t, double x, double y, double u, double z) {
    return f ? f(t, x, y, u, z) : 0.0;
}

/// One semi-implicit step engine for a fixed (coefficients, operator, grid, z). Const after
/// construction, so one instance can serve many paths concurrently.
class ForwardSolver {
public:
    ForwardSolver(CoefficientSet coeffs, OperatorSpec op, SpatialGrid grid, double z)
        : coeffs_(std::move(coeffs)), op_(std::move(op)), grid_(grid), z_(z) {}

    const CoefficientSet& coefficients() const { return coeffs_; }
    const OperatorSpec& op() const { return op_; }
    const SpatialGrid& grid() const { return grid_; }
    double z() const { return z_; }

    std::vector<double> initial_state(double t0) const {
        std::vector<double> y(grid_.n_nodes());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = coeffs_.xi ? coeffs_.xi(grid_.x(i), z_) : 0.0;
        if (coeffs_.theta) {
            y.front() = coeffs_.theta(t0, grid_.x_left());
            y.back() = coeffs_.theta(t0, grid_.x_right());
        }
        return y;
    }

    /// Explicit part y + dt a + b dB + compensated jump sum of c, at t_k.
    void explicit_part(std::span<const double> y, std::size_t k, std::span<const double> u, const PathBundle& b,
                       std::vector<double>& rhs) const {
        const TimeGrid& tg = b.grid();
        const double t = tg.time(k);
        const double dt = tg.dt();
        const double dB = b.increment(k);
        const auto jumps = b.jumps_at(k);
        rhs.resize(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double x = grid_.x(i);
            const double ui = u.size() == 1 ? u[0] : u[i];
            double v = y[i] + dt * eval_or_zero(coeffs_.a, t, x, y[i], ui, z_) +
                       eval_or_zero(coeffs_.b, t, x, y[i], ui, z_) * dB;
            if (coeffs_.c) {
                for (double m : jumps) v += coeffs_.c(t, x, y[i], ui, z_, m);
                for (const auto& a : coeffs_.levy.atoms()) v -= dt * a.rate * coeffs_.c(t, x, y[i], ui, z_, a.mark);
            }
            rhs[i] = v;
        }
    }

    /// Y_{k+1} from Y_k: (I - dt A_u(t_{k+1})) Y_{k+1} = explicit part, boundary rows = theta(t_{k+1}).
    void step(std::span<const double> y, std::size_t k, std::span<const double> u, const PathBundle& b,
              std::vector<double>& out) const {
        std::vector<double> rhs;
        explicit_part(y, k, u, b, rhs);
        const double t1 = b.grid().time(k + 1);
        rhs.front() = coeffs_.theta ? coeffs_.theta(t1, grid_.x_left()) : 0.0;
        rhs.back() = coeffs_.theta ? coeffs_.theta(t1, grid_.x_right()) : 0.0;
        if (op_.reusable()) {
            out = cached_solver(b.grid().dt()).solve(rhs);
        } else {
            const GridMatrix a = assemble_operator(op_, grid_, t1, u, z_);
            const std::size_t rows[2] = {0, grid_.n_cells()};
            out = GridSolver(a.implicit_system(b.grid().dt(), rows)).solve(rhs);
        }
    }

private:
    const GridSolver& cached_solver(double dt) const {
        std::lock_guard<std::mutex> lock(*cache_mutex_);
        for (const auto& [cdt, solver] : cache_)
            if (cdt == dt) return *solver;
        const double zero_u[1] = {0.0};
        const GridMatrix a = assemble_operator(op_, grid_, 0.0, zero_u, z_);
        const std::size_t rows[2] = {0, grid_.n_cells()};
        cache_.emplace_back(dt, std::make_shared<GridSolver>(a.implicit_system(dt, rows)));
        return *cache_.back().second;
    }

    CoefficientSet coeffs_;
    OperatorSpec op_;
    SpatialGrid grid_;
    double z_;
    mutable std::vector<std::pair<double, std::shared_ptr<GridSolver>>> cache_;
    std::shared_ptr<std::mutex> cache_mutex_ = std::make_shared<std::mutex>();
};

/// Runs the forward scheme along `bundle` from node k0 (state `start`, default xi) to the end,
/// calling visit(k, y_k, u_k) at every node; u_k is empty at the final node.
template <class Visitor>
void sweep_forward(const ForwardSolver& solver, const ControlPolicy& control, const PathBundle& bundle, Visitor&& visit,
                   std::span<const double> start = {}, std::size_t k0 = 0) {
    const BoundRule rule = control.bind(bundle, solver.z(), solver.grid());
    const std::size_t n = bundle.grid().n_steps();
    std::vector<double> y = start.empty() ? solver.initial_state(bundle.grid().time(k0))
                                          : std::vector<double>(start.begin(), start.end());
    if (y.size() != solver.grid().n_nodes()) throw std::invalid_argument("sweep_forward: state size mismatch");
    std::vector<double> u, next;
    for (std::size_t k = k0; k < n; ++k) {
        control.evaluate(rule, k, y, u);
        visit(k, std::span<const double>(y), std::span<const double>(u));
        solver.step(y, k, u, bundle, next);
        y.swap(next);
    }
    visit(n, std::span<const double>(y), std::span<const double>());
}

inline StateField solve_forward(const CoefficientSet& coeffs, const OperatorSpec& op, const SpatialGrid& grid,
                                const ControlPolicy& control, double z, const PathBundle& bundle) {
    const ForwardSolver solver(coeffs, op, grid, z);
    StateField f{grid, bundle.grid(), z, {}};
    f.values.reserve(bundle.grid().n_steps() + 1);
    sweep_forward(solver, control, bundle,
                  [&](std::size_t, std::span<const double> y, std::span<const double>) { f.values.emplace_back(y.begin(), y.end()); });
    return f;
}

/// Weak-form defect of a field against a test function phi (zero near the boundary):
/// max_k |(Y_k - Y_0, phi) - sum_{j<k} [dt (Y_j, A_j^T phi) + dt (a_j, phi) + dB_j (b_j, phi) + (jumps_j, phi)]|
/// with every term at the left endpoint t_j.
inline double weak_residual(const StateField& field, std::span<const double> phi, const CoefficientSet& coeffs,
                            const OperatorSpec& op, const ControlPolicy& control, const PathBundle& bundle) {
    const SpatialGrid& g = field.grid;
    if (phi.size() != g.n_nodes()) throw std::invalid_argument("weak_residual: test function size mismatch");
    if (field.values.size() != bundle.grid().n_steps() + 1)
        throw std::invalid_argument("weak_residual: field and bundle grids differ");
    const BoundRule rule = control.bind(bundle, field.z, g);
    const TimeGrid& tg = bundle.grid();
    const double dt = tg.dt();
    const double base = g.inner(field.values[0], phi);
    double accumulated = 0.0;
    double worst = 0.0;
    std::vector<double> u, drift(g.n_nodes()), vol(g.n_nodes()), jump(g.n_nodes());
    for (std::size_t k = 0; k < tg.n_steps(); ++k) {
        const auto& y = field.values[k];
        const double t = tg.time(k);
        control.evaluate(rule, k, y, u);
        const GridMatrix a = assemble_operator(op, g, t, u, field.z);
        const std::vector<double> at_phi = a.transposed().apply(phi);
        for (std::size_t i = 0; i < g.n_nodes(); ++i) {
            const double ui = u.size() == 1 ? u[0] : u[i];
            const double x = g.x(i);
            drift[i] = eval_or_zero(coeffs.a, t, x, y[i], ui, field.z);
            vol[i] = eval_or_zero(coeffs.b, t, x, y[i], ui, field.z);
            double jv = 0.0;
            if (coeffs.c) {
                for (double m : bundle.jumps_at(k)) jv += coeffs.c(t, x, y[i], ui, field.z, m);
                for (const auto& at : coeffs.levy.atoms()) jv -= dt * at.rate * coeffs.c(t, x, y[i], ui, field.z, at.mark);
            }
            jump[i] = jv;
        }
        accumulated += dt * g.inner(y, at_phi) + dt * g.inner(drift, phi) + bundle.increment(k) * g.inner(vol, phi) +
                       g.inner(jump, phi);
        worst = std::max(worst, std::abs(g.inner(field.values[k + 1], phi) - base - accumulated));
    }
    return worst;
}

}  // namespace insider
