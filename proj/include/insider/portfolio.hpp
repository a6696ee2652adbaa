#pragma once

// The multiplicative "wealth" SPDE
//
//   dY = [ (1/2) Y'' + pi a0 Y ] dt + pi b0 Y dB,   Y(0) = alpha(x) > 0,  Y = 0 on the boundary,
//
// with log utility U = k(x,z) ln y, its closed-form insider control
// pi^ = Phi_K / b0 + a0 / b0^2, and Monte Carlo comparisons of competing controls.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "insider/donsker.hpp"
#include "insider/hamiltonian.hpp"
#include "insider/montecarlo.hpp"
#include "insider/noise.hpp"
#include "insider/spde.hpp"

namespace insider {

using MarketCoeff = std::function<double(double t, double z)>;

struct MarketSpec {
    MarketCoeff a0;
    MarketCoeff b0;
    std::function<double(double x)> alpha_init;
    SpatialGrid D;
    double eps_vol = kVolatilityFloor;

    void validate(const TimeGrid& tg, double z) const {
        if (!a0 || !b0 || !alpha_init) throw std::invalid_argument("MarketSpec: a0, b0 and alpha_init are required");
        for (std::size_t k = 0; k <= tg.n_steps(); ++k)
            if (!(std::abs(b0(tg.time(k), z)) >= eps_vol))
                throw DegenerateVolatility("|b0| < eps_vol at t=" + std::to_string(tg.time(k)));
        for (std::size_t i = 1; i < D.n_cells(); ++i)
            if (!(alpha_init(D.x(i)) > 0.0)) throw std::invalid_argument("MarketSpec: alpha_init must be positive");
    }
};

struct UtilitySpec {
    std::function<double(double x, double z)> k_weight;
    SpatialRule rule = SpatialRule::interior;
    /// Optional path-dependent K; when set, pi^ is routed through the stochastic Phi_K estimator.
    KFunctional stochastic_k;

    bool stochastic() const { return static_cast<bool>(stochastic_k.value); }

    /// K(z) = int_D k dx on the rule used for the utility.
    double K_total(const SpatialGrid& g, double z) const {
        std::vector<double> f(g.n_nodes());
        for (std::size_t i = 0; i < f.size(); ++i) f[i] = k_weight ? k_weight(g.x(i), z) : 0.0;
        return integrate(g, f, rule);
    }
};

/// pi^(t,z) = Phi_K / b0 + a0 / b0^2 at the history's time.
inline double optimal_pi(const MarketSpec& market, const UtilitySpec& utility, const FirstOrderChaosSpec& spec,
                         double z, const HistorySnapshot& hist, DonskerMethod method = DonskerMethod::fourier,
                         const QuadratureOptions& quad = {}) {
    const double b = market.b0(hist.t, z);
    if (!(std::abs(b) >= market.eps_vol)) throw DegenerateVolatility("|b0| < eps_vol");
    const double phi = utility.stochastic() ? phi_k(spec, utility.stochastic_k, z, hist, quad)
                                            : donsker_phi1(spec, z, hist, method, quad);
    return phi / b + market.a0(hist.t, z) / (b * b);
}

/// x-independent policy evaluating pi^ along each path's own history.
inline ControlPolicy optimal_policy(const MarketSpec& market, const UtilitySpec& utility,
                                    const FirstOrderChaosSpec& spec, DonskerMethod method = DonskerMethod::fourier,
                                    ControlRange range = {}, QuadratureOptions quad = {}) {
    return ControlPolicy(ControlMode::x_independent, range,
                         [market, utility, spec, method, quad](const PathBundle& b, double z, const SpatialGrid&) {
                             const std::size_t n = b.grid().n_steps();
                             std::vector<double> pis(n);
                             HistorySnapshot hist;
                             hist.t = b.grid().t_start();
                             hist.brownian_nodes.assign(1, 0.0);
                             for (std::size_t k = 0; k < n; ++k) {
                                 pis[k] = optimal_pi(market, utility, spec, z, hist, method, quad);
                                 hist.advance(spec, b, k, k + 1);
                             }
                             return BoundRule([pis = std::move(pis)](std::size_t k, std::size_t, std::span<const double>) {
                                 return pis.at(k);
                             });
                         });
}

/// Merton-type control a0 / b0^2 (no information term).
inline ControlPolicy merton_policy(const MarketSpec& market, ControlRange range = {}) {
    return ControlPolicy(ControlMode::x_independent, range, [market](const PathBundle& b, double z, const SpatialGrid&) {
        const TimeGrid tg = b.grid();
        return BoundRule([market, tg, z](std::size_t k, std::size_t, std::span<const double>) {
            const double t = tg.time(k);
            const double bv = market.b0(t, z);
            return market.a0(t, z) / (bv * bv);
        });
    });
}

/// The controlled wealth equation as a generic forward problem.
inline ForwardProblem wealth_problem(const MarketSpec& market, const TimeGrid& tg) {
    ForwardProblem p;
    const MarketCoeff a0 = market.a0, b0 = market.b0;
    p.coeffs.a = [a0](double t, double, double y, double u, double z) { return u * y * a0(t, z); };
    p.coeffs.b = [b0](double t, double, double y, double u, double z) { return u * y * b0(t, z); };
    const auto alpha = market.alpha_init;
    p.coeffs.xi = [alpha](double x, double) { return alpha(x); };
    p.op = OperatorSpec::half_laplacian();
    p.space = market.D;
    p.time = tg;
    return p;
}

inline PerformanceSpec log_utility(const UtilitySpec& utility) {
    PerformanceSpec perf;
    const auto kw = utility.k_weight;
    perf.k = [kw](double x, double y, double z) { return kw(x, z) * std::log(y); };
    perf.dk_dy = [kw](double x, double y, double z) { return kw(x, z) / y; };
    perf.rule = utility.rule;
    perf.positive_state_required = true;
    return perf;
}

/// The shipped benchmark: D = (0,1), alpha = 1 + sin(pi x), a0 = 0.1, b0 = 0.3, T = 0.5, T0 = 1,
/// Z = B(T0), k = 1, zero Dirichlet data.
struct PortfolioBenchmark {
    MarketSpec market;
    UtilitySpec utility;
    FirstOrderChaosSpec spec;
    TimeGrid time;
    double z = 0.0;
    ControlRange range;

    static PortfolioBenchmark standard(std::size_t n_steps = 500, std::size_t n_cells = 32, double z = 0.0,
                                       double a0 = 0.1, double b0 = 0.3, double T = 0.5, double T0 = 1.0) {
        PortfolioBenchmark b;
        b.market.a0 = [a0](double, double) { return a0; };
        b.market.b0 = [b0](double, double) { return b0; };
        b.market.alpha_init = [](double x) { return 1.0 + std::sin(std::numbers::pi * x); };
        b.market.D = SpatialGrid(0.0, 1.0, n_cells);
        b.utility.k_weight = [](double, double) { return 1.0; };
        b.spec = FirstOrderChaosSpec::brownian(T0);
        b.time = TimeGrid(0.0, T, n_steps);
        b.z = z;
        b.range = ControlRange{-50.0, 50.0};
        return b;
    }

    ForwardProblem problem() const { return wealth_problem(market, time); }
    PerformanceSpec performance() const { return log_utility(utility); }
    ControlPolicy optimal(DonskerMethod method = DonskerMethod::closed_form) const {
        return optimal_policy(market, utility, spec, method, range);
    }
};

struct NamedControl {
    std::string name;
    ControlPolicy policy;
};

struct CandidateResult {
    std::string name;
    PerformanceEstimate estimate;
    /// Paired (same-path) difference j(first candidate) - j(this one).
    PerformanceEstimate gap_to_first;
};

/// j for each candidate on common random numbers; the first candidate is the reference.
inline std::vector<CandidateResult> run_portfolio_experiment(const MarketSpec& market, const UtilitySpec& utility,
                                                             const FirstOrderChaosSpec& spec, double z,
                                                             const TimeGrid& tg,
                                                             const std::vector<NamedControl>& candidates,
                                                             const EstimatorOptions& opts) {
    if (!(tg.t_end() < spec.T0)) throw std::invalid_argument("portfolio experiment requires T < T0");
    market.validate(tg, z);
    const ForwardProblem prob = wealth_problem(market, tg);
    const PerformanceSpec perf = log_utility(utility);
    std::vector<std::vector<double>> samples;
    std::vector<CandidateResult> out;
    for (const auto& c : candidates) {
        samples.push_back(j_samples(prob, c.policy, perf, spec, z, opts));
        out.push_back({c.name, summarize(samples.back()), {}});
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i].gap_to_first = summarize(paired_difference(samples[0], samples[i]));
    return out;
}

inline void write_portfolio_csv(std::ostream& os, const std::vector<CandidateResult>& rows) {
    os << "control,j_mean,stderr,n_paths,rejection_rate,gap_to_optimal,gap_stderr\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%zu,%.17g,%.17g,%.17g\n", r.name.c_str(), r.estimate.mean,
                      r.estimate.stderr, r.estimate.n_paths, r.estimate.rejection_rate(), r.gap_to_first.mean,
                      r.gap_to_first.stderr);
        os << buf;
    }
}

struct MartingaleMatch {
    double lhs = 0.0;  ///< K(z) E[delta_Z(z) | F_T]
    double rhs = 0.0;  ///< p~(0) exp(int theta dB - 1/2 int theta^2 dt)
    double relative_residual = 0.0;
};

/// Terminal identity K E[delta|F_T] = p~(0) exp(...) along one path, with p~(0) = K E[delta_Z(z)]
/// and theta = b0 pi - a0/b0 from the supplied control. Gaussian Z only.
inline MartingaleMatch martingale_match_check(const MarketSpec& market, const UtilitySpec& utility,
                                              const FirstOrderChaosSpec& spec, double z, const ControlPolicy& control,
                                              const PathBundle& bundle) {
    require_gaussian(spec);
    const TimeGrid& tg = bundle.grid();
    const double K = utility.K_total(market.D, z);
    const ForwardSolver solver(wealth_problem(market, tg).coeffs, OperatorSpec::half_laplacian(), market.D, z);
    std::vector<double> pis;
    pis.reserve(tg.n_steps());
    sweep_forward(solver, control, bundle, [&](std::size_t k, std::span<const double>, std::span<const double> u) {
        if (k < tg.n_steps()) pis.push_back(u[0]);
    });
    HistorySnapshot start;
    start.t = tg.t_start();
    const HistorySnapshot end = HistorySnapshot::from_bundle(spec, bundle, tg.n_steps());
    MartingaleMatch m;
    m.lhs = K * gaussian_conditional_delta(spec, z, end);
    const double p0 = K * gaussian_conditional_delta(spec, z, start);
    const ReducedAdjointPath ra = reduced_adjoint_solve(market.a0, market.b0, pis, 1.0, bundle, z);
    m.rhs = p0 / ra.p0;
    m.relative_residual = std::abs(m.lhs - m.rhs) / std::abs(m.lhs);
    return m;
}

}  // namespace insider
