#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "insider/portfolio.hpp"

using namespace insider;

namespace {

MarketSpec constant_market(double a0, double b0) {
    MarketSpec m;
    m.a0 = [a0](double, double) { return a0; };
    m.b0 = [b0](double, double) { return b0; };
    m.alpha_init = [](double x) { return 1.0 + std::sin(std::numbers::pi * x); };
    m.D = SpatialGrid(0.0, 1.0, 16);
    return m;
}

UtilitySpec unit_utility(double k = 1.0) {
    UtilitySpec u;
    u.k_weight = [k](double, double) { return k; };
    return u;
}

EstimatorOptions mc(std::size_t n, std::uint64_t seed) {
    EstimatorOptions o;
    o.n_paths = n;
    o.seed = seed;
    o.method = DonskerMethod::closed_form;
    return o;
}

double median(std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    return v[v.size() / 2];
}

}  // namespace

TEST(OptimalPi, InformationTermOnly) {
    const auto spec = FirstOrderChaosSpec::brownian(1.0);
    const auto h = HistorySnapshot::brownian_only(0.5, 0.2);
    EXPECT_NEAR(optimal_pi(constant_market(0.0, 1.0), unit_utility(), spec, 1.2, h), 2.0, 1e-8);
}

TEST(OptimalPi, MertonTermAtMean) {
    const auto spec = FirstOrderChaosSpec::brownian(1.0);
    const auto h = HistorySnapshot::brownian_only(0.3, -0.4);
    EXPECT_NEAR(optimal_pi(constant_market(0.1, 0.5), unit_utility(), spec, -0.4, h), 0.4, 1e-10);
}

TEST(OptimalPi, WeightScalingAndPhiKRouteAgree) {
    const auto spec = FirstOrderChaosSpec::brownian(1.0);
    const auto h = HistorySnapshot::brownian_only(0.25, 0.1);
    const auto m = constant_market(0.1, 0.3);
    const double base = optimal_pi(m, unit_utility(), spec, 0.7, h);
    EXPECT_NEAR(optimal_pi(m, unit_utility(10.0), spec, 0.7, h), base, 1e-12);
    const double b0 = 0.3;
    const double via_phik = phi_k(spec, KFunctional::constant(3.0), 0.7, h) / b0 + 0.1 / (b0 * b0);
    EXPECT_NEAR(via_phik, base, 1e-12);
}

TEST(OptimalPi, StochasticKRoute) {
    const auto spec = FirstOrderChaosSpec::brownian(1.0);
    UtilitySpec u = unit_utility();
    const double T = 0.5;
    u.stochastic_k.value = [T](std::span<const double> b, double) { return std::exp(b.back() - 0.5 * T); };
    u.stochastic_k.derivative = [T](std::span<const double> b, std::size_t, double) { return std::exp(b.back() - 0.5 * T); };
    u.stochastic_k.horizon = T;
    u.stochastic_k.n_continuations = 4000;
    const TimeGrid g(0.0, T, 50);
    const auto h = HistorySnapshot::from_bundle(spec, sample_bundle(g, {}, 1, 0), 10);
    const double z = 0.2;
    const double phi = 1.0 + (z - h.accumulated_b - (T - h.t)) / (1.0 - h.t);
    EXPECT_NEAR(optimal_pi(constant_market(0.0, 1.0), u, spec, z, h), phi, 0.1);
}

TEST(OptimalPi, DegenerateVolatility) {
    const auto spec = FirstOrderChaosSpec::brownian(1.0);
    EXPECT_THROW(optimal_pi(constant_market(0.1, 0.0), unit_utility(), spec, 0.0, HistorySnapshot::brownian_only(0.1, 0.0)),
                 DegenerateVolatility);
}

TEST(OptimalPi, BlowsUpNearT0) {
    const auto spec = FirstOrderChaosSpec::brownian(1.0);
    const auto m = constant_market(0.0, 1.0);
    const double p1 = optimal_pi(m, unit_utility(), spec, 0.5, HistorySnapshot::brownian_only(0.9, 0.0));
    const double p2 = optimal_pi(m, unit_utility(), spec, 0.5, HistorySnapshot::brownian_only(0.99, 0.0));
    EXPECT_NEAR(p2 / p1, 10.0, 1e-6);
}

TEST(PortfolioExperiment, ZeroControlMatchesDeterministicOracle) {
    const auto b = PortfolioBenchmark::standard(100, 16);
    const auto res = run_portfolio_experiment(b.market, b.utility, b.spec, 0.3, b.time,
                                              {{"zero", ControlPolicy::constant(0.0)}}, mc(2000, 1));
    const auto det = solve_forward(b.problem().coeffs, OperatorSpec::half_laplacian(), b.market.D, ControlPolicy::constant(0.0), 0.3,
                                   sample_bundle(b.time, {}, 0, 0));
    std::vector<double> f(b.market.D.n_nodes(), 0.0);
    for (std::size_t i = 1; i < b.market.D.n_cells(); ++i) f[i] = std::log(det.terminal()[i]);
    const double ew = std::exp(-0.5 * 0.3 * 0.3) / std::sqrt(2 * std::numbers::pi);
    const double oracle = ew * integrate(b.market.D, f, SpatialRule::interior);
    EXPECT_LE(std::abs(res[0].estimate.mean - oracle), 3.0 * res[0].estimate.stderr);
}

TEST(PortfolioExperiment, ZeroWeightGivesZero) {
    const auto b = PortfolioBenchmark::standard(50, 8);
    UtilitySpec u = unit_utility(0.0);
    const auto res = run_portfolio_experiment(b.market, u, b.spec, 0.0, b.time,
                                              {{"opt", b.optimal()}, {"merton", merton_policy(b.market)}}, mc(20, 1));
    for (const auto& r : res) EXPECT_EQ(r.estimate.mean, 0.0);
}

TEST(PortfolioExperiment, RejectsHorizonAtT0) {
    auto b = PortfolioBenchmark::standard(50, 8);
    const TimeGrid bad(0.0, 1.0, 50);
    EXPECT_THROW(run_portfolio_experiment(b.market, b.utility, b.spec, 0.0, bad, {{"opt", b.optimal()}}, mc(10, 1)),
                 std::invalid_argument);
}

TEST(PortfolioExperiment, InsiderBeatsMerton) {
    const auto b = PortfolioBenchmark::standard(100, 16, 0.8);
    auto o = mc(4000, 2);
    const auto res = run_portfolio_experiment(b.market, b.utility, b.spec, b.z, b.time,
                                              {{"insider", b.optimal()}, {"merton", merton_policy(b.market)}}, o);
    EXPECT_GT(res[1].gap_to_first.mean, 2.0 * res[1].gap_to_first.stderr);
}

TEST(PortfolioExperiment, CsvLayoutAndOptimumHasMaxMean) {
    const auto b = PortfolioBenchmark::standard(100, 16);
    auto o = mc(4000, 3);
    o.antithetic = true;
    const auto res = run_portfolio_experiment(b.market, b.utility, b.spec, b.z, b.time,
                                              {{"optimal", b.optimal()},
                                               {"minus", b.optimal().shifted(-0.25)},
                                               {"plus", b.optimal().shifted(0.25)}},
                                              o);
    for (std::size_t i = 1; i < res.size(); ++i) {
        EXPECT_GT(res[0].estimate.mean, res[i].estimate.mean);
        EXPECT_GT(res[i].gap_to_first.mean, 2.0 * res[i].gap_to_first.stderr);
    }
    std::ostringstream os;
    write_portfolio_csv(os, res);
    const std::string s = os.str();
    EXPECT_EQ(s.substr(0, s.find('\n')), "control,j_mean,stderr,n_paths,rejection_rate,gap_to_optimal,gap_stderr");
    EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 4);
}

TEST(MartingaleMatch, SmallAtOptimumInflatedWhenShifted) {
    const auto b = PortfolioBenchmark::standard(2000, 8);
    std::vector<double> at, off;
    for (std::size_t p = 0; p < 1000; ++p) {
        const auto bundle = sample_bundle(b.time, {}, 17, p);
        at.push_back(martingale_match_check(b.market, b.utility, b.spec, b.z, b.optimal(), bundle).relative_residual);
        off.push_back(martingale_match_check(b.market, b.utility, b.spec, b.z, b.optimal().shifted(1.0), bundle).relative_residual);
    }
    const double m_at = median(at), m_off = median(off);
    EXPECT_LE(m_at, std::sqrt(b.time.dt()));
    EXPECT_GE(m_off, 10.0 * m_at);
}

TEST(MartingaleMatch, DegenerateHorizon) {
    auto b = PortfolioBenchmark::standard(1, 8);
    const TimeGrid tiny(0.0, 1e-8, 1);
    const auto m = martingale_match_check(b.market, b.utility, b.spec, 0.1, b.optimal(), sample_bundle(tiny, {}, 2, 0));
    EXPECT_LE(m.relative_residual, 1e-6);
}

TEST(Benchmark, StandardInstance) {
    const auto b = PortfolioBenchmark::standard();
    EXPECT_EQ(b.time.n_steps(), 500u);
    EXPECT_DOUBLE_EQ(b.time.t_end(), 0.5);
    EXPECT_DOUBLE_EQ(b.spec.T0, 1.0);
    EXPECT_DOUBLE_EQ(b.market.a0(0.0, 0.0), 0.1);
    EXPECT_DOUBLE_EQ(b.market.b0(0.0, 0.0), 0.3);
    EXPECT_NO_THROW(b.market.validate(b.time, 0.0));
}
