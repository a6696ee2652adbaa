#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "insider/donsker.hpp"
#include "insider/montecarlo.hpp"

using namespace insider;

namespace {

const FirstOrderChaosSpec kGauss = FirstOrderChaosSpec::brownian(1.0);

double normal_pdf(double d, double s2) { return std::exp(-0.5 * d * d / s2) / std::sqrt(2.0 * std::numbers::pi * s2); }

FirstOrderChaosSpec jump_spec() {
    FirstOrderChaosSpec s = FirstOrderChaosSpec::brownian(1.0);
    s.levy = LevySpec({{1.0, 2.0}});
    s.psi = [](double, double m) { return 0.5 * m; };
    return s;
}

}  // namespace

TEST(ConditionalDelta, GaussianKernelAtHalf) {
    const auto h = HistorySnapshot::brownian_only(0.5, 0.0);
    EXPECT_NEAR(conditional_delta(kGauss, 0.0, h), 1.0 / std::sqrt(2.0 * std::numbers::pi * 0.5), 1e-10);
    EXPECT_NEAR(conditional_delta(kGauss, 0.0, h), 0.5641896, 1e-7);
}

TEST(ConditionalDelta, SymmetricInZ) {
    const auto h = HistorySnapshot::brownian_only(0.3, 0.0);
    for (double d : {0.1, 0.7, 1.9}) EXPECT_NEAR(conditional_delta(kGauss, d, h), conditional_delta(kGauss, -d, h), 1e-12);
}

TEST(ConditionalDelta, NormalizationOverZ) {
    for (double t : {0.0, 0.4, 0.9}) {
        for (double m : {0.0, 0.6}) {
            const auto h = HistorySnapshot::brownian_only(t, m);
            const std::size_t n = 400;
            const double a = -8.0, b = 8.0, dz = (b - a) / n;
            double s = 0.0;
            for (std::size_t i = 0; i <= n; ++i) {
                const double w = (i == 0 || i == n) ? 0.5 : 1.0;
                s += w * conditional_delta(kGauss, a + dz * i, h);
            }
            EXPECT_NEAR(s * dz, 1.0, 1e-6) << "t=" << t << " m=" << m;
        }
    }
}

TEST(ConditionalDelta, NormalizationWithJumps) {
    const FirstOrderChaosSpec s = jump_spec();
    HistorySnapshot h = HistorySnapshot::brownian_only(0.5, 0.2);
    h.jumps.push_back({0.25, 1.0});
    h.jump_compensator = 0.5 * 2.0 * 0.5;
    const std::size_t n = 800;
    const double a = -10.0, b = 12.0, dz = (b - a) / n;
    double sum = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
        const double v = conditional_delta(s, a + dz * i, h);
        EXPECT_GE(v, 0.0);
        sum += ((i == 0 || i == n) ? 0.5 : 1.0) * v;
    }
    EXPECT_NEAR(sum * dz, 1.0, 1e-6);
}

TEST(ConditionalDelta, MatchesClosedFormOnGrid) {
    for (double t : {0.0, 0.2, 0.4, 0.6, 0.8})
        for (double z : {-2.0, -0.5, 0.0, 0.7, 1.8}) {
            const auto h = HistorySnapshot::brownian_only(t, 0.3);
            EXPECT_NEAR(conditional_delta(kGauss, z, h), gaussian_conditional_delta(kGauss, z, h), 1e-8);
        }
}

TEST(ConditionalDelta, RefusesAtOrAfterT0) {
    EXPECT_THROW(conditional_delta(kGauss, 0.0, HistorySnapshot::brownian_only(1.0, 0.0)), DegenerateVariance);
    EXPECT_THROW(conditional_delta(kGauss, 0.0, HistorySnapshot::brownian_only(1.2, 0.0)), DegenerateVariance);
}

TEST(ConditionalDelta, QuadratureRefinementStable) {
    const auto h = HistorySnapshot::brownian_only(0.6, -0.2);
    QuadratureOptions coarse;
    QuadratureOptions fine = coarse;
    fine.min_intervals = 4096;
    for (double z : {-1.0, 0.3, 2.0}) {
        const auto a = conditional_delta_detailed(kGauss, z, h, coarse);
        const auto b = conditional_delta_detailed(kGauss, z, h, fine);
        EXPECT_GE(b.intervals, a.intervals);
        EXPECT_LT(std::abs(a.value - b.value), 1e-10);
    }
}

TEST(ConditionalDelta, MartingaleOverContinuations) {
    const double t1 = 0.3, t2 = 0.7;
    const auto h1 = HistorySnapshot::brownian_only(t1, 0.1);
    for (double z : {-0.5, 0.0, 1.0}) {
        const std::size_t n = 10000;
        std::vector<double> v(n);
        const TimeGrid tail(t1, t2, 4);
        for (std::size_t i = 0; i < n; ++i) v[i] = conditional_delta(kGauss, z, h1.extended(kGauss, sample_bundle(tail, {}, 21, i)));
        const auto e = summarize(v);
        EXPECT_LE(std::abs(e.mean - conditional_delta(kGauss, z, h1)), 3.0 * e.stderr) << "z=" << z;
    }
}

TEST(MalliavinB, ZeroAtMean) {
    const auto h = HistorySnapshot::brownian_only(0.5, 0.4);
    EXPECT_NEAR(conditional_malliavin_b(kGauss, 0.4, h), 0.0, 1e-12);
}

TEST(MalliavinB, DerivativeOfKernel) {
    const auto h = HistorySnapshot::brownian_only(0.5, 0.0);
    const double expected = (1.0 / 0.5) * normal_pdf(1.0, 0.5);
    EXPECT_NEAR(conditional_malliavin_b(kGauss, 1.0, h), expected, 1e-9);
    // chain rule: derivative of the kernel in the history mean
    const double e = 1e-5;
    const double fd = (conditional_delta(kGauss, 1.0, HistorySnapshot::brownian_only(0.5, e)) -
                       conditional_delta(kGauss, 1.0, HistorySnapshot::brownian_only(0.5, -e))) / (2.0 * e);
    EXPECT_NEAR(expected, fd, 1e-7);
    EXPECT_NEAR(expected, 0.4151075, 1e-6);
    EXPECT_NEAR(conditional_malliavin_b(kGauss, 1.0, h), gaussian_malliavin_b(kGauss, 1.0, h), 1e-9);
}

TEST(MalliavinB, Antisymmetric) {
    const auto h = HistorySnapshot::brownian_only(0.2, 0.5);
    for (double d : {0.3, 1.1})
        EXPECT_NEAR(conditional_malliavin_b(kGauss, 0.5 + d, h), -conditional_malliavin_b(kGauss, 0.5 - d, h), 1e-11);
}

TEST(MalliavinN, ZeroWithoutPsi) {
    FirstOrderChaosSpec s = kGauss;
    s.levy = LevySpec({{1.0, 1.0}});
    const auto h = HistorySnapshot::brownian_only(0.5, 0.0);
    for (double z : {-1.0, 0.0, 2.0}) EXPECT_EQ(conditional_malliavin_n(s, z, h, 1.0), 0.0);
}

TEST(MalliavinN, UnknownMarkThrows) {
    const FirstOrderChaosSpec s = jump_spec();
    EXPECT_THROW(conditional_malliavin_n(s, 0.0, HistorySnapshot::brownian_only(0.5, 0.0), 3.0), UnknownMark);
}

TEST(MalliavinN, MatchesExtraJumpShift) {
    const FirstOrderChaosSpec s = jump_spec();
    HistorySnapshot h = HistorySnapshot::brownian_only(0.4, 0.1);
    h.jump_compensator = 0.4 * 2.0 * 0.5;
    HistorySnapshot with = h;
    with.jumps.push_back({h.t, 1.0});
    for (double z : {-1.0, 0.0, 0.5, 1.5}) {
        const double fd = conditional_delta(s, z, with) - conditional_delta(s, z, h);
        EXPECT_NEAR(conditional_malliavin_n(s, z, h, 1.0), fd, 1e-9) << "z=" << z;
    }
}

TEST(MalliavinN, TailBoundedByEnvelope) {
    const FirstOrderChaosSpec s = jump_spec();
    const auto h = HistorySnapshot::brownian_only(0.5, 0.0);
    const double z = 9.0;
    HistorySnapshot with = h;
    with.jumps.push_back({h.t, 1.0});
    const double envelope = conditional_delta(s, z, with) + conditional_delta(s, z, h);
    EXPECT_LE(std::abs(conditional_malliavin_n(s, z, h, 1.0)), envelope + 1e-12);
    EXPECT_LT(envelope, 1e-6);
}

TEST(Phi1, GaussianRatio) {
    const auto h = HistorySnapshot::brownian_only(0.5, 0.25);
    EXPECT_NEAR(phi1(kGauss, 1.25, h), 2.0, 1e-8);
    EXPECT_NEAR(phi1(kGauss, 0.25, h), 0.0, 1e-10);
    EXPECT_NEAR(phi1(kGauss, 0.25 + 2 * 0.4, h), 2.0 * phi1(kGauss, 0.25 + 0.4, h), 1e-8);
    EXPECT_NEAR(gaussian_phi1(kGauss, 1.25, h), 2.0, 1e-14);
}

TEST(Phi1, AntisymmetricAboutMean) {
    const auto h = HistorySnapshot::brownian_only(0.1, -0.3);
    for (double d : {0.2, 0.9}) EXPECT_NEAR(phi1(kGauss, -0.3 + d, h), -phi1(kGauss, -0.3 - d, h), 1e-9);
}

TEST(Phi1, BlowUpRateNearT0) {
    std::vector<double> lx, ly;
    for (double gap : {0.1, 0.05, 0.025, 0.0125}) {
        const auto h = HistorySnapshot::brownian_only(1.0 - gap, 0.0);
        lx.push_back(std::log(gap));
        ly.push_back(std::log(std::abs(phi1(kGauss, 0.1, h))));
    }
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        mx += lx[i] / lx.size();
        my += ly[i] / ly.size();
    }
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sxy += (lx[i] - mx) * (ly[i] - my);
        sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    EXPECT_NEAR(sxy / sxx, -1.0, 0.05);
}

TEST(Phi1, FarTailUnderflowThrows) {
    const auto h = HistorySnapshot::brownian_only(0.999, 0.0);
    EXPECT_THROW(phi1(kGauss, 50.0, h), DivisionUnstable);
}

TEST(PhiK, DeterministicMatchesPhi1) {
    const auto h = HistorySnapshot::brownian_only(0.4, 0.1);
    EXPECT_EQ(phi_k(kGauss, KFunctional::constant(1.0), 0.8, h), phi1(kGauss, 0.8, h));
    EXPECT_EQ(phi_k(kGauss, KFunctional::constant(2.0), 0.8, h), phi1(kGauss, 0.8, h));
    EXPECT_THROW(phi_k(kGauss, KFunctional::constant(0.0), 0.8, h), DivisionUnstable);
}

TEST(PhiK, StochasticNeedsDerivative) {
    KFunctional k;
    k.value = [](std::span<const double> b, double) { return std::exp(b.back()); };
    k.horizon = 0.5;
    const TimeGrid g(0.0, 0.2, 4);
    const auto h = HistorySnapshot::from_bundle(kGauss, sample_bundle(g, {}, 1, 0), 4);
    EXPECT_THROW(phi_k(kGauss, k, 0.0, h), MissingDerivativeCallback);
}

// K = exp(B(T) - T/2) reweights B to drift 1 on [0, T]; the ratio becomes
// 1 + (z - B_t - (T - t)) / (T0 - t).
TEST(PhiK, StochasticGirsanovShift) {
    const double T = 0.5, z = 0.3;
    KFunctional k;
    k.value = [T](std::span<const double> b, double) { return std::exp(b.back() - 0.5 * T); };
    k.derivative = [T](std::span<const double> b, std::size_t, double) { return std::exp(b.back() - 0.5 * T); };
    k.horizon = T;
    k.n_continuations = 10000;
    k.seed = 5;
    const TimeGrid g(0.0, T, 50);
    const PathBundle path = sample_bundle(g, {}, 31, 0);
    for (std::size_t node : {5u, 20u, 40u}) {
        const auto h = HistorySnapshot::from_bundle(kGauss, path, node);
        const auto est = phi_k_estimate(kGauss, k, z, h);
        const double oracle = 1.0 + (z - h.accumulated_b - (T - h.t)) / (1.0 - h.t);
        EXPECT_LE(std::abs(est.value - oracle), 3.0 * est.stderr) << "node " << node << " est " << est.value;
        EXPECT_GT(est.stderr, 0.0);
    }
}

TEST(DonskerMethod, RoutesAgree) {
    const auto h = HistorySnapshot::brownian_only(0.35, 0.2);
    for (double z : {-1.0, 0.5}) {
        EXPECT_NEAR(donsker_weight(kGauss, z, h, DonskerMethod::fourier), donsker_weight(kGauss, z, h, DonskerMethod::closed_form), 1e-9);
        EXPECT_NEAR(donsker_phi1(kGauss, z, h, DonskerMethod::fourier), donsker_phi1(kGauss, z, h, DonskerMethod::closed_form), 1e-8);
    }
    EXPECT_THROW(gaussian_conditional_delta(jump_spec(), 0.0, h), std::invalid_argument);
}

TEST(HistorySnapshot, FromBundleMatchesPath) {
    const TimeGrid g(0.0, 0.5, 10);
    const PathBundle b = sample_bundle(g, {}, 2, 0);
    const auto h = HistorySnapshot::from_bundle(kGauss, b, 6);
    EXPECT_NEAR(h.accumulated_b, brownian_value(b, 6), 1e-14);
    EXPECT_NEAR(h.t, g.time(6), 1e-15);
    EXPECT_EQ(h.brownian_nodes.size(), 7u);
}
