#include <gtest/gtest.h>

#include <cmath>

#include "insider/montecarlo.hpp"
#include "insider/noise.hpp"

using namespace insider;

namespace {

const TimeGrid kUnit(0.0, 1.0, 50);

}  // namespace

TEST(TimeGrid, NodesAndLookup) {
    const TimeGrid g(0.0, 2.0, 8);
    EXPECT_DOUBLE_EQ(g.dt(), 0.25);
    EXPECT_DOUBLE_EQ(g.time(0), 0.0);
    EXPECT_DOUBLE_EQ(g.time(8), 2.0);
    EXPECT_EQ(g.node_of(0.5), 2);
}

TEST(SampleBundle, EmptyLevyHasNoJumps) {
    const PathBundle b = sample_bundle(kUnit, LevySpec{}, 7, 0);
    EXPECT_EQ(b.total_jumps(), 0u);
    for (std::size_t k = 0; k < kUnit.n_steps(); ++k) EXPECT_TRUE(b.jumps_at(k).empty());
}

TEST(SampleBundle, Deterministic) {
    const LevySpec levy({{0.5, 2.0}, {-1.0, 1.0}});
    const PathBundle a = sample_bundle(kUnit, levy, 7, 3);
    const PathBundle b = sample_bundle(kUnit, levy, 7, 3);
    EXPECT_TRUE(a == b);
    const PathBundle c = sample_bundle(kUnit, levy, 7, 4);
    EXPECT_FALSE(a == c);
}

TEST(SampleBundle, OrderIndependent) {
    const PathBundle late = sample_bundle(kUnit, LevySpec{}, 11, 99);
    for (std::uint64_t i = 0; i < 5; ++i) (void)sample_bundle(kUnit, LevySpec{}, 11, i);
    EXPECT_TRUE(late == sample_bundle(kUnit, LevySpec{}, 11, 99));
}

TEST(SampleBundle, TerminalMeanCLT) {
    const std::size_t n = 10000;
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = brownian_value(sample_bundle(kUnit, LevySpec{}, 1, i), kUnit.n_steps());
    const auto e = summarize(v);
    EXPECT_LE(std::abs(e.mean), 3.0 * std::sqrt(kUnit.t_end() / n));
}

TEST(BrownianValue, Telescoping) {
    const PathBundle b = sample_bundle(kUnit, LevySpec{}, 5, 1);
    EXPECT_EQ(brownian_value(b, 0), 0.0);
    double s = 0.0;
    for (double d : b.brownian_increments()) s += d;
    EXPECT_NEAR(brownian_value(b, kUnit.n_steps()), s, 1e-14);
    EXPECT_THROW(brownian_value(b, kUnit.n_steps() + 1), std::out_of_range);
}

TEST(BrownianValue, VarianceAtOne) {
    const std::size_t n = 10000;
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = brownian_value(sample_bundle(kUnit, LevySpec{}, 2, i), kUnit.n_steps());
    double m = 0.0, s = 0.0;
    for (double x : v) m += x;
    m /= n;
    for (double x : v) s += (x - m) * (x - m);
    EXPECT_NEAR(s / (n - 1), 1.0, 0.05);
}

TEST(ItoIntegral, TrivialIntegrands) {
    const PathBundle b = sample_bundle(kUnit, LevySpec{}, 3, 0);
    EXPECT_EQ(ito_integral(std::vector<double>(kUnit.n_steps(), 0.0), b), 0.0);
    EXPECT_NEAR(ito_integral(std::vector<double>(kUnit.n_steps(), 1.0), b), brownian_value(b, kUnit.n_steps()), 1e-14);
    EXPECT_THROW(ito_integral(std::vector<double>(3, 1.0), b), std::invalid_argument);
}

TEST(ItoIntegral, IsometryForConstant) {
    const std::size_t n = 10000;
    std::vector<double> sq(n);
    const std::vector<double> one(kUnit.n_steps(), 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = ito_integral(one, sample_bundle(kUnit, LevySpec{}, 4, i));
        sq[i] = v * v;
    }
    EXPECT_NEAR(summarize(sq).mean, 1.0, 0.05);
}

TEST(ItoIntegral, IsometryForStepFunction) {
    const std::size_t n = 10000;
    std::vector<double> f(kUnit.n_steps());
    double expected = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) {
        f[k] = k < 20 ? 2.0 : (k < 35 ? -0.5 : 1.0);
        expected += f[k] * f[k] * kUnit.dt();
    }
    std::vector<double> sq(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = ito_integral(f, sample_bundle(kUnit, LevySpec{}, 8, i));
        sq[i] = v * v;
    }
    const auto e = summarize(sq);
    EXPECT_LE(std::abs(e.mean - expected), 3.0 * e.stderr);
}

TEST(Substreams, IncrementsUncorrelatedWithJumpCounts) {
    const LevySpec levy({{1.0, 3.0}});
    const std::size_t n = 10000;
    std::vector<double> prod(n), db(n), cnt(n);
    for (std::size_t i = 0; i < n; ++i) {
        const PathBundle b = sample_bundle(kUnit, levy, 9, i);
        db[i] = b.increment(0);
        cnt[i] = static_cast<double>(b.jumps_at(0).size());
    }
    const double mdb = summarize(db).mean, mc = summarize(cnt).mean;
    for (std::size_t i = 0; i < n; ++i) prod[i] = (db[i] - mdb) * (cnt[i] - mc);
    const auto e = summarize(prod);
    EXPECT_LE(std::abs(e.mean), 3.0 * e.stderr);
}

TEST(Compensation, MeanZeroForSeveralMeasures) {
    const std::vector<LevySpec> specs = {LevySpec({{1.0, 2.0}}), LevySpec({{0.3, 5.0}, {-2.0, 0.7}}),
                                         LevySpec({{4.0, 0.1}})};
    for (const auto& levy : specs) {
        const std::size_t n = 10000;
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) {
            const PathBundle b = sample_bundle(kUnit, levy, 12, i);
            double s = 0.0;
            for (std::size_t k = 0; k < kUnit.n_steps(); ++k) s += b.compensated_increment(k, levy);
            v[i] = s;
        }
        const auto e = summarize(v);
        EXPECT_LE(std::abs(e.mean), 3.0 * e.stderr);
    }
}

TEST(PathBundle, JumpRateMatchesIntensity) {
    const LevySpec levy({{1.0, 4.0}});
    const std::size_t n = 4000;
    std::vector<double> c(n);
    for (std::size_t i = 0; i < n; ++i) c[i] = static_cast<double>(sample_bundle(kUnit, levy, 13, i).total_jumps());
    const auto e = summarize(c);
    EXPECT_LE(std::abs(e.mean - 4.0), 3.0 * e.stderr);
}

TEST(PathBundle, TransformsPreserveStructure) {
    const LevySpec levy({{1.0, 4.0}});
    const PathBundle b = sample_bundle(kUnit, levy, 14, 0);
    const PathBundle a = b.antithetic();
    for (std::size_t k = 0; k < kUnit.n_steps(); ++k) EXPECT_EQ(a.increment(k), -b.increment(k));
    EXPECT_EQ(a.total_jumps(), b.total_jumps());
    const PathBundle bumped = b.bumped(3, 0.1);
    EXPECT_NEAR(bumped.increment(3) - b.increment(3), 0.1, 1e-15);
    const PathBundle c = b.coarsened(5);
    EXPECT_EQ(c.grid().n_steps(), 10u);
    EXPECT_NEAR(brownian_value(c, 10), brownian_value(b, 50), 1e-13);
    EXPECT_EQ(c.total_jumps(), b.total_jumps());
    EXPECT_THROW(b.coarsened(7), std::invalid_argument);
    const TimeGrid tail_grid(kUnit.time(20), 1.0, 30);
    const PathBundle tail = sample_bundle(tail_grid, levy, 15, 0);
    const PathBundle s = b.spliced(20, tail);
    EXPECT_EQ(s.grid().n_steps(), 50u);
    EXPECT_EQ(s.increment(5), b.increment(5));
    EXPECT_EQ(s.increment(25), tail.increment(5));
}

TEST(CounterRng, UniformInUnitInterval) {
    CounterRng r(1, 2, 3, Channel::auxiliary);
    for (int i = 0; i < 1000; ++i) {
        const double u = r.uniform();
        EXPECT_GT(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
}

TEST(LevySpec, RejectsNegativeRates) { EXPECT_THROW(LevySpec({{1.0, -1.0}}), std::invalid_argument); }
