#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fbqt/dynamics.hpp"
#include "fbqt/ensemble.hpp"
#include "fbqt/oracle.hpp"

using namespace fbqt;

namespace {

FockConfig cfg(bool excited, std::vector<int> bins) { return FockConfig{excited ? 1u : 0u, std::move(bins)}; }

SystemParams small_loop() {
    SystemParams p;
    p.tau = 0.05;
    p.N = 10;
    p.T = 10.0;
    return p;
}

SystemParams kicked(SystemParams p, double t0 = 0.1) {
    p.pulse.shape = PulseShape::instantaneous;
    p.pulse.t0 = t0;
    return p;
}

std::vector<double> mean_population(const SystemParams& p, std::size_t M, std::uint64_t seed) {
    EnsembleOptions o;
    o.trajectories = M;
    o.master_seed = seed;
    return run_ensemble(p, o).mean_population;
}

} // namespace

TEST(Pulse, PeakRabiRate) {
    PulseParams p;
    p.t_p = 0.01;
    EXPECT_NEAR(pulse_amplitude(p.center(), p), 295.1, 0.05);
}

TEST(Pulse, AreaIntegral) {
    PulseParams p;
    p.t_p = 0.2;
    const double a = p.center() - 12 * p.sigma(), b = p.center() + 12 * p.sigma();
    const int n = 20000;
    double s = 0.0;
    for (int i = 0; i < n; ++i)
        s += pulse_amplitude(a + (i + 0.5) * (b - a) / n, p);
    EXPECT_NEAR(s * (b - a) / n, std::numbers::pi, 1e-10);
}

TEST(Pulse, Tails) {
    PulseParams p;
    for (double side : {-1.0, 1.0})
        EXPECT_LT(pulse_amplitude(p.center() + side * 10 * p.sigma(), p), 1e-20 * pulse_amplitude(p.center(), p));
}

TEST(Params, ValidationNamesTheKey) {
    SystemParams p;
    p.N = 4;
    try {
        validate(p);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("tau/N"), std::string::npos);
    }
    p = SystemParams{};
    p.pulse.t0 = 0.001;
    EXPECT_THROW(validate(p), ValidationError);
    p = SystemParams{};
    p.tau = 0.25;
    EXPECT_EQ(validate(p).size(), 1u);
}

TEST(CoherentStep, GroundStateIsDark) {
    SystemParams p = small_loop();
    p.gamma0 = 0.3;
    p.gamma_prime = 0.7;
    auto b = enumerate_basis(p.N, p.n_max);
    const Ket g = Ket::ground(b);
    const Ket out = apply_coherent_step(g, 5.0, p);
    for (std::size_t i = 0; i < out.size(); ++i)
        EXPECT_EQ(out[i], g[i]);
}

TEST(CoherentStep, MarkovSurvival) {
    SystemParams p = small_loop();
    p.feedback_enabled = false;
    auto b = std::make_shared<const FockBasis>(FockBasis::emitter_only(1));
    const Ket e = Ket::basis_state(b, cfg(true, {}));
    const double gdt = p.gamma * p.dt();
    const double n2 = apply_coherent_step(e, 0.0, p).norm_squared();
    EXPECT_NEAR(n2, 1.0 - gdt, gdt * gdt);
}

TEST(CoherentStep, EmissionEntersIncomingAndOutgoingBins) {
    SystemParams p = small_loop();
    auto b = enumerate_basis(p.N, p.n_max);
    const Ket e = Ket::basis_state(b, cfg(true, {}));
    const Ket out = apply_coherent_step(e, 0.0, p);
    const double pin = std::norm(out.amplitude(cfg(false, {p.N - 1})));
    const double pout = std::norm(out.amplitude(cfg(false, {0})));
    const double gdt = p.gamma * p.dt();
    EXPECT_NEAR(pin, 0.5 * gdt, gdt * gdt);
    EXPECT_NEAR(pout, 0.5 * gdt, gdt * gdt);
    EXPECT_NEAR(out.norm_squared(), 1.0, gdt * gdt);
}

TEST(Jump, GroundNeverJumps) {
    SystemParams p = small_loop();
    p.gamma0 = 0.5;
    p.gamma_prime = 0.5;
    auto b = enumerate_basis(p.N, p.n_max);
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const auto r = maybe_jump(Ket::ground(b), p, rng);
        EXPECT_FALSE(r.jumped0 || r.jumped1);
    }
}

TEST(Jump, DephasingRateAndPostState) {
    SystemParams p = small_loop();
    p.gamma_prime = 1.0;
    auto b = enumerate_basis(p.N, p.n_max);
    const Ket e = Ket::basis_state(b, cfg(true, {}));
    Rng rng(2);
    const int n = 100000;
    int fired = 0;
    for (int i = 0; i < n; ++i) {
        const auto r = maybe_jump(e, p, rng);
        if (r.jumped1) {
            ++fired;
            EXPECT_NEAR(std::abs(r.ket.amplitude(cfg(true, {}))), 1.0, 1e-14);
        }
        EXPECT_FALSE(r.jumped0);
    }
    const double pexp = p.gamma_prime * p.dt();
    EXPECT_NEAR(fired / double(n), pexp, 4 * std::sqrt(pexp / n));
}

TEST(Jump, DecayRateAndPostState) {
    SystemParams p = small_loop();
    p.gamma0 = 0.2;
    auto b = enumerate_basis(p.N, p.n_max);
    const Ket e = Ket::basis_state(b, cfg(true, {}));
    Rng rng(3);
    const int n = 100000;
    int fired = 0;
    for (int i = 0; i < n; ++i) {
        const auto r = maybe_jump(e, p, rng);
        if (r.jumped0) {
            ++fired;
            EXPECT_NEAR(std::abs(r.ket[0]), 1.0, 1e-14);
        }
    }
    const double pexp = p.gamma0 * p.dt();
    EXPECT_NEAR(fired / double(n), pexp, 4 * std::sqrt(pexp / n));
}

TEST(Measure, EmptyBinIsUntouched) {
    auto b = enumerate_basis(4, 2);
    Ket k(b);
    k[b->index_of(cfg(true, {}))] = 0.6;
    k[b->index_of(cfg(false, {2}))] = cplx{0.0, 0.8};
    Rng rng(4);
    const auto r = measure_output_bin(k, rng);
    EXPECT_EQ(r.clicks, 0);
    for (std::size_t i = 0; i < k.size(); ++i)
        EXPECT_NEAR(std::abs(r.ket[i] - k[i]), 0.0, 1e-15);
}

TEST(Measure, BornRule) {
    auto b = enumerate_basis(4, 2);
    Ket k(b);
    k[0] = std::sqrt(0.7);
    k[b->index_of(cfg(false, {0}))] = std::sqrt(0.3);
    Rng rng(5);
    const int n = 100000;
    int ones = 0;
    for (int i = 0; i < n; ++i) {
        const auto r = measure_output_bin(k, rng);
        if (r.clicks == 1) {
            ++ones;
            EXPECT_NEAR(std::abs(r.ket[0]), 1.0, 1e-14);
        }
    }
    EXPECT_NEAR(ones / double(n), 0.3, 4 * std::sqrt(0.21 / n));
}

TEST(Measure, TwoPhotons) {
    auto b = enumerate_basis(4, 2);
    Rng rng(6);
    EXPECT_EQ(measure_output_bin(Ket::basis_state(b, cfg(false, {0, 0})), rng).clicks, 2);
}

TEST(Measure, UnnormalisedKetFails) {
    auto b = enumerate_basis(4, 2);
    Ket k = Ket::ground(b);
    k[0] = 2.0;
    Rng rng(7);
    EXPECT_THROW(measure_output_bin(k, rng), RuntimeError);
}

TEST(Trajectory, NoDriveNoClicks) {
    SystemParams p = small_loop();
    p.pulse.area = 0.0;
    const auto r = run_trajectory(p, 2, 9);
    EXPECT_TRUE(r.record.empty());
    for (double x : r.population)
        EXPECT_EQ(x, 0.0);
}

TEST(Trajectory, Deterministic) {
    SystemParams p = small_loop();
    p.gamma_prime = 0.5;
    p.gamma0 = 0.1;
    for (std::uint64_t seed : {1u, 2u, 77u}) {
        const auto a = run_trajectory(p, 2, seed);
        const auto b = run_trajectory(p, 2, seed);
        EXPECT_EQ(a.record, b.record);
        EXPECT_EQ(a.population, b.population);
    }
}

TEST(Trajectory, ClosureAndNorm) {
    SystemParams p = small_loop();
    p.gamma_prime = 0.3;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto r = run_trajectory(p, 1, seed);
        EXPECT_LT(r.audit.max_closure_error, 1e-10);
        EXPECT_LT(r.audit.max_norm_error, 1e-10);
        for (const auto& ev : r.record)
            EXPECT_LE(ev.multiplicity, p.n_max);
    }
}

TEST(Trajectory, EventsStampedAtStepEnds) {
    SystemParams p = small_loop();
    const auto r = run_trajectory(p, 1, 3);
    ASSERT_FALSE(r.record.empty());
    for (const auto& ev : r.record) {
        const double k = ev.time / p.dt();
        EXPECT_NEAR(k, std::round(k), 1e-6);
        EXPECT_GE(std::round(k), 1.0);
    }
}

TEST(Trajectory, TwoPulsesRestartEachPeriod) {
    SystemParams p = small_loop();
    const auto r = run_trajectory(p, 2, 5);
    int first = 0, second = 0;
    for (const auto& ev : r.record)
        (ev.time < p.T ? first : second) += ev.multiplicity;
    EXPECT_GE(first, 1);
    EXPECT_GE(second, 1);
}

TEST(Trajectory, MarkovEmissionMatchesBranchingRatio) {
    SystemParams p;
    p.feedback_enabled = false;
    p.gamma0 = 0.1;
    EnsembleOptions o;
    o.trajectories = 20000;
    o.master_seed = 4;
    const auto r = run_ensemble(p, o);
    EXPECT_NEAR(r.mean_clicks, 1.0 / 1.1, 3.0 * std::sqrt(0.0826 / 20000.0) + 2e-3);
}

TEST(Trajectory, MarkovPopulationMatchesLindblad) {
    SystemParams p;
    p.feedback_enabled = false;
    p.gamma_prime = 0.3;
    const auto pop = mean_population(p, 10000, 11);
    std::vector<double> grid(pop.size());
    for (std::size_t i = 0; i < grid.size(); ++i)
        grid[i] = (i + 1) * p.dt();
    const auto rho = lindblad_solve(p, grid);
    double linf = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i)
        linf = std::max(linf, std::abs(pop[i] - rho[i].ee));
    EXPECT_LT(linf, 0.01);
}

TEST(Feedback, ConstructivePhaseDoublesDecayRate) {
    SystemParams p = kicked(small_loop());
    p.tau = 0.02;
    p.N = 4;
    p.T = 4.0;
    const auto pop = mean_population(p, 2000, 21);
    auto at = [&](double t) { return pop[static_cast<std::size_t>(std::lround(t / p.dt())) - 1]; };
    const double t1 = 0.6, t2 = 1.6;
    const double rate = std::log(at(t1) / at(t2)) / (t2 - t1);
    EXPECT_GE(rate, 1.9);
    EXPECT_LE(rate, 2.1);
}

TEST(Feedback, DestructivePhaseTrapsExcitation) {
    SystemParams p = kicked(small_loop());
    p.tau = 0.02;
    p.N = 4;
    p.T = 6.0;
    p.phi = std::numbers::pi;
    const auto pop = mean_population(p, 500, 22);
    const double t = *p.pulse.t0 + 5.0;
    EXPECT_GT(pop[static_cast<std::size_t>(std::lround(t / p.dt())) - 1], 0.9);
}

TEST(Feedback, TimeStepConvergence) {
    SystemParams coarse = small_loop();
    coarse.T = 4.0;
    coarse.N = 5;
    SystemParams fine = coarse;
    fine.N = 10;
    const std::size_t M = 3000;
    EnsembleOptions o;
    o.trajectories = M;
    o.master_seed = 31;
    const auto a = run_ensemble(coarse, o);
    o.master_seed = 32;
    const auto b = run_ensemble(fine, o);
    for (double t : {0.5, 1.0, 1.5, 2.5}) {
        const auto ia = static_cast<std::size_t>(std::lround(t / coarse.dt())) - 1;
        const auto ib = static_cast<std::size_t>(std::lround(t / fine.dt())) - 1;
        const double err = std::hypot(a.population_stderr[ia], b.population_stderr[ib]);
        EXPECT_LT(std::abs(a.mean_population[ia] - b.mean_population[ib]), 2.0 * err) << "t=" << t;
    }
}

TEST(Engine, TwoEmitterSplitterIsUnitary) {
    for (int m = 1; m <= 3; ++m)
        for (int a = 0; a <= m; ++a)
            for (int c = 0; c <= m; ++c) {
                double s = 0.0;
                for (int k = 0; k <= m; ++k)
                    s += detail::splitter_amplitude(m - k, k, m - a, a) * detail::splitter_amplitude(m - k, k, m - c, c);
                EXPECT_NEAR(s, a == c ? 1.0 : 0.0, 1e-12);
            }
}

TEST(Engine, HongOuMandelBunching) {
    EXPECT_NEAR(detail::splitter_amplitude(1, 1, 1, 1), 0.0, 1e-15);
    EXPECT_NEAR(std::abs(detail::splitter_amplitude(1, 1, 2, 0)), std::sqrt(0.5), 1e-15);
}
