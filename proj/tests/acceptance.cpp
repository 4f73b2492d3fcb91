// Acceptance suite: one PASS/FAIL line per primary criterion, nonzero exit if any fails.
//
//   acceptance [--only 1,3,...] [--out DIR]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fbqt/fbqt.hpp"

using namespace fbqt;

namespace {

constexpr std::uint64_t kM = 20000;
constexpr std::uint64_t kPopulationM = 10000;

// Feedback operating point located by the (tau, phi) scan recorded in the notes.
constexpr double kOpTau = 0.02;
constexpr int kOpN = 4;
constexpr double kOpPhi = 2.0;

std::filesystem::path g_out = "acceptance_out";

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(double x, int prec = 5) {
    std::ostringstream os;
    os.precision(prec);
    os << x;
    return os.str();
}

SystemParams at_op_point(SystemParams p) {
    p.tau = kOpTau;
    p.N = kOpN;
    p.phi = kOpPhi;
    return p;
}

EnsembleOptions ensemble(std::uint64_t M, std::uint64_t seed, int emitters = 1) {
    EnsembleOptions o;
    o.trajectories = M;
    o.master_seed = seed;
    o.emitters = emitters;
    return o;
}

struct Figures {
    CorrelationResult hbt, hom;
    double eta = 0.0;
    double hom_spread = 0.0;
    CoincidenceHistogram hom_histogram;
};

// HBT and HOM estimates for one parameter set, seeds derived from `seed`.
Figures measure(const SystemParams& p, std::uint64_t M, std::uint64_t seed) {
    Figures f;
    const EnsembleResult e1 = run_ensemble(p, ensemble(M, split_seed(seed, 1)));
    Rng rng(split_seed(seed, 2));
    f.hbt = correlation(hbt_correlate(e1, rng), p.T, CorrelationKind::hbt);
    f.eta = e1.efficiency;
    const EnsembleResult e2 = run_ensemble(p, ensemble(M, split_seed(seed, 3), 2));
    f.hom_histogram = hom_correlate(e2);
    f.hom = correlation(f.hom_histogram, p.T, CorrelationKind::hom);
    f.hom_spread = side_peak_spread(f.hom_histogram, p.T, 0.5 * p.T);
    return f;
}

double I_of(const CorrelationResult& r) { return *r.indistinguishability; }

// ---------------------------------------------------------------------------

Verdict markov_populations() {
    SystemParams p;
    p.feedback_enabled = false;
    const auto t0 = std::chrono::steady_clock::now();
    const EnsembleResult e = run_ensemble(p, ensemble(kPopulationM, 101));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::vector<double> grid(e.mean_population.size());
    for (std::size_t k = 0; k < grid.size(); ++k)
        grid[k] = e.time_at(k);
    const auto rho = lindblad_solve(p, grid);
    double linf = 0.0;
    for (std::size_t k = 0; k < grid.size(); ++k)
        linf = std::max(linf, std::abs(e.mean_population[k] - rho[k].ee));
    return {linf < 0.01, "L_inf = " + fmt(linf) + " (< 0.01), M = " + std::to_string(kPopulationM) + ", " +
                             fmt(secs, 3) + " s on " + std::to_string(hardware_parallelism()) + " thread(s)"};
}

Verdict oracle_estimators() {
    SystemParams clean;
    clean.feedback_enabled = false;
    SystemParams noisy = clean;
    noisy.gamma0 = 0.1;
    noisy.gamma_prime = 0.5;
    bool pass = true;
    std::string detail;
    int tag = 0;
    for (const SystemParams& p : {clean, noisy}) {
        const QrtCorrelations o = qrt_correlations(p);
        const Figures f = measure(p, kM, 200 + static_cast<std::uint64_t>(tag));
        const double dg = std::abs(f.hbt.g2 - o.g2), sg = f.hbt.g2_err;
        const double dI = std::abs(I_of(f.hom) - o.indistinguishability), sI = f.hom.g2_err;
        const bool ok = dg < 2.0 * sg && dI < 2.0 * sI;
        pass = pass && ok;
        detail += std::string(tag ? "; gamma0=0.1 gamma'=0.5: " : "t_p=0.01: ") + "g2 " + fmt(f.hbt.g2) + "+-" +
                  fmt(sg, 2) + " vs " + fmt(o.g2) + ", I " + fmt(I_of(f.hom)) + "+-" + fmt(sI, 2) + " vs " +
                  fmt(o.indistinguishability);
        ++tag;
    }
    return {pass, detail + " (within 2 sigma)"};
}

Verdict feedback_limits() {
    SystemParams p;
    p.tau = 0.02;
    p.N = 4;
    p.phi = 0.0;
    const EnsembleResult e = run_ensemble(p, ensemble(kPopulationM, 301));
    const double t0 = p.pulse.center();
    // weighted least squares of log population over [t0 + 0.5, t0 + 3], weight p^2 / stderr^2
    double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t k = 0; k < e.mean_population.size(); ++k) {
        const double t = e.time_at(k) - t0;
        const double m = e.mean_population[k], se = e.population_stderr[k];
        if (t < 0.5 || t > 3.0 || m <= 0.0 || se <= 0.0)
            continue;
        const double w = m * m / (se * se), y = std::log(m);
        sw += w;
        sx += w * t;
        sy += w * y;
        sxx += w * t * t;
        sxy += w * t * y;
    }
    const double rate = -(sw * sxy - sx * sy) / (sw * sxx - sx * sx);

    p.phi = std::numbers::pi;
    const EnsembleResult d = run_ensemble(p, ensemble(2000, 302));
    const auto k5 = static_cast<std::size_t>(std::lround((t0 + 5.0) / p.dt())) - 1;
    const double trapped = d.mean_population[k5];
    const bool ok = rate >= 1.9 && rate <= 2.1 && trapped > 0.9;
    return {ok, "phi=0 fitted rate " + fmt(rate, 4) + " gamma (in [1.9, 2.1], closed form " +
                    fmt(smalldelay_feedback_rate(1.0, 0.0), 2) + "); phi=pi population at t0+5 = " + fmt(trapped, 4) +
                    " (> 0.9)"};
}

Verdict feedback_improvement() {
    // (a) noisy operating point
    SystemParams base;
    base.gamma0 = 0.1;
    base.gamma_prime = 0.5;
    SystemParams off = base;
    off.feedback_enabled = false;
    const Figures fa_on = measure(at_op_point(base), kM, 401);
    const Figures fa_off = measure(off, kM, 402);
    const double zg = (fa_off.hbt.g2 - fa_on.hbt.g2) / std::hypot(fa_off.hbt.g2_err, fa_on.hbt.g2_err);
    const double zI = (I_of(fa_on.hom) - I_of(fa_off.hom)) / std::hypot(fa_off.hom.g2_err, fa_on.hom.g2_err);
    const bool ok_a = zg > 3.0 && zI > 3.0;

    // (b) pulse-width sweep with gamma0 = gamma' = 0
    std::vector<RunSummary> rows;
    double rel_g = 0.0, rel_I = 0.0;
    const auto grid = log_grid(0.01, 0.5, 6);
    std::uint64_t seed = 500;
    for (double tp : grid) {
        SystemParams p;
        p.pulse.t_p = tp;
        SystemParams q = p;
        q.feedback_enabled = false;
        const Figures on = measure(at_op_point(p), kM, seed++);
        const Figures of = measure(q, kM, seed++);
        rel_g += (of.hbt.g2 - on.hbt.g2) / of.hbt.g2;
        rel_I += (I_of(on.hom) - I_of(of.hom)) / (1.0 - I_of(of.hom));
        rows.push_back({"", tp, true, on.hbt, on.hom, on.eta, 0.0, false});
        rows.push_back({"", tp, false, of.hbt, of.hom, of.eta, 0.0, false});
        std::cerr << "  t_p=" << tp << ": g2 " << fmt(on.hbt.g2) << " vs " << fmt(of.hbt.g2) << ", I "
                  << fmt(I_of(on.hom)) << " vs " << fmt(I_of(of.hom)) << '\n';
    }
    rel_g /= static_cast<double>(grid.size());
    rel_I /= static_cast<double>(grid.size());
    std::filesystem::create_directories(g_out);
    write_summary_csv(g_out / "pulse_width_sweep.csv", "t_p", rows);
    const bool ok_b = std::abs(100.0 * rel_g - 56.0) <= 20.0 && std::abs(100.0 * rel_I - 55.0) <= 20.0;

    return {ok_a && ok_b,
            "(a) g2 " + fmt(fa_on.hbt.g2) + " vs " + fmt(fa_off.hbt.g2) + " (" + fmt(zg, 3) + " sigma), I " +
                fmt(I_of(fa_on.hom)) + " vs " + fmt(I_of(fa_off.hom)) + " (" + fmt(zI, 3) + " sigma), need > 3 both; " +
                "(b) mean relative improvement g2 " + fmt(100.0 * rel_g, 3) + "% (56 +- 20), I " +
                fmt(100.0 * rel_I, 3) + "% (55 +- 20); tau=" + fmt(kOpTau) + " phi=" + fmt(kOpPhi)};
}

Verdict histogram_structure() {
    // fig3 preset parameters at the enhancement phase (phi = 0, default loop)
    SystemParams p;
    p.pulse.t_p = 0.01;
    p.gamma0 = 0.1;
    p.gamma_prime = 0.5;
    SystemParams off = p;
    off.feedback_enabled = false;
    const Figures on = measure(p, kM, 601);
    const Figures of = measure(off, kM, 602);
    std::filesystem::create_directories(g_out);
    write_histogram_csv(on.hom_histogram, g_out / "hom_histogram_feedback_on.csv");
    write_histogram_csv(of.hom_histogram, g_out / "hom_histogram_feedback_off.csv");

    // peaks only near multiples of T: fraction of counts farther than 0.4 T from every kT
    auto stray = [&](const CoincidenceHistogram& h) {
        double out = 0.0;
        for (std::size_t i = 0; i < h.counts.size(); ++i) {
            const double t = h.t_prime(i);
            if (std::abs(t - p.T * std::round(t / p.T)) > 0.4 * p.T)
                out += static_cast<double>(h.counts[i]);
        }
        return out / static_cast<double>(std::max<std::uint64_t>(1, h.total()));
    };
    const double stray_on = stray(on.hom_histogram), stray_off = stray(of.hom_histogram);
    const bool ok_peaks = stray_on < 1e-3 && stray_off < 1e-3;

    // two identical noiseless sources: central peak consistent with zero
    SystemParams ideal;
    ideal.pulse.shape = PulseShape::instantaneous;
    ideal.pulse.t0 = 0.1;
    bool ok_zero = true;
    std::string zero_detail;
    for (bool fb : {true, false}) {
        ideal.feedback_enabled = fb;
        const EnsembleResult e = run_hom_ensemble(ideal, ensemble(kM, fb ? 603 : 604));
        const CorrelationResult r = correlation(hom_correlate(e), ideal.T, CorrelationKind::hom);
        const bool ok = r.A0 == 0.0 || r.g2 - 2.0 * r.g2_err <= 0.0;
        ok_zero = ok_zero && ok;
        zero_detail += std::string(fb ? "A0(on) = " : ", A0(off) = ") + fmt(r.A0) + " of AT " + fmt(r.AT);
    }

    const bool ok_sharp = on.hom_spread < of.hom_spread;
    return {ok_peaks && ok_zero && ok_sharp,
            "stray fraction " + fmt(stray_on, 2) + "/" + fmt(stray_off, 2) + " (< 1e-3); " + zero_detail +
                "; side-peak spread " + fmt(on.hom_spread, 4) + " (on) vs " + fmt(of.hom_spread, 4) + " (off)"};
}

Verdict estimator_suite() {
    bool ok = true;
    std::string why;
    auto expect = [&](bool c, const std::string& what) {
        if (!c) {
            ok = false;
            why += what + "; ";
        }
    };
    const auto a = g2_from_areas(10, 1000, CorrelationKind::hbt);
    expect(a.g2 == 0.01 && std::abs(a.g2_err - 0.01 * std::sqrt(0.101)) < 1e-15, "HBT 10/1000");
    expect(std::abs(a.g2_err - 0.00318) < 5e-6, "HBT error 0.00318");
    const auto b = g2_from_areas(0, 500, CorrelationKind::hbt);
    expect(b.g2 == 0.0 && b.upper_bound && b.upper_limit == 1.0 / 500, "HBT 0/500 upper bound");
    const auto c = g2_from_areas(200, 1000, CorrelationKind::hom);
    expect(c.g2 == 0.2 && c.indistinguishability && *c.indistinguishability == 0.8, "HOM 200/1000");
    bool threw = false;
    try {
        g2_from_areas(1, 0, CorrelationKind::hbt);
    } catch (const RuntimeError&) {
        threw = true;
    }
    expect(threw, "AT = 0 must fail");

    // 10^3 hand-placed events: 250 trajectories x 4 events on the dt grid
    const double T = 20.0;
    const std::int64_t per_traj = 4000;  // T / dt
    std::mt19937_64 g(2024);
    std::uniform_int_distribution<int> step(1, 3000);
    EnsembleResult r;
    r.params.T = T;
    r.emitters = 2;
    std::vector<std::pair<std::int64_t, bool>> flat;
    for (std::uint64_t i = 0; i < 250; ++i) {
        DetectionRecord rec;
        for (int k = 0; k < 4; ++k) {
            const int q = step(g);
            const bool stop = (i + static_cast<std::uint64_t>(k)) % 2 == 1;
            rec.push_back({q * r.params.dt(), stop ? Detector::stop : Detector::start, 1});
            flat.push_back({q + static_cast<std::int64_t>(i) * per_traj, stop});
        }
        std::sort(rec.begin(), rec.end(), [](const auto& x, const auto& y) { return x.time < y.time; });
        r.records.append(i, rec);
    }
    const CoincidenceHistogram h = hom_correlate(r);
    const PeakAreas pa = peak_areas(h, T, 0.5 * T);
    double A0 = 0, Ap = 0, Am = 0;
    const std::int64_t R = 20;  // ticks per histogram bin
    for (const auto& [qa, sa] : flat)
        for (const auto& [qb, sb] : flat) {
            if (sa || !sb)
                continue;
            const std::int64_t d = qb - qa;
            const std::int64_t k = d >= 0 ? (d + R / 2) / R : -((-d + R / 2) / R);
            const double c = static_cast<double>(k) * T / 200.0;
            if (std::abs(c) > 5.0 * T + 1e-9)
                continue;
            A0 += std::abs(c) <= 0.5 * T + 1e-9;
            Ap += std::abs(c - T) <= 0.5 * T + 1e-9;
            Am += std::abs(c + T) <= 0.5 * T + 1e-9;
        }
    expect(pa.A0 == A0 && pa.A_plus == Ap && pa.A_minus == Am, "peak areas vs brute force");
    expect(h.total_starts + h.total_stops == 1000, "event count");
    return {ok, ok ? "g2_from_areas examples exact; peak areas A0=" + fmt(pa.A0) + " A+=" + fmt(pa.A_plus) +
                         " A-=" + fmt(pa.A_minus) + " match brute force over 1000 events"
                   : why};
}

bool same(const EnsembleResult& a, const EnsembleResult& b) {
    if (a.mean_population != b.mean_population || a.population_stderr != b.population_stderr ||
        a.efficiency != b.efficiency || a.efficiency_err != b.efficiency_err || a.mean_clicks != b.mean_clicks ||
        a.truncated_weight != b.truncated_weight || a.audit.steps != b.audit.steps ||
        a.audit.substeps != b.audit.substeps || a.audit.max_closure_error != b.audit.max_closure_error ||
        a.records.trajectories() != b.records.trajectories())
        return false;
    for (std::uint64_t i = 0; i < a.records.trajectories(); ++i)
        if (a.records.at(i) != b.records.at(i))
            return false;
    return true;
}

Verdict determinism() {
    SystemParams p;
    p.gamma0 = 0.1;
    p.gamma_prime = 0.5;
    bool identical = true;
    for (int emitters : {1, 2}) {
        const EnsembleResult ref = run_ensemble(p, [&] {
            auto o = ensemble(emitters == 1 ? 1000 : 300, 701, emitters);
            o.parallelism = 1;
            return o;
        }());
        for (int par : {2, hardware_parallelism()}) {
            auto o = ensemble(emitters == 1 ? 1000 : 300, 701, emitters);
            o.parallelism = par;
            identical = identical && same(ref, run_ensemble(p, o));
        }
    }
    double worst_closure = 0.0, worst_norm = 0.0;
    for (int emitters : {1, 2}) {
        const TrajectoryEngine eng(p, emitters);
        for (std::uint64_t i = 0; i < 100; ++i) {
            const TrajectoryResult r = eng.run(1, split_seed(702, i));
            worst_closure = std::max(worst_closure, r.audit.max_closure_error);
            worst_norm = std::max(worst_norm, r.audit.max_norm_error);
        }
    }
    const bool ok = identical && worst_closure < 1e-8 && worst_norm < 1e-8;
    return {ok, std::string(identical ? "bit-identical" : "DIFFERENT") + " across parallelism {1, 2, " +
                    std::to_string(hardware_parallelism()) + "}; max closure error " + fmt(worst_closure, 3) +
                    ", max norm error " + fmt(worst_norm, 3) + " over 2 x 100 audited trajectories"};
}

Verdict convergence() {
    SystemParams p = at_op_point(SystemParams{});
    p.pulse.t_p = 0.1;
    const Figures ref = measure(p, kM, 801);
    SystemParams cut = p;
    cut.n_max = 3;
    cut.n_max_joint = 3;
    const Figures fc = measure(cut, kM, 801);
    SystemParams fine = p;
    fine.N = 2 * p.N;
    const Figures ff = measure(fine, kM, 801);
    bool ok = true;
    std::string detail;
    for (const auto& [name, f] : {std::pair<const char*, const Figures*>{"n_max=3", &fc}, {"2N", &ff}}) {
        const double dg = std::abs(f->hbt.g2 - ref.hbt.g2) / std::hypot(f->hbt.g2_err, ref.hbt.g2_err);
        const double dI = std::abs(I_of(f->hom) - I_of(ref.hom)) / std::hypot(f->hom.g2_err, ref.hom.g2_err);
        ok = ok && dg < 2.0 && dI < 2.0;
        detail += std::string(detail.empty() ? "" : "; ") + name + ": dg2 = " + fmt(dg, 3) + " sigma, dI = " +
                  fmt(dI, 3) + " sigma";
    }
    return {ok, detail + " (< 2); base g2 " + fmt(ref.hbt.g2) + ", I " + fmt(I_of(ref.hom))};
}

} // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            std::string item;
            while (std::getline(ss, item, ','))
                only.insert(std::stoi(item));
        } else if (a == "--out" && i + 1 < argc) {
            g_out = argv[++i];
        } else {
            std::cerr << "usage: acceptance [--only 1,2,...] [--out DIR]\n";
            return 2;
        }
    }
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
        {"Markovian equivalence (populations)", markov_populations},
        {"oracle equivalence (estimators)", oracle_estimators},
        {"feedback rate limits", feedback_limits},
        {"feedback improvement, direction and magnitude", feedback_improvement},
        {"histogram structure", histogram_structure},
        {"estimator unit suite", estimator_suite},
        {"determinism and parallel safety", determinism},
        {"cutoff and step convergence", convergence},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.contains(id))
            continue;
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << " | "
                  << v.detail << " [" << fmt(secs, 3) << " s]" << std::endl;
        failed += v.pass ? 0 : 1;
    }
    return failed == 0 ? 0 : 1;
}
