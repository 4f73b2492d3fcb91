#pragma once

// Runs M independent trajectories over a thread pool.  Trajectory i always
// uses seed split_seed(master, i) and results are reduced in fixed chunks
// merged in chunk order, so the output does not depend on the thread count.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fbqt/dynamics.hpp"
#include "fbqt/error.hpp"
#include "fbqt/params.hpp"
#include "fbqt/random.hpp"
#include "fbqt/records.hpp"

namespace fbqt {

struct EnsembleOptions {
    std::uint64_t trajectories = 20000;
    std::uint64_t master_seed = 1;
    int parallelism = 0;  ///< 0: all hardware threads
    int n_pulses = 1;
    int emitters = 1;
    std::size_t chunk = 32;
    /// Spill records to this file once more than spill_threshold events are held.
    std::optional<std::filesystem::path> spill_path;
    std::size_t spill_threshold = 50'000'000;
};

struct EnsembleResult {
    SystemParams params;
    std::uint64_t trajectories = 0;
    std::uint64_t master_seed = 0;
    int emitters = 1;
    int n_pulses = 1;
    RecordStore records;
    std::vector<double> mean_population;
    std::vector<double> population_stderr;
    /// Fraction of (trajectory, pulse) windows with at least one detection.
    double efficiency = 0.0;
    double efficiency_err = 0.0;
    double mean_clicks = 0.0;  ///< photons detected per pulse window
    double truncated_weight = 0.0;  ///< mean leaked weight per trajectory
    TrajectoryAudit audit;
    std::vector<std::string> warnings;
    double runtime_seconds = 0.0;

    double time_at(std::size_t step) const { return (static_cast<double>(step) + 1.0) * params.dt(); }
};

namespace detail {

struct ChunkSums {
    std::vector<double> pop, pop2;
    std::vector<DetectionRecord> records;
    double windows_hit = 0.0;
    double clicks = 0.0;
    double truncated = 0.0;
    TrajectoryAudit audit;
    bool step_warning = false;
};

inline int resolve_parallelism(int requested) {
    if (requested > 0)
        return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

} // namespace detail

inline int hardware_parallelism() { return detail::resolve_parallelism(0); }

inline EnsembleResult run_ensemble(const SystemParams& params, const EnsembleOptions& opt) {
    if (opt.trajectories < 1)
        throw ValidationError("M: must be >= 1");
    if (opt.chunk < 1)
        throw ValidationError("chunk: must be >= 1");
    const auto t_start = std::chrono::steady_clock::now();
    const TrajectoryEngine engine(params, opt.emitters);
    const std::size_t steps = static_cast<std::size_t>(engine.steps_per_period() * opt.n_pulses);
    const std::uint64_t M = opt.trajectories;
    const std::uint64_t n_chunks = (M + opt.chunk - 1) / opt.chunk;
    const double T = params.T;

    std::vector<detail::ChunkSums> chunks(n_chunks);
    std::atomic<std::uint64_t> next{0};
    std::atomic<bool> abort{false};
    std::atomic<std::uint64_t> completed{0};
    std::mutex err_mu;
    std::exception_ptr first_error;

    auto worker = [&] {
        try {
            while (!abort.load()) {
                const std::uint64_t c = next.fetch_add(1);
                if (c >= n_chunks)
                    return;
                detail::ChunkSums& s = chunks[c];
                s.pop.assign(steps, 0.0);
                s.pop2.assign(steps, 0.0);
                const std::uint64_t lo = c * opt.chunk;
                const std::uint64_t hi = std::min<std::uint64_t>(M, lo + opt.chunk);
                for (std::uint64_t i = lo; i < hi; ++i) {
                    TrajectoryResult r = engine.run(opt.n_pulses, split_seed(opt.master_seed, i));
                    for (std::size_t k = 0; k < steps; ++k) {
                        s.pop[k] += r.population[k];
                        s.pop2[k] += r.population[k] * r.population[k];
                    }
                    std::vector<bool> hit(static_cast<std::size_t>(opt.n_pulses), false);
                    for (const auto& e : r.record) {
                        auto w = static_cast<std::size_t>(std::floor((e.time - 1e-12) / T));
                        hit[std::min(w, hit.size() - 1)] = true;
                        s.clicks += e.multiplicity;
                    }
                    for (bool h : hit)
                        s.windows_hit += h ? 1.0 : 0.0;
                    s.truncated += r.truncated_weight;
                    s.audit.steps += r.audit.steps;
                    s.audit.skipped_steps += r.audit.skipped_steps;
                    s.audit.substeps += r.audit.substeps;
                    s.audit.max_closure_error = std::max(s.audit.max_closure_error, r.audit.max_closure_error);
                    s.audit.max_norm_error = std::max(s.audit.max_norm_error, r.audit.max_norm_error);
                    s.audit.max_jump_probability =
                        std::max(s.audit.max_jump_probability, r.audit.max_jump_probability);
                    s.step_warning = s.step_warning || r.step_size_warning;
                    s.records.push_back(std::move(r.record));
                    completed.fetch_add(1);
                }
            }
        } catch (...) {
            std::lock_guard lk(err_mu);
            if (!first_error)
                first_error = std::current_exception();
            abort.store(true);
        }
    };

    const int P = std::max(1, std::min<int>(detail::resolve_parallelism(opt.parallelism), static_cast<int>(n_chunks)));
    if (P == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(P));
        for (int k = 0; k < P; ++k)
            pool.emplace_back(worker);
        for (auto& t : pool)
            t.join();
    }
    if (first_error) {
        std::string what = "unknown error";
        try {
            std::rethrow_exception(first_error);
        } catch (const std::exception& e) {
            what = e.what();
        } catch (...) {
        }
        throw RuntimeError("ensemble aborted after " + std::to_string(completed.load()) + " of " + std::to_string(M) +
                           " trajectories: " + what);
    }

    EnsembleResult res;
    res.params = params;
    res.trajectories = M;
    res.master_seed = opt.master_seed;
    res.emitters = opt.emitters;
    res.n_pulses = opt.n_pulses;
    res.warnings = engine.warnings();
    if (opt.spill_path)
        res.records = RecordStore(opt.spill_threshold, *opt.spill_path);

    std::vector<double> pop(steps, 0.0), pop2(steps, 0.0);
    double hits = 0.0, clicks = 0.0, trunc = 0.0;
    bool step_warning = false;
    std::uint64_t id = 0;
    for (auto& s : chunks) {
        for (std::size_t k = 0; k < steps; ++k) {
            pop[k] += s.pop[k];
            pop2[k] += s.pop2[k];
        }
        hits += s.windows_hit;
        clicks += s.clicks;
        trunc += s.truncated;
        res.audit.steps += s.audit.steps;
        res.audit.skipped_steps += s.audit.skipped_steps;
        res.audit.substeps += s.audit.substeps;
        res.audit.max_closure_error = std::max(res.audit.max_closure_error, s.audit.max_closure_error);
        res.audit.max_norm_error = std::max(res.audit.max_norm_error, s.audit.max_norm_error);
        res.audit.max_jump_probability = std::max(res.audit.max_jump_probability, s.audit.max_jump_probability);
        step_warning = step_warning || s.step_warning;
        for (auto& r : s.records)
            res.records.append(id++, r);
        s = {};
    }

    const double m = static_cast<double>(M);
    res.mean_population.resize(steps);
    res.population_stderr.resize(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        const double mu = pop[k] / m;
        const double var = M > 1 ? std::max(0.0, (pop2[k] - m * mu * mu) / (m - 1.0)) : 0.0;
        res.mean_population[k] = mu;
        res.population_stderr[k] = std::sqrt(var / m);
    }
    const double windows = m * opt.n_pulses;
    res.efficiency = hits / windows;
    res.efficiency_err = std::sqrt(std::max(0.0, res.efficiency * (1.0 - res.efficiency)) / windows);
    res.mean_clicks = clicks / windows;
    res.truncated_weight = trunc / m;

    if (step_warning)
        res.warnings.push_back("jump probability per substep exceeded 0.1 (max " +
                               std::to_string(res.audit.max_jump_probability) + "); reduce dt");
    if (res.truncated_weight > 1e-3)
        res.warnings.push_back("photon cutoff leaks " + std::to_string(res.truncated_weight) +
                               " weight per trajectory; raise n_max");
    const long S = engine.steps_per_period();
    for (int p = 0; p < opt.n_pulses; ++p) {
        const double residual = res.mean_population[static_cast<std::size_t>((p + 1) * S - 1)];
        if (residual > 1e-4) {
            res.warnings.push_back("excited population " + std::to_string(residual) + " left at the end of period " +
                                   std::to_string(p) + "; T too short for full relaxation");
            break;
        }
    }
    res.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return res;
}

inline EnsembleResult run_hom_ensemble(const SystemParams& params, EnsembleOptions opt) {
    opt.emitters = 2;
    return run_ensemble(params, opt);
}

/// Same reductions as the ensemble: (eta, stderr).
inline std::pair<double, double> efficiency(const EnsembleResult& r) { return {r.efficiency, r.efficiency_err}; }

} // namespace fbqt
