#pragma once

// Single quantum trajectory of one emitter (or two identical emitters feeding
// a 50:50 beam splitter) coupled to a time-delayed coherent feedback loop.
//
// Each step of length dt = tau/N runs, in order:
//   1. stochastic C0 / C1 jumps (and, without feedback, Markovian output jumps)
//   2. non-Hermitian coherent evolution under
//        H_eff = delta n + Omega(t)/2 sigma_x
//              + sqrt(gamma/2dt) (sigma+ B_in + e^{i phi} sigma+ B_out + h.c.)
//              - i/2 sum_k C_k^dag C_k
//      as a second-order Taylor propagator, followed by renormalisation
//   3. photon-number measurement of the outgoing bin(s), then discard
//   4. shift of every loop bin towards the output with vacuum inflow
// Steps 1-2 are repeated on substeps of dt when the drive or the jump rates
// are too fast for a single Taylor step; the bins stay put within a step.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "fbqt/error.hpp"
#include "fbqt/params.hpp"
#include "fbqt/random.hpp"
#include "fbqt/state_space.hpp"

namespace fbqt {

enum class Detector : std::uint8_t { output = 0, start = 1, stop = 2 };

struct DetectionEvent {
    double time = 0.0;  ///< step-end time within the trajectory, units of 1/gamma
    Detector detector = Detector::output;
    std::uint8_t multiplicity = 1;

    friend bool operator==(const DetectionEvent&, const DetectionEvent&) = default;
};

using DetectionRecord = std::vector<DetectionEvent>;

enum class JumpKind { none, off_chip, dephasing, output };

struct JumpOutcome {
    JumpKind kind = JumpKind::none;
    int emitter = -1;
    Detector detector = Detector::output;
    double total_probability = 0.0;
};

struct StepOutcome {
    bool jump0 = false;
    bool jump1 = false;
    int output_clicks = 0;
    double time = 0.0;
};

struct TrajectoryAudit {
    std::size_t steps = 0;
    std::size_t skipped_steps = 0;
    std::size_t substeps = 0;
    /// max |sum of outcome probabilities - 1| over all measurements and jump partitions
    double max_closure_error = 0.0;
    /// max |norm - 1| at step end
    double max_norm_error = 0.0;
    double max_jump_probability = 0.0;
};

struct TrajectoryResult {
    DetectionRecord record;
    /// Mean emitter excitation (averaged over emitters) at the end of each step.
    std::vector<double> population;
    double truncated_weight = 0.0;
    TrajectoryAudit audit;
    bool step_size_warning = false;
};

namespace detail {

// H(t) = H0 + Omega(t) V stored as one CSR pattern with two value arrays.
struct SparseGenerator {
    std::vector<std::uint32_t> row_ptr;
    std::vector<std::uint32_t> col;
    std::vector<cplx> h0;
    std::vector<double> v;

    struct Triplet {
        std::uint32_t r, c;
        cplx h0;
        double v;
    };

    static SparseGenerator build(std::size_t dim, std::vector<Triplet> t) {
        std::sort(t.begin(), t.end(), [](const Triplet& a, const Triplet& b) {
            return a.r != b.r ? a.r < b.r : a.c < b.c;
        });
        SparseGenerator g;
        g.row_ptr.assign(dim + 1, 0);
        for (std::size_t i = 0; i < t.size();) {
            std::size_t j = i;
            cplx h{};
            double v = 0.0;
            while (j < t.size() && t[j].r == t[i].r && t[j].c == t[i].c) {
                h += t[j].h0;
                v += t[j].v;
                ++j;
            }
            if (h != cplx{} || v != 0.0) {
                g.col.push_back(t[i].c);
                g.h0.push_back(h);
                g.v.push_back(v);
                ++g.row_ptr[t[i].r + 1];
            }
            i = j;
        }
        for (std::size_t r = 0; r < dim; ++r)
            g.row_ptr[r + 1] += g.row_ptr[r];
        return g;
    }

    void apply(const cplx* x, cplx* y, std::size_t dim, double omega) const {
        if (omega == 0.0) {
            for (std::size_t r = 0; r < dim; ++r) {
                cplx s{};
                for (std::uint32_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k)
                    s += h0[k] * x[col[k]];
                y[r] = s;
            }
            return;
        }
        for (std::size_t r = 0; r < dim; ++r) {
            cplx s{};
            for (std::uint32_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k)
                s += (h0[k] + omega * v[k]) * x[col[k]];
            y[r] = s;
        }
    }
};

struct JumpTerm {
    std::uint32_t src, dst;
    double coef;
};

struct JumpChannel {
    JumpKind kind;
    int emitter;
    Detector detector;
    std::vector<JumpTerm> terms;
    // C^dag C is diagonal for single-emitter operators; weight_by_tls[tls] holds it.
    bool diagonal;
    std::vector<double> weight_by_tls;
};

// <n_start, n_stop | o1, o2> for a lossless 50:50 splitter, s = (b1+b2)/sqrt2, d = (b1-b2)/sqrt2.
inline double splitter_amplitude(int ns, int nd, int o1, int o2) {
    auto fact = [](int n) {
        double f = 1.0;
        for (int k = 2; k <= n; ++k)
            f *= k;
        return f;
    };
    auto binom = [&](int n, int k) { return fact(n) / (fact(k) * fact(n - k)); };
    const int m = o1 + o2;
    if (ns + nd != m)
        return 0.0;
    double s = 0.0;
    for (int j = 0; j <= o1; ++j) {
        const int k = ns - j;
        if (k < 0 || k > o2)
            continue;
        const double sign = ((o2 - k) % 2 == 0) ? 1.0 : -1.0;
        s += binom(o1, j) * binom(o2, k) * sign;
    }
    return s * std::sqrt(fact(ns) * fact(nd)) / (std::pow(2.0, 0.5 * m) * std::sqrt(fact(o1) * fact(o2)));
}

} // namespace detail

/// Precomputed operator tables for one parameter set.  Immutable after
/// construction and shared read-only by all trajectories.
class TrajectoryEngine {
public:
    /// `emitters` = 1: single source with a direct output port.
    /// `emitters` = 2: two identical copies whose outputs meet on a 50:50 splitter.
    explicit TrajectoryEngine(const SystemParams& params, int emitters = 1)
        : p_(params), emitters_(emitters) {
        warnings_ = validate(p_);
        if (emitters != 1 && emitters != 2)
            throw ValidationError("TrajectoryEngine: emitters must be 1 or 2");
        const int cutoff = emitters == 1 ? p_.n_max : p_.n_max_joint;
        basis_ = p_.feedback_enabled ? std::make_shared<const FockBasis>(p_.N, cutoff, emitters)
                                     : std::make_shared<const FockBasis>(FockBasis::emitter_only(emitters));
        dim_ = basis_->size();
        build_generator();
        build_channels();
        if (p_.feedback_enabled)
            build_port();
        excitation_.resize(dim_);
        for (std::size_t i = 0; i < dim_; ++i)
            excitation_[i] = static_cast<double>(std::popcount(basis_->tls_of(i))) / emitters_;
        steps_per_period_ = p_.steps_per_period();
    }

    const SystemParams& params() const { return p_; }
    int emitters() const { return emitters_; }
    const FockBasis& basis() const { return *basis_; }
    const std::shared_ptr<const FockBasis>& basis_ptr() const { return basis_; }
    const std::vector<std::string>& warnings() const { return warnings_; }
    long steps_per_period() const { return steps_per_period_; }

    Ket ground_state() const { return Ket::ground(basis_); }

    /// Number of Taylor substeps used for the step starting at t.
    int substeps_at(double t) const {
        const double dt = p_.dt();
        double scale = 0.0;
        for (int e = 0; e < emitters_; ++e)
            scale += std::abs(p_.delta) + 0.5 * pulse_peak_in(t, t + dt, p_.pulse) + 0.5 * local_rate_;
        const int m = static_cast<int>(std::ceil(scale * dt / kMaxPhasePerSubstep));
        return std::max(1, m);
    }

    /// One stochastic jump draw over a substep of length h.  `psi` must be normalised.
    JumpOutcome maybe_jump(std::span<cplx> psi, double h, Rng& rng) const {
        JumpOutcome out;
        if (channels_.empty())
            return out;
        std::array<double, 8> prob{};
        double total = 0.0;
        for (std::size_t k = 0; k < channels_.size(); ++k) {
            prob[k] = channel_weight(channels_[k], psi) * h;
            total += prob[k];
        }
        out.total_probability = total;
        if (total <= 0.0)
            return out;
        const double u = rng.uniform();
        double acc = 0.0;
        for (std::size_t k = 0; k < channels_.size(); ++k) {
            acc += prob[k];
            if (u < acc) {
                apply_channel(channels_[k], psi);
                out.kind = channels_[k].kind;
                out.emitter = channels_[k].emitter;
                out.detector = channels_[k].detector;
                return out;
            }
        }
        return out;
    }

    /// psi <- (1 - i H h - H^2 h^2 / 2) psi with Omega evaluated at t_mid.  Not renormalised.
    void coherent_substep(std::span<cplx> psi, double t_mid, double h, std::span<cplx> k1, std::span<cplx> k2) const {
        const double omega = pulse_amplitude(t_mid, p_.pulse);
        gen_.apply(psi.data(), k1.data(), dim_, omega);
        gen_.apply(k1.data(), k2.data(), dim_, omega);
        const cplx a{0.0, -h};
        const double b = -0.5 * h * h;
        for (std::size_t i = 0; i < dim_; ++i)
            psi[i] += a * k1[i] + b * k2[i];
    }

    /// Instantaneous rotation exp(-i area/2 sigma_x) on every emitter.
    void kick(std::span<cplx> psi) const {
        const double c = std::cos(0.5 * p_.pulse.area);
        const cplx s{0.0, -std::sin(0.5 * p_.pulse.area)};
        for (int e = 0; e < emitters_; ++e) {
            const std::uint32_t bit = 1u << e;
            for (std::size_t i = 0; i < dim_; ++i) {
                if (basis_->tls_of(i) & bit)
                    continue;
                const cplx g = psi[i], x = psi[i + bit];
                psi[i] = c * g + s * x;
                psi[i + bit] = s * g + c * x;
            }
        }
    }

    struct MeasureOutcome {
        int start = 0;  // photons on the start detector (or the single output port)
        int stop = 0;
        double closure_error = 0.0;
    };

    /// Measures the outgoing bin(s), discards them and shifts the loop by one bin.
    /// `psi` must be normalised; `scratch` needs dim entries.
    MeasureOutcome measure_and_shift(std::span<cplx> psi, Rng& rng, std::span<cplx> scratch) const {
        MeasureOutcome res;
        std::array<double, 64> prob{};
        const std::size_t n_out = outcome_count_;
        for (const auto& g : groups_) {
            for (int m = 0; m <= g.budget; ++m) {
                if (emitters_ == 1) {
                    prob[static_cast<std::size_t>(m)] += std::norm(psi[slots_[g.first + static_cast<std::size_t>(m)]]);
                } else {
                    const std::size_t base = g.first + static_cast<std::size_t>(m * (m + 1) / 2);
                    const auto& U = splitter_[static_cast<std::size_t>(m)];
                    for (int kp = 0; kp <= m; ++kp) {
                        cplx a{};
                        for (int k = 0; k <= m; ++k)
                            a += U[static_cast<std::size_t>(kp * (m + 1) + k)] * psi[slots_[base + static_cast<std::size_t>(k)]];
                        prob[static_cast<std::size_t>(m * (m + 1) / 2 + kp)] += std::norm(a);
                    }
                }
            }
        }
        double total = 0.0;
        for (std::size_t o = 0; o < n_out; ++o)
            total += prob[o];
        res.closure_error = std::abs(total - 1.0);
        if (res.closure_error > 1e-10)
            throw RuntimeError("measure_output_bin: outcome probabilities sum to " + std::to_string(total));

        const double u = rng.uniform() * total;
        std::size_t outcome = 0;
        double acc = 0.0;
        for (; outcome + 1 < n_out; ++outcome) {
            acc += prob[outcome];
            if (u < acc)
                break;
        }
        while (prob[outcome] <= 0.0 && outcome > 0)
            --outcome;
        int m = 0, kp = 0;
        if (emitters_ == 1) {
            m = static_cast<int>(outcome);
            res.start = m;
        } else {
            while ((m + 1) * (m + 2) / 2 <= static_cast<int>(outcome))
                ++m;
            kp = static_cast<int>(outcome) - m * (m + 1) / 2;
            res.start = m - kp;
            res.stop = kp;
        }
        const double inv = 1.0 / std::sqrt(prob[outcome]);
        std::fill(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(dim_), cplx{});
        for (const auto& g : groups_) {
            if (g.budget < m)
                continue;
            cplx a{};
            if (emitters_ == 1) {
                a = psi[slots_[g.first + static_cast<std::size_t>(m)]];
            } else {
                const std::size_t base = g.first + static_cast<std::size_t>(m * (m + 1) / 2);
                const auto& U = splitter_[static_cast<std::size_t>(m)];
                for (int k = 0; k <= m; ++k)
                    a += U[static_cast<std::size_t>(kp * (m + 1) + k)] * psi[slots_[base + static_cast<std::size_t>(k)]];
            }
            scratch[g.target] = a * g.phase * inv;
        }
        std::copy(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(dim_), psi.begin());
        return res;
    }

    /// Leakage past the photon cutoff during one step of length dt (first order).
    double truncation_leak(std::span<const cplx> psi) const {
        double s = 0.0;
        for (const auto& [i, w] : leak_)
            s += w * std::norm(psi[i]);
        return s;
    }

    double excitation(std::span<const cplx> psi) const {
        double s = 0.0;
        for (std::size_t i = 0; i < dim_; ++i)
            s += excitation_[i] * std::norm(psi[i]);
        return s;
    }

    /// Runs n_pulses periods starting from the all-ground vacuum.
    TrajectoryResult run(int n_pulses, std::uint64_t seed) const {
        if (n_pulses < 1)
            throw ValidationError("run_trajectory: n_pulses must be >= 1");
        Rng rng(seed);
        TrajectoryResult res;
        const long S = steps_per_period_;
        const long total_steps = S * n_pulses;
        const double dt = p_.dt();
        res.population.assign(static_cast<std::size_t>(total_steps), 0.0);

        std::vector<cplx> psi(dim_), k1(dim_), k2(dim_), scratch(dim_);
        psi[0] = 1.0;

        const bool gaussian = p_.pulse.shape == PulseShape::gaussian;
        const double center = p_.pulse.center();
        const long kick_step = static_cast<long>(std::floor(center / dt + 1e-9));
        const long settle_from = gaussian ? static_cast<long>(std::ceil((center + p_.pulse.support()) / dt))
                                          : kick_step + 1;
        const bool driven = p_.pulse.area != 0.0;

        for (long s = 0; s < total_steps; ++s) {
            const long period = s / S;
            const long local = s - period * S;
            const double t_period = static_cast<double>(period) * p_.T;
            const double t_a = t_period + static_cast<double>(local) * dt;

            if ((!driven || local >= settle_from) && std::norm(psi[0]) >= 1.0 - p_.settle_tolerance) {
                std::fill(psi.begin(), psi.end(), cplx{});
                psi[0] = 1.0;
                const long next = (period + 1) * S;
                res.audit.skipped_steps += static_cast<std::size_t>(next - s);
                s = next - 1;
                continue;
            }
            ++res.audit.steps;

            if (!gaussian && driven && local == kick_step)
                kick(psi);

            int clicks_start = 0, clicks_stop = 0;
            const int m = substeps_at(t_a - t_period);
            const double h = dt / m;
            res.audit.substeps += static_cast<std::size_t>(m);
            for (int q = 0; q < m; ++q) {
                const JumpOutcome j = maybe_jump(psi, h, rng);
                res.audit.max_jump_probability = std::max(res.audit.max_jump_probability, j.total_probability);
                if (j.total_probability > 0.1)
                    res.step_size_warning = true;
                if (j.kind == JumpKind::output) {
                    if (j.detector == Detector::stop)
                        ++clicks_stop;
                    else
                        ++clicks_start;
                }
                coherent_substep(psi, (t_a - t_period) + (q + 0.5) * h, h, k1, k2);
                normalize(psi);
            }
            if (p_.feedback_enabled) {
                res.truncated_weight += truncation_leak(psi);
                const MeasureOutcome mo = measure_and_shift(psi, rng, scratch);
                res.audit.max_closure_error = std::max(res.audit.max_closure_error, mo.closure_error);
                clicks_start += mo.start;
                clicks_stop += mo.stop;
            }
            const double nrm = norm_sq(psi);
            res.audit.max_norm_error = std::max(res.audit.max_norm_error, std::abs(nrm - 1.0));

            const double t_b = t_a + dt;
            const Detector first = emitters_ == 1 ? Detector::output : Detector::start;
            if (clicks_start > 0)
                res.record.push_back({t_b, first, static_cast<std::uint8_t>(clicks_start)});
            if (clicks_stop > 0)
                res.record.push_back({t_b, Detector::stop, static_cast<std::uint8_t>(clicks_stop)});
            res.population[static_cast<std::size_t>(s)] = excitation(psi);
        }
        return res;
    }

private:
    static constexpr double kMaxPhasePerSubstep = 0.05;

    static double norm_sq(std::span<const cplx> psi) {
        double s = 0.0;
        for (const auto& a : psi)
            s += std::norm(a);
        return s;
    }
    static void normalize(std::span<cplx> psi) {
        const double n = norm_sq(psi);
        if (n <= 0.0)
            throw RuntimeError("trajectory state collapsed to the zero vector");
        const double inv = 1.0 / std::sqrt(n);
        for (auto& a : psi)
            a *= inv;
    }

    double channel_weight(const detail::JumpChannel& ch, std::span<const cplx> psi) const {
        if (ch.diagonal) {
            double s = 0.0;
            const std::size_t mask = basis_->tls_states() - 1;
            for (std::size_t i = 0; i < dim_; ++i)
                s += ch.weight_by_tls[i & mask] * std::norm(psi[i]);
            return s;
        }
        // only the two-emitter Markovian channels land here, on the 4-state emitter space
        std::array<cplx, 4> out{};
        for (const auto& t : ch.terms)
            out[t.dst] += t.coef * psi[t.src];
        double s = 0.0;
        for (const auto& a : out)
            s += std::norm(a);
        return s;
    }

    void apply_channel(const detail::JumpChannel& ch, std::span<cplx> psi) const {
        std::vector<cplx> out(dim_);
        for (const auto& t : ch.terms)
            out[t.dst] += t.coef * psi[t.src];
        std::copy(out.begin(), out.end(), psi.begin());
        normalize(psi);
    }

    void build_generator() {
        using T = detail::SparseGenerator::Triplet;
        std::vector<T> trip;
        const FockBasis& b = *basis_;
        const double markov = p_.feedback_enabled ? 0.0 : p_.gamma;
        const cplx diag{p_.delta, -0.5 * (p_.gamma0 + p_.gamma_prime + markov)};
        const double g = p_.feedback_enabled ? p_.bin_coupling() : 0.0;
        const cplx c_in = g;
        const cplx c_out = g * std::polar(1.0, p_.phi);
        for (std::size_t i = 0; i < dim_; ++i) {
            const std::uint32_t tls = b.tls_of(i);
            for (int e = 0; e < emitters_; ++e) {
                const std::uint32_t bit = 1u << e;
                const auto ui = static_cast<std::uint32_t>(i);
                if (tls & bit) {
                    trip.push_back({ui, ui, diag, 0.0});
                    continue;
                }
                const auto ue = static_cast<std::uint32_t>(i + bit);
                trip.push_back({ue, ui, cplx{}, 0.5});
                trip.push_back({ui, ue, cplx{}, 0.5});
                if (!p_.feedback_enabled)
                    continue;
                // sigma+ B_b : ground with photon in b -> excited, photon removed
                const FockConfig c = b.config(i);
                const int ends[2] = {b.incoming_bin(e), b.outgoing_bin(e)};
                const cplx coef[2] = {c_in, c_out};
                for (int k = 0; k < 2; ++k) {
                    const int occ = c.occupation(ends[k]);
                    if (occ == 0)
                        continue;
                    FockConfig d = c;
                    d.remove_photon(ends[k]);
                    d.tls |= bit;
                    const auto j = static_cast<std::uint32_t>(b.index_of(d));
                    const double f = std::sqrt(static_cast<double>(occ));
                    trip.push_back({j, ui, coef[k] * f, 0.0});
                    trip.push_back({ui, j, std::conj(coef[k]) * f, 0.0});
                }
            }
        }
        gen_ = detail::SparseGenerator::build(dim_, std::move(trip));

        local_rate_ = p_.gamma0 + p_.gamma_prime + markov;

        if (p_.feedback_enabled) {
            // B_b^dag sigma- on a state at the cutoff would leave the space.
            const double dt = p_.dt();
            for (std::size_t i = 0; i < dim_; ++i) {
                if (b.photons_of(i) < b.n_max())
                    continue;
                const FockConfig c = b.config(i);
                double w = 0.0;
                for (int e = 0; e < emitters_; ++e) {
                    if (!c.tls_excited(e))
                        continue;
                    const int in = b.incoming_bin(e), out = b.outgoing_bin(e);
                    if (in == out)
                        w += std::norm(c_in + c_out) * (c.occupation(in) + 1);
                    else
                        w += std::norm(c_in) * (c.occupation(in) + 1) + std::norm(c_out) * (c.occupation(out) + 1);
                }
                if (w > 0.0)
                    leak_.emplace_back(i, w * dt * dt);
            }
        }
    }

    void build_channels() {
        const FockBasis& b = *basis_;
        const std::size_t ts = b.tls_states();
        auto lowering = [&](int e, double amp) {
            std::vector<detail::JumpTerm> terms;
            const std::uint32_t bit = 1u << e;
            for (std::size_t i = 0; i < dim_; ++i)
                if (b.tls_of(i) & bit)
                    terms.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i - bit), amp});
            return terms;
        };
        auto population = [&](int e, double amp) {
            std::vector<detail::JumpTerm> terms;
            const std::uint32_t bit = 1u << e;
            for (std::size_t i = 0; i < dim_; ++i)
                if (b.tls_of(i) & bit)
                    terms.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i), amp});
            return terms;
        };
        auto diag_weight = [&](int e, double rate) {
            std::vector<double> w(ts, 0.0);
            for (std::size_t t = 0; t < ts; ++t)
                if (t & (1u << e))
                    w[t] = rate;
            return w;
        };
        for (int e = 0; e < emitters_; ++e) {
            if (p_.gamma0 > 0.0)
                channels_.push_back({JumpKind::off_chip, e, Detector::output, lowering(e, std::sqrt(p_.gamma0)), true,
                                     diag_weight(e, p_.gamma0)});
            if (p_.gamma_prime > 0.0)
                channels_.push_back({JumpKind::dephasing, e, Detector::output,
                                     population(e, std::sqrt(p_.gamma_prime)), true, diag_weight(e, p_.gamma_prime)});
        }
        if (p_.feedback_enabled)
            return;
        if (emitters_ == 1) {
            channels_.push_back({JumpKind::output, 0, Detector::output, lowering(0, std::sqrt(p_.gamma)), true,
                                 diag_weight(0, p_.gamma)});
        } else {
            // start/stop modes (a1 +- a2)/sqrt2 with a_e = sqrt(gamma) sigma_e^-
            const double amp = std::sqrt(p_.gamma / 2.0);
            auto t1 = lowering(0, amp);
            auto t2 = lowering(1, amp);
            std::vector<detail::JumpTerm> start = t1, stop = t1;
            for (auto t : t2) {
                start.push_back(t);
                t.coef = -t.coef;
                stop.push_back(t);
            }
            channels_.push_back({JumpKind::output, -1, Detector::start, start, false, {}});
            channels_.push_back({JumpKind::output, -1, Detector::stop, stop, false, {}});
        }
    }

    void build_port() {
        const FockBasis& b = *basis_;
        const int cutoff = b.n_max();
        const cplx phase = std::polar(1.0, -p_.delta * p_.dt());
        for (std::size_t r = 0; r < dim_; ++r) {
            const FockConfig c = b.config(r);
            bool rest = true;
            for (int e = 0; e < emitters_; ++e)
                rest = rest && c.occupation(b.outgoing_bin(e)) == 0;
            if (!rest)
                continue;
            Group g;
            g.budget = cutoff - c.photons();
            g.first = static_cast<std::uint32_t>(slots_.size());
            FockConfig shifted = c;
            for (int& bin : shifted.bins)
                --bin;
            g.target = static_cast<std::uint32_t>(b.index_of(shifted));
            g.phase = std::pow(phase, c.photons());
            for (int m = 0; m <= g.budget; ++m) {
                if (emitters_ == 1) {
                    FockConfig d = c;
                    for (int q = 0; q < m; ++q)
                        d.add_photon(b.outgoing_bin(0));
                    slots_.push_back(static_cast<std::uint32_t>(b.index_of(d)));
                } else {
                    for (int k = 0; k <= m; ++k) {
                        FockConfig d = c;
                        for (int q = 0; q < m - k; ++q)
                            d.add_photon(b.outgoing_bin(0));
                        for (int q = 0; q < k; ++q)
                            d.add_photon(b.outgoing_bin(1));
                        slots_.push_back(static_cast<std::uint32_t>(b.index_of(d)));
                    }
                }
            }
            groups_.push_back(g);
        }
        if (emitters_ == 1) {
            outcome_count_ = static_cast<std::size_t>(cutoff + 1);
        } else {
            outcome_count_ = static_cast<std::size_t>((cutoff + 1) * (cutoff + 2) / 2);
            for (int m = 0; m <= cutoff; ++m) {
                std::vector<double> U(static_cast<std::size_t>((m + 1) * (m + 1)));
                for (int kp = 0; kp <= m; ++kp)
                    for (int k = 0; k <= m; ++k)
                        U[static_cast<std::size_t>(kp * (m + 1) + k)] = detail::splitter_amplitude(m - kp, kp, m - k, k);
                splitter_.push_back(std::move(U));
            }
        }
        if (outcome_count_ > 64)
            throw ValidationError("photon cutoff too large for the output measurement tables");
    }

    struct Group {
        std::uint32_t target = 0;
        std::uint32_t first = 0;
        int budget = 0;
        cplx phase{1.0, 0.0};
    };

    SystemParams p_;
    int emitters_;
    std::shared_ptr<const FockBasis> basis_;
    std::size_t dim_ = 0;
    detail::SparseGenerator gen_;
    std::vector<detail::JumpChannel> channels_;
    std::vector<Group> groups_;
    std::vector<std::uint32_t> slots_;
    std::vector<std::vector<double>> splitter_;
    std::size_t outcome_count_ = 1;
    std::vector<std::pair<std::size_t, double>> leak_;
    std::vector<double> excitation_;
    double local_rate_ = 0.0;
    long steps_per_period_ = 0;
    std::vector<std::string> warnings_;
};

// ---------------------------------------------------------------------------
// Ket-level operations.  These build a throwaway engine per call and are meant
// for inspection and tests; trajectories go through TrajectoryEngine::run.

namespace detail {
inline void require_matching_basis(const Ket& ket, const TrajectoryEngine& eng) {
    if (ket.basis().size() != eng.basis().size() || ket.basis().loop_bins() != eng.basis().loop_bins())
        throw ValidationError("ket basis does not match the parameter set");
}
} // namespace detail

/// Unnormalised U_eff |psi> over one step dt, Omega taken at the step midpoint t.
inline Ket apply_coherent_step(const Ket& ket, double t, const SystemParams& params) {
    TrajectoryEngine eng(params, ket.basis().emitters());
    detail::require_matching_basis(ket, eng);
    Ket out = ket;
    std::vector<cplx> k1(out.size()), k2(out.size());
    eng.coherent_substep(out.amplitudes(), t, params.dt(), k1, k2);
    return out;
}

struct JumpResult {
    Ket ket;
    bool jumped0 = false;
    bool jumped1 = false;
};

/// C0 / C1 jump draw over one step dt.
inline JumpResult maybe_jump(const Ket& ket, const SystemParams& params, Rng& rng) {
    TrajectoryEngine eng(params, ket.basis().emitters());
    detail::require_matching_basis(ket, eng);
    JumpResult r{ket};
    const JumpOutcome o = eng.maybe_jump(r.ket.amplitudes(), params.dt(), rng);
    r.jumped0 = o.kind == JumpKind::off_chip;
    r.jumped1 = o.kind == JumpKind::dephasing;
    return r;
}

struct MeasureResult {
    Ket ket;
    int clicks = 0;
};

/// Photon-number measurement of bin 0 of a single-emitter loop.  The measured
/// photons are removed; the loop is not shifted.
inline MeasureResult measure_output_bin(const Ket& ket, Rng& rng) {
    const FockBasis& b = ket.basis();
    if (b.emitters() != 1 || b.loop_bins() < 1)
        throw ValidationError("measure_output_bin: single-emitter loop basis required");
    std::vector<double> prob(static_cast<std::size_t>(b.n_max() + 1), 0.0);
    for (std::size_t i = 0; i < ket.size(); ++i)
        prob[static_cast<std::size_t>(b.config(i).occupation(0))] += std::norm(ket[i]);
    double total = 0.0;
    for (double p : prob)
        total += p;
    if (std::abs(total - 1.0) > 1e-10)
        throw RuntimeError("measure_output_bin: outcome probabilities sum to " + std::to_string(total));
    const double u = rng.uniform() * total;
    int n = 0;
    double acc = 0.0;
    for (; n < b.n_max(); ++n) {
        acc += prob[static_cast<std::size_t>(n)];
        if (u < acc)
            break;
    }
    while (prob[static_cast<std::size_t>(n)] <= 0.0 && n > 0)
        --n;
    MeasureResult r{Ket(ket.basis_ptr()), n};
    const double inv = 1.0 / std::sqrt(prob[static_cast<std::size_t>(n)]);
    for (std::size_t i = 0; i < ket.size(); ++i) {
        FockConfig c = b.config(i);
        if (c.occupation(0) != n)
            continue;
        for (int q = 0; q < n; ++q)
            c.remove_photon(0);
        r.ket[b.index_of(c)] = ket[i] * inv;
    }
    return r;
}

inline TrajectoryResult run_trajectory(const SystemParams& params, int n_pulses, std::uint64_t seed) {
    return TrajectoryEngine(params, 1).run(n_pulses, seed);
}

} // namespace fbqt
