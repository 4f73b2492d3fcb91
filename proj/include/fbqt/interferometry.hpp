#pragma once

// Start/stop coincidence histograms over the concatenated detection record
// (trajectory i shifted by i * n_pulses * T) and the peak-area estimators
//   g2 = A(0) / A(T),  err = g2 sqrt(1/A(0) + 1/A(T)),  I = 1 - g2_HOM.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "fbqt/ensemble.hpp"
#include "fbqt/error.hpp"
#include "fbqt/random.hpp"

namespace fbqt {

struct CoincidenceHistogram {
    double bin_width = 0.0;
    double t_max = 0.0;
    std::vector<std::uint64_t> counts;  ///< bin k (from -K to K) centred at k * bin_width
    std::uint64_t total_starts = 0;
    std::uint64_t total_stops = 0;
    std::vector<std::string> warnings;

    long half_bins() const { return static_cast<long>(counts.size() / 2); }
    double t_prime(std::size_t i) const { return (static_cast<double>(i) - static_cast<double>(half_bins())) * bin_width; }
    std::uint64_t total() const {
        std::uint64_t s = 0;
        for (auto c : counts)
            s += c;
        return s;
    }
};

struct HistogramOptions {
    std::optional<double> bin_width;  ///< default T / 200
    std::optional<double> t_max;      ///< default 5 T
};

/// Detection count at integer step tick q (time q * dt).
struct Tick {
    std::int64_t q = 0;
    std::uint32_t n = 0;
};

namespace detail {

// Rounds a / b to the nearest integer, halves away from zero (b > 0).
inline std::int64_t div_round(std::int64_t a, std::int64_t b) {
    return a >= 0 ? (a + b / 2) / b : -((-a + b / 2) / b);
}

} // namespace detail

/// Histogram of every start-stop pair with |t_stop - t_start| <= t_max.
/// `starts` and `stops` must be sorted by tick.
inline CoincidenceHistogram correlate_ticks(const std::vector<Tick>& starts, const std::vector<Tick>& stops, double dt,
                                            double bin_width, double t_max) {
    if (!(dt > 0.0) || !(bin_width > 0.0) || !(t_max >= bin_width))
        throw ValidationError("correlate: need dt > 0 and t_max >= bin_width > 0");
    CoincidenceHistogram h;
    h.bin_width = bin_width;
    h.t_max = t_max;
    const auto K = static_cast<std::int64_t>(std::llround(t_max / bin_width));
    h.counts.assign(static_cast<std::size_t>(2 * K + 1), 0);
    for (const auto& s : starts)
        h.total_starts += s.n;
    for (const auto& s : stops)
        h.total_stops += s.n;

    const double ratio = bin_width / dt;
    const auto R = static_cast<std::int64_t>(std::llround(ratio));
    const bool integral = R > 0 && std::abs(ratio - static_cast<double>(R)) < 1e-9 * ratio;
    // every tick difference that can land in |k| <= K
    const auto span = static_cast<std::int64_t>(std::floor((static_cast<double>(K) + 0.5) * ratio)) + 1;

    std::size_t lo = 0;
    for (const auto& a : starts) {
        while (lo < stops.size() && stops[lo].q < a.q - span)
            ++lo;
        for (std::size_t j = lo; j < stops.size() && stops[j].q <= a.q + span; ++j) {
            const std::int64_t d = stops[j].q - a.q;
            const std::int64_t k = integral ? detail::div_round(d, R)
                                            : static_cast<std::int64_t>(std::round(static_cast<double>(d) / ratio));
            if (k < -K || k > K)
                continue;
            if (std::abs(static_cast<double>(d) * dt) > t_max + 1e-9 * t_max)
                continue;
            h.counts[static_cast<std::size_t>(k + K)] += static_cast<std::uint64_t>(a.n) * stops[j].n;
        }
    }
    return h;
}

namespace detail {

inline std::pair<double, double> histogram_grid(const EnsembleResult& r, const HistogramOptions& opt) {
    const double T = r.params.T;
    return {opt.bin_width.value_or(T / 200.0), opt.t_max.value_or(5.0 * T)};
}

inline std::int64_t event_tick(const DetectionEvent& e, std::uint64_t traj, std::int64_t steps_per_traj, double dt) {
    return static_cast<std::int64_t>(std::llround(e.time / dt)) + static_cast<std::int64_t>(traj) * steps_per_traj;
}

inline void push_tick(std::vector<Tick>& v, std::int64_t q, std::uint32_t n) {
    if (n == 0)
        return;
    if (!v.empty() && v.back().q == q)
        v.back().n += n;
    else
        v.push_back({q, n});
}

} // namespace detail

/// HBT: every detected photon goes to start or stop with probability 1/2.
inline CoincidenceHistogram hbt_correlate(const EnsembleResult& r, Rng& rng, const HistogramOptions& opt = {}) {
    const double dt = r.params.dt();
    const std::int64_t steps = r.params.steps_per_period() * r.n_pulses;
    std::vector<Tick> starts, stops;
    r.records.for_each([&](std::uint64_t id, const DetectionRecord& rec) {
        for (const auto& e : rec) {
            std::uint32_t s = 0;
            for (int k = 0; k < e.multiplicity; ++k)
                s += rng.coin() ? 1u : 0u;
            const std::int64_t q = detail::event_tick(e, id, steps, dt);
            detail::push_tick(starts, q, s);
            detail::push_tick(stops, q, e.multiplicity - s);
        }
    });
    const auto [w, tmax] = detail::histogram_grid(r, opt);
    CoincidenceHistogram h = correlate_ticks(starts, stops, dt, w, tmax);
    if (starts.empty() && stops.empty())
        h.warnings.push_back("empty detection record: histogram is empty");
    return h;
}

/// HOM: records already carry start/stop labels.
inline CoincidenceHistogram hom_correlate(const EnsembleResult& r, const HistogramOptions& opt = {}) {
    if (r.emitters != 2)
        throw ValidationError("hom_correlate: needs a two-copy ensemble");
    const double dt = r.params.dt();
    const std::int64_t steps = r.params.steps_per_period() * r.n_pulses;
    std::vector<Tick> starts, stops;
    r.records.for_each([&](std::uint64_t id, const DetectionRecord& rec) {
        for (const auto& e : rec) {
            const std::int64_t q = detail::event_tick(e, id, steps, dt);
            if (e.detector == Detector::stop)
                detail::push_tick(stops, q, e.multiplicity);
            else
                detail::push_tick(starts, q, e.multiplicity);
        }
    });
    const auto [w, tmax] = detail::histogram_grid(r, opt);
    CoincidenceHistogram h = correlate_ticks(starts, stops, dt, w, tmax);
    if (starts.empty() && stops.empty())
        h.warnings.push_back("empty detection record: histogram is empty");
    return h;
}

struct PeakAreas {
    double A0 = 0.0;
    double AT = 0.0;  ///< mean of the +T and -T peaks
    double A_plus = 0.0;
    double A_minus = 0.0;
};

/// Sum of counts with |t' - c| <= window for c = 0, +T, -T.
inline PeakAreas peak_areas(const CoincidenceHistogram& h, double T, double window) {
    if (!(window > 0.0) || window > 0.5 * T * (1.0 + 1e-12))
        throw ValidationError("peak_areas: window must be in (0, T/2]");
    if (h.t_max + 0.5 * h.bin_width < T + window * (1.0 - 1e-12))
        throw ValidationError("peak_areas: histogram range does not cover the peaks at +-T");
    PeakAreas a;
    const double eps = 1e-9 * h.bin_width;
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        const double t = h.t_prime(i);
        const auto c = static_cast<double>(h.counts[i]);
        if (std::abs(t) <= window + eps)
            a.A0 += c;
        if (std::abs(t - T) <= window + eps)
            a.A_plus += c;
        if (std::abs(t + T) <= window + eps)
            a.A_minus += c;
    }
    a.AT = 0.5 * (a.A_plus + a.A_minus);
    if (a.AT <= 0.0)
        throw RuntimeError("peak_areas: side peaks are empty, g2 estimator undefined");
    return a;
}

/// Spread (standard deviation of |t' - T| and |t' + T|) of the two side peaks.
inline double side_peak_spread(const CoincidenceHistogram& h, double T, double window) {
    double n = 0.0, s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        const double t = h.t_prime(i);
        const auto c = static_cast<double>(h.counts[i]);
        for (double centre : {T, -T}) {
            const double d = std::abs(t - centre);
            if (d <= window) {
                n += c;
                s += c * d;
                s2 += c * d * d;
            }
        }
    }
    if (n < 2.0)
        return std::numeric_limits<double>::quiet_NaN();
    const double mu = s / n;
    return std::sqrt(std::max(0.0, (s2 - n * mu * mu) / (n - 1.0)));
}

enum class CorrelationKind { hbt, hom };

inline const char* to_string(CorrelationKind k) { return k == CorrelationKind::hbt ? "HBT" : "HOM"; }

struct CorrelationResult {
    CorrelationKind kind = CorrelationKind::hbt;
    double A0 = 0.0;
    double AT = 0.0;
    double g2 = 0.0;
    double g2_err = 0.0;
    /// A0 = 0: g2 is only bounded, g2 < upper_limit = 1/AT at one sigma.
    bool upper_bound = false;
    double upper_limit = 0.0;
    std::optional<double> indistinguishability;
};

inline CorrelationResult g2_from_areas(double A0, double AT, CorrelationKind kind) {
    if (!(A0 >= 0.0))
        throw ValidationError("g2_from_areas: A0 must be >= 0");
    if (!(AT > 0.0))
        throw RuntimeError("g2_from_areas: AT = 0, estimator undefined");
    CorrelationResult r;
    r.kind = kind;
    r.A0 = A0;
    r.AT = AT;
    r.g2 = A0 / AT;
    if (A0 > 0.0) {
        r.g2_err = r.g2 * std::sqrt(1.0 / A0 + 1.0 / AT);
    } else {
        r.upper_bound = true;
        r.upper_limit = 1.0 / AT;
    }
    if (kind == CorrelationKind::hom)
        r.indistinguishability = 1.0 - r.g2;
    return r;
}

inline CorrelationResult correlation(const CoincidenceHistogram& h, double T, CorrelationKind kind,
                                     std::optional<double> window = std::nullopt) {
    const PeakAreas a = peak_areas(h, T, window.value_or(0.5 * T));
    return g2_from_areas(a.A0, a.AT, kind);
}

/// CSV with columns t_prime_over_gamma,counts.
inline void write_histogram_csv(const CoincidenceHistogram& h, const std::filesystem::path& path, double gamma = 1.0) {
    std::ofstream os(path, std::ios::trunc);
    if (!os)
        throw IoError("cannot open " + path.string() + " for writing");
    os << "t_prime_over_gamma,counts\n" << std::setprecision(10);
    for (std::size_t i = 0; i < h.counts.size(); ++i)
        os << h.t_prime(i) * gamma << ',' << h.counts[i] << '\n';
    if (!os)
        throw IoError("write failed on " + path.string());
}

} // namespace fbqt
