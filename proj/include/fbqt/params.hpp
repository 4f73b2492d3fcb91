#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fbqt/error.hpp"

namespace fbqt {

enum class PulseShape {
    gaussian,
    /// Ideal limit of a vanishing pulse width: an instantaneous rotation by `area` at t0.
    instantaneous
};

/// Drive pulse.  Times in 1/gamma.
struct PulseParams {
    double t_p = 0.01;                    ///< FWHM
    double area = std::numbers::pi;       ///< integrated Rabi angle; 0 means undriven
    std::optional<double> t0;             ///< pulse centre within each period; default 6 sigma
    PulseShape shape = PulseShape::gaussian;

    double sigma() const { return t_p / (2.0 * std::sqrt(2.0 * std::numbers::ln2)); }
    double center() const { return t0.value_or(6.0 * sigma()); }
    /// Half-width beyond which the Gaussian is treated as off (relative amplitude < 1e-14).
    double support() const { return shape == PulseShape::gaussian ? 8.0 * sigma() : 0.0; }
};

/// Rabi rate Omega(t) = area / (sigma sqrt(2 pi)) exp(-(t - t0)^2 / (2 sigma^2)).
inline double pulse_amplitude(double t, const PulseParams& p) {
    if (p.shape != PulseShape::gaussian || p.area == 0.0)
        return 0.0;
    const double s = p.sigma();
    const double x = (t - p.center()) / s;
    return p.area / (s * std::sqrt(2.0 * std::numbers::pi)) * std::exp(-0.5 * x * x);
}

/// Largest Omega over [a, b].
inline double pulse_peak_in(double a, double b, const PulseParams& p) {
    const double c = p.center();
    return pulse_amplitude(std::clamp(c, a, b), p);
}

/// All physical and numerical parameters.  Rates in units of gamma, times in 1/gamma.
struct SystemParams {
    double gamma = 1.0;        ///< total radiative rate into the waveguide
    double gamma0 = 0.0;       ///< off-chip decay
    double gamma_prime = 0.0;  ///< pure dephasing
    double delta = 0.0;        ///< emitter-laser detuning
    double tau = 0.1;          ///< loop round-trip delay
    int N = 20;                ///< bins in the loop, dt = tau / N
    double phi = 0.0;          ///< round-trip phase
    PulseParams pulse;
    double T = 20.0;           ///< pulse period
    int n_max = 2;             ///< total photon cutoff (single emitter)
    int n_max_joint = 2;       ///< total photon cutoff of the two-copy interferometer space
    bool feedback_enabled = true;
    /// Once the drive is off and the all-ground vacuum carries at least
    /// 1 - settle_tolerance of the weight, the remaining period is skipped.
    double settle_tolerance = 1e-10;

    double dt() const { return tau / N; }
    /// Bin coupling sqrt(gamma / (2 dt)) of each of the two loop ends.
    double bin_coupling() const { return std::sqrt(gamma / (2.0 * dt())); }

    long steps_per_period() const { return std::lround(T / dt()); }
};

/// Throws ValidationError on hard violations; returns soft warnings.
inline std::vector<std::string> validate(const SystemParams& p) {
    std::vector<std::string> warnings;
    auto fail = [](const std::string& key, const std::string& why) {
        throw ValidationError(key + ": " + why);
    };
    if (!(p.gamma > 0.0))
        fail("gamma", "must be > 0");
    if (!(p.gamma0 >= 0.0))
        fail("gamma0", "must be >= 0");
    if (!(p.gamma_prime >= 0.0))
        fail("gamma_prime", "must be >= 0");
    if (!std::isfinite(p.delta))
        fail("delta", "must be finite");
    if (!(p.tau > 0.0))
        fail("tau", "must be > 0");
    if (p.N < 1)
        fail("N", "must be >= 1");
    if (p.n_max < 1)
        fail("n_max", "must be >= 1");
    if (p.n_max_joint < 1)
        fail("n_max_joint", "must be >= 1");
    if (!(p.T > 0.0))
        fail("T", "must be > 0");
    if (!(p.pulse.t_p > 0.0))
        fail("t_p", "must be > 0");
    if (!(p.pulse.area >= 0.0))
        fail("area", "must be >= 0");
    if (!(p.settle_tolerance >= 0.0 && p.settle_tolerance < 1e-3))
        fail("settle_tolerance", "must be in [0, 1e-3)");

    const double gdt = p.gamma * p.dt();
    if (gdt > 0.02 + 1e-12)
        fail("tau/N", "gamma*dt = " + std::to_string(gdt) + " exceeds 0.02");
    if (gdt > 0.01 + 1e-12)
        warnings.push_back("gamma*dt = " + std::to_string(gdt) + " above 0.01; bin discretisation error grows");

    const double steps = p.T / p.dt();
    if (std::abs(steps - std::round(steps)) > 1e-6 * steps)
        fail("T", "must be an integer multiple of dt = tau/N");

    if (p.pulse.shape == PulseShape::gaussian) {
        const double s = p.pulse.sigma();
        const double c = p.pulse.center();
        if (c < 5.0 * s - 1e-12)
            fail("t0", "pulse centre must be >= 5 sigma so the pulse is not clipped at t = 0");
        if (c + p.pulse.support() > p.T)
            fail("t0", "pulse extends past the end of the period");
    } else if (p.pulse.center() < 0.0 || p.pulse.center() >= p.T) {
        fail("t0", "instantaneous pulse must lie inside the period");
    }
    return warnings;
}

} // namespace fbqt
