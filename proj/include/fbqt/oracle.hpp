#pragma once

// Markovian reference for the emitter without feedback:
//   d rho/dt = -i[delta s+s- + Omega(t)/2 (s+ + s-), rho]
//              + D[sqrt(gamma) s-] + D[sqrt(gamma0) s-] + D[sqrt(gamma') s+s-]
// and two-time correlators from the quantum regression theorem, with the
// waveguide output a = sqrt(gamma) s-.  Pulsed-source figures:
//
//   N   = int <a+a> dt
//   X2  = int int <a+(t) a+(t') a(t') a(t)>            (all t, t')
//   J1  = int int |<a+(t') a(t)>|^2
//   J2  = int int |<a(t') a(t)>|^2
//   K   = int |<a(t)>|^2
//
//   g2(0)      = X2 / N^2
//   g2_HOM(0)  = (X2 + N^2 - J1 - J2) / (2 (N^2 - K^2))
//
// g2_HOM is the expectation of the start/stop peak-area ratio for two
// identical phase-locked copies on a 50:50 splitter, so I = 1 - g2_HOM is
// what the histogram estimator converges to (0.5 for fully distinguishable
// photons).  The mean wavepacket overlap J1 / N^2 is reported alongside.
//
// Drive-free tails are summed in closed form from the eigen-decomposition of
// the constant Liouvillian; the driven window uses exact step propagators.

#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/MatrixFunctions>
#include <boost/numeric/odeint.hpp>

#include "fbqt/error.hpp"
#include "fbqt/params.hpp"

namespace fbqt {

struct TlsDensityMatrix {
    double ee = 0.0;
    std::complex<double> eg{};  ///< <e|rho|g> = <sigma->

    double gg() const { return 1.0 - ee; }
    double population() const { return ee; }
};

struct OracleOptions {
    int steps_per_sigma = 40;  ///< propagator grid inside the Gaussian window
    /// Additional instantaneous rotations (same area) at these times; instantaneous shape only.
    std::vector<double> extra_kicks;
    bool check_convergence = true;
    double convergence_tolerance = 0.01;
};

struct QrtCorrelations {
    double mean_photons = 0.0;  ///< N
    double X2 = 0.0;
    double J1 = 0.0;
    double J2 = 0.0;
    double K = 0.0;
    double g2 = 0.0;
    double g2_hom = 0.0;
    double indistinguishability = 0.0;  ///< 1 - g2_hom
    double wavepacket_overlap = 0.0;    ///< J1 / N^2
};

namespace oracle_detail {

using Mat2 = Eigen::Matrix2cd;
using Mat4 = Eigen::Matrix4cd;
using Vec4 = Eigen::Vector4cd;
using Row4 = Eigen::RowVector4cd;
using cd = std::complex<double>;

inline Mat2 sminus() {
    Mat2 m = Mat2::Zero();
    m(0, 1) = 1.0;  // |g><e|, basis (g, e)
    return m;
}
inline Mat2 splus() { return sminus().adjoint(); }

// Row-major vectorisation: vec(A rho B) = (A kron B^T) vec(rho).
inline Mat4 kron(const Mat2& a, const Mat2& b) {
    Mat4 k;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            k.block<2, 2>(2 * i, 2 * j) = a(i, j) * b;
    return k;
}

inline Mat4 left(const Mat2& a) { return kron(a, Mat2::Identity()); }
inline Mat4 sandwich(const Mat2& a, const Mat2& b) { return kron(a, b.transpose()); }

inline Mat4 liouvillian(const SystemParams& p, double omega) {
    const Mat2 sm = sminus(), sp = splus(), n = sp * sm, I = Mat2::Identity();
    const Mat2 H = p.delta * n + 0.5 * omega * (sp + sm);
    Mat4 L = cd{0.0, -1.0} * (kron(H, I) - kron(I, H.transpose()));
    auto dissipator = [&](const Mat2& c, double rate) {
        if (rate <= 0.0)
            return;
        const Mat2 cc = c.adjoint() * c;
        L += rate * (kron(c, c.conjugate()) - 0.5 * kron(cc, I) - 0.5 * kron(I, cc.transpose()));
    };
    dissipator(sm, p.gamma + p.gamma0);
    dissipator(n, p.gamma_prime);
    return L;
}

// Tr[O rho] = o . vec(rho)
inline Row4 trace_row(const Mat2& O) {
    Row4 r;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            r(2 * i + j) = O(j, i);
    return r;
}

inline Vec4 ground() {
    Vec4 v = Vec4::Zero();
    v(0) = 1.0;
    return v;
}

inline Mat4 kick_super(double area) {
    const double c = std::cos(0.5 * area), s = std::sin(0.5 * area);
    Mat2 U;
    U << c, cd{0.0, -s}, cd{0.0, -s}, c;
    return sandwich(U, U.adjoint());
}

// Closed-form integrals over [0, inf) of the constant, drive-free evolution.
struct Tail {
    Eigen::Vector4cd lambda;
    Mat4 V, W;  // L = V diag(lambda) W
    std::array<bool, 4> live{};

    explicit Tail(const Mat4& L) {
        Eigen::ComplexEigenSolver<Mat4> es(L);
        lambda = es.eigenvalues();
        V = es.eigenvectors();
        W = V.inverse();
        for (int k = 0; k < 4; ++k)
            live[static_cast<std::size_t>(k)] = std::abs(lambda(k)) > 1e-10;
    }

    // int_0^inf Tr[O e^{Ls} X] ds
    cd linear(const Row4& o, const Vec4& x) const {
        cd s{};
        for (int k = 0; k < 4; ++k)
            if (live[static_cast<std::size_t>(k)])
                s += (o * V.col(k))(0) * (W.row(k) * x)(0) / (-lambda(k));
        return s;
    }

    // int_0^inf |Tr[O e^{Ls} X]|^2 ds
    double squared(const Row4& o, const Vec4& x) const {
        std::array<cd, 4> d{};
        for (int k = 0; k < 4; ++k)
            d[static_cast<std::size_t>(k)] = live[static_cast<std::size_t>(k)] ? (o * V.col(k))(0) * (W.row(k) * x)(0) : cd{};
        cd s{};
        for (int k = 0; k < 4; ++k)
            for (int l = 0; l < 4; ++l)
                if (live[static_cast<std::size_t>(k)] && live[static_cast<std::size_t>(l)])
                    s += d[static_cast<std::size_t>(k)] * std::conj(d[static_cast<std::size_t>(l)]) /
                         (-(lambda(k) + std::conj(lambda(l))));
        return s.real();
    }

    // int_0^inf dt int_0^inf ds Tr[O e^{Ls} S e^{Lt} rho]
    cd double_linear(const Row4& o, const Mat4& S, const Vec4& rho) const {
        const Mat4 M = W * S * V;
        cd s{};
        for (int k = 0; k < 4; ++k)
            for (int l = 0; l < 4; ++l)
                if (live[static_cast<std::size_t>(k)] && live[static_cast<std::size_t>(l)])
                    s += (o * V.col(k))(0) * M(k, l) * (W.row(l) * rho)(0) / (lambda(k) * lambda(l));
        return s;
    }

    // int_0^inf dt int_0^inf ds |Tr[O e^{Ls} S e^{Lt} rho]|^2
    double double_squared(const Row4& o, const Mat4& S, const Vec4& rho) const {
        const Mat4 M = W * S * V;
        std::array<std::array<cd, 4>, 4> c{};
        for (int k = 0; k < 4; ++k)
            for (int l = 0; l < 4; ++l)
                c[static_cast<std::size_t>(k)][static_cast<std::size_t>(l)] =
                    (live[static_cast<std::size_t>(k)] && live[static_cast<std::size_t>(l)])
                        ? (o * V.col(k))(0) * M(k, l) * (W.row(l) * rho)(0)
                        : cd{};
        cd s{};
        for (int k = 0; k < 4; ++k)
            for (int l = 0; l < 4; ++l)
                for (int kp = 0; kp < 4; ++kp)
                    for (int lp = 0; lp < 4; ++lp) {
                        const cd a = c[static_cast<std::size_t>(k)][static_cast<std::size_t>(l)];
                        const cd b = c[static_cast<std::size_t>(kp)][static_cast<std::size_t>(lp)];
                        if (a == cd{} || b == cd{})
                            continue;
                        s += a * std::conj(b) /
                             ((lambda(k) + std::conj(lambda(kp))) * (lambda(l) + std::conj(lambda(lp))));
                    }
        return s.real();
    }
};

// Driven window [t_0, t_n]: rho_0 is the state at t_0 (after any kick there),
// steps[k] maps node k to node k+1, `final_kick` acts at t_n before the tail.
struct Window {
    std::vector<double> t;
    std::vector<Mat4> steps;
    Vec4 rho0;
    Mat4 final_kick = Mat4::Identity();
};

inline Window build_window(const SystemParams& p, const OracleOptions& opt, int refine) {
    Window w;
    const PulseParams& pulse = p.pulse;
    const double area = pulse.area;
    if (pulse.shape == PulseShape::gaussian) {
        const double s = pulse.sigma(), c = pulse.center();
        const double a = std::max(0.0, c - pulse.support()), b = c + pulse.support();
        const int n = static_cast<int>(std::ceil((b - a) / s)) * opt.steps_per_sigma * refine;
        const double h = (b - a) / n;
        w.rho0 = ground();
        for (int k = 0; k <= n; ++k)
            w.t.push_back(a + k * h);
        for (int k = 0; k < n; ++k) {
            const Mat4 L = liouvillian(p, pulse_amplitude(a + (k + 0.5) * h, pulse));
            w.steps.push_back((L * h).exp());
        }
        return w;
    }
    const double dt = p.dt();
    const double t_kick = std::floor(pulse.center() / dt + 1e-9) * dt;
    const Mat4 K = kick_super(area);
    w.rho0 = K * ground();
    w.t.push_back(t_kick);
    if (opt.extra_kicks.empty())
        return w;
    if (opt.extra_kicks.size() > 1)
        throw ValidationError("oracle: at most one extra kick is supported");
    const double t2 = opt.extra_kicks.front();
    if (!(t2 > t_kick))
        throw ValidationError("oracle: extra kick must follow the main pulse");
    const int n = 400 * refine;
    const double h = (t2 - t_kick) / n;
    const Mat4 U = (liouvillian(p, 0.0) * h).exp();
    for (int k = 1; k <= n; ++k) {
        w.t.push_back(t_kick + k * h);
        w.steps.push_back(U);
    }
    w.final_kick = K;
    return w;
}

// Trapezoid weights for the grid.
inline std::vector<double> trapezoid(const std::vector<double>& t) {
    std::vector<double> w(t.size(), 0.0);
    for (std::size_t k = 0; k + 1 < t.size(); ++k) {
        const double h = t[k + 1] - t[k];
        w[k] += 0.5 * h;
        w[k + 1] += 0.5 * h;
    }
    return w;
}

inline QrtCorrelations correlations(const SystemParams& p, const OracleOptions& opt, int refine) {
    const Window win = build_window(p, opt, refine);
    const Tail tail(liouvillian(p, 0.0));
    const Mat2 sm = sminus(), sp = splus();
    const Row4 o_n = trace_row(sp * sm), o_sp = trace_row(sp), o_sm = trace_row(sm);
    const Mat4 S_jump = sandwich(sm, sp);  // rho -> s- rho s+
    const Mat4 S_left = left(sm);          // rho -> s- rho
    const std::size_t n = win.t.size();
    const std::vector<double> wt = trapezoid(win.t);

    std::vector<Vec4> rho(n);
    rho[0] = win.rho0;
    for (std::size_t k = 1; k < n; ++k)
        rho[k] = win.steps[k - 1] * rho[k - 1];
    const Vec4 rho_e = win.final_kick * rho[n - 1];

    double N = 0.0, K = 0.0, X2 = 0.0, J1 = 0.0, J2 = 0.0;
    // t inside the window
    for (std::size_t i = 0; i < n; ++i) {
        if (wt[i] == 0.0)
            continue;
        N += wt[i] * (o_n * rho[i])(0).real();
        K += wt[i] * std::norm((o_sm * rho[i])(0));
        Vec4 xj = S_jump * rho[i], xl = S_left * rho[i];
        double f2 = 0.0, f1 = 0.0, fa = 0.0;
        // tau within the window, trapezoid on the grid from t_i on
        double prev2 = (o_n * xj)(0).real(), prev1 = std::norm((o_sp * xl)(0)), preva = std::norm((o_sm * xl)(0));
        for (std::size_t k = i + 1; k < n; ++k) {
            xj = win.steps[k - 1] * xj;
            xl = win.steps[k - 1] * xl;
            const double c2 = (o_n * xj)(0).real(), c1 = std::norm((o_sp * xl)(0)), ca = std::norm((o_sm * xl)(0));
            const double h = win.t[k] - win.t[k - 1];
            f2 += 0.5 * h * (prev2 + c2);
            f1 += 0.5 * h * (prev1 + c1);
            fa += 0.5 * h * (preva + ca);
            prev2 = c2;
            prev1 = c1;
            preva = ca;
        }
        xj = win.final_kick * xj;
        xl = win.final_kick * xl;
        f2 += tail.linear(o_n, xj).real();
        f1 += tail.squared(o_sp, xl);
        fa += tail.squared(o_sm, xl);
        X2 += wt[i] * f2;
        J1 += wt[i] * f1;
        J2 += wt[i] * fa;
    }
    // t in the drive-free tail
    N += tail.linear(o_n, rho_e).real();
    K += tail.squared(o_sm, rho_e);
    X2 += tail.double_linear(o_n, S_jump, rho_e).real();
    J1 += tail.double_squared(o_sp, S_left, rho_e);
    J2 += tail.double_squared(o_sm, S_left, rho_e);

    const double g = p.gamma;
    QrtCorrelations r;
    r.mean_photons = g * N;
    r.K = g * K;
    r.X2 = 2.0 * g * g * X2;
    r.J1 = 2.0 * g * g * J1;
    r.J2 = 2.0 * g * g * J2;
    const double N2 = r.mean_photons * r.mean_photons;
    if (!(N2 > 0.0))
        throw RuntimeError("oracle: no photons emitted, correlations undefined");
    r.g2 = r.X2 / N2;
    r.g2_hom = 0.5 * (r.X2 + N2 - r.J1 - r.J2) / (N2 - r.K * r.K);
    r.indistinguishability = 1.0 - r.g2_hom;
    r.wavepacket_overlap = r.J1 / N2;
    return r;
}

} // namespace oracle_detail

/// Two-time integrals and the derived pulsed figures, feedback ignored.
inline QrtCorrelations qrt_correlations(const SystemParams& params, const OracleOptions& opt = {}) {
    validate(params);
    if (!opt.extra_kicks.empty() && params.pulse.shape != PulseShape::instantaneous)
        throw ValidationError("oracle: extra kicks need the instantaneous pulse shape");
    const QrtCorrelations r = oracle_detail::correlations(params, opt, 1);
    if (opt.check_convergence) {
        const QrtCorrelations f = oracle_detail::correlations(params, opt, 2);
        auto moved = [&](double a, double b) {
            const double scale = std::max(std::abs(b), 1e-6);
            return std::abs(a - b) / scale > opt.convergence_tolerance;
        };
        if (moved(r.g2, f.g2) || moved(r.g2_hom, f.g2_hom) || moved(r.mean_photons, f.mean_photons))
            throw RuntimeError("oracle: QRT grid not converged (result changes >1% on refinement)");
        return f;
    }
    return r;
}

inline double qrt_g2_zero(const SystemParams& params) { return qrt_correlations(params).g2; }

/// 1 - g2_HOM(0) for two identical copies; see the header comment for the normalisation.
inline double qrt_indistinguishability(const SystemParams& params) {
    return qrt_correlations(params).indistinguishability;
}

/// Emission rate of the emitter in the tau -> 0 limit of the loop.
inline double smalldelay_feedback_rate(double gamma, double phi) { return gamma * (1.0 + std::cos(phi)); }

/// Density matrix at each time of `t_grid` (sorted, >= 0), starting from the ground state at t = 0.
/// An instantaneous pulse acts at the start of the step containing t0, as in the trajectories.
inline std::vector<TlsDensityMatrix> lindblad_solve(const SystemParams& params, const std::vector<double>& t_grid,
                                                    double tolerance = 1e-10) {
    namespace ode = boost::numeric::odeint;
    using State = std::array<double, 3>;  // rho_ee, Re rho_eg, Im rho_eg
    validate(params);
    for (std::size_t k = 0; k < t_grid.size(); ++k)
        if (t_grid[k] < 0.0 || (k > 0 && t_grid[k] < t_grid[k - 1]))
            throw ValidationError("lindblad_solve: t_grid must be sorted and non-negative");

    const SystemParams& p = params;
    const double Gam = p.gamma + p.gamma0;
    const double G2 = 0.5 * (Gam + p.gamma_prime);
    auto rhs = [&](const State& x, State& dx, double t) {
        const double om = pulse_amplitude(t, p.pulse);
        // rho_eg = u + i v with <e|rho|g>;  H = delta n + om/2 sigma_x
        const double ee = x[0], u = x[1], v = x[2];
        dx[0] = -Gam * ee - om * v;
        dx[1] = -G2 * u + p.delta * v;
        dx[2] = -G2 * v - p.delta * u + 0.5 * om * (2.0 * ee - 1.0);
    };

    std::vector<double> breaks;
    const bool gauss = p.pulse.shape == PulseShape::gaussian && p.pulse.area != 0.0;
    std::optional<double> kick;
    if (gauss) {
        const double s = p.pulse.sigma(), c = p.pulse.center();
        for (double t = std::max(0.0, c - p.pulse.support()); t < c + p.pulse.support(); t += 0.5 * s)
            breaks.push_back(t);
        breaks.push_back(c + p.pulse.support());
    } else if (p.pulse.shape == PulseShape::instantaneous && p.pulse.area != 0.0) {
        kick = std::floor(p.pulse.center() / p.dt() + 1e-9) * p.dt();
    }

    auto stepper = ode::make_controlled(tolerance, tolerance, ode::runge_kutta_dopri5<State>());
    State x{0.0, 0.0, 0.0};
    double t = 0.0;
    auto advance = [&](double to) {
        if (kick && t <= *kick && *kick <= to) {
            if (*kick > t)
                ode::integrate_adaptive(stepper, rhs, x, t, *kick, std::min(1e-3, *kick - t));
            t = *kick;
            const double c = std::cos(0.5 * p.pulse.area), s = std::sin(0.5 * p.pulse.area);
            oracle_detail::Mat2 U, rho;
            U << c, std::complex<double>{0.0, -s}, std::complex<double>{0.0, -s}, c;
            const std::complex<double> eg{x[1], x[2]};
            rho << 1.0 - x[0], std::conj(eg), eg, x[0];
            rho = U * rho * U.adjoint();
            x = {rho(1, 1).real(), rho(1, 0).real(), rho(1, 0).imag()};
            kick.reset();
        }
        if (to > t) {
            double from = t;
            for (double b : breaks) {
                if (b <= from || b >= to)
                    continue;
                ode::integrate_adaptive(stepper, rhs, x, from, b, std::min(1e-4, b - from));
                from = b;
            }
            ode::integrate_adaptive(stepper, rhs, x, from, to, std::min(1e-4, to - from));
            t = to;
        }
    };

    std::vector<TlsDensityMatrix> out;
    out.reserve(t_grid.size());
    for (double tg : t_grid) {
        advance(tg);
        out.push_back({x[0], {x[1], x[2]}});
    }
    return out;
}

} // namespace fbqt
