#pragma once

// Truncated Hilbert space of one or two emitters, each coupled to its own
// feedback loop of N time bins.  Photons are bosons living in the bins, with
// a cutoff on the TOTAL photon number across all bins.

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fbqt/error.hpp"

namespace fbqt {

using cplx = std::complex<double>;

/// One basis configuration.  Bit e of `tls` is set when emitter e is excited;
/// `bins` is the sorted multiset of occupied (global) bin indices.
struct FockConfig {
    std::uint32_t tls = 0;
    std::vector<int> bins;

    bool tls_excited(int emitter = 0) const { return ((tls >> emitter) & 1u) != 0; }
    int photons() const { return static_cast<int>(bins.size()); }
    int occupation(int bin) const {
        auto [lo, hi] = std::equal_range(bins.begin(), bins.end(), bin);
        return static_cast<int>(hi - lo);
    }

    void add_photon(int bin) { bins.insert(std::upper_bound(bins.begin(), bins.end(), bin), bin); }
    void remove_photon(int bin) { bins.erase(std::lower_bound(bins.begin(), bins.end(), bin)); }

    friend bool operator==(const FockConfig&, const FockConfig&) = default;
};

/// Canonically ordered basis.  Emitter e owns global bins [e*N, (e+1)*N);
/// bin e*N is its outgoing bin, e*N + N-1 its incoming bin.
/// Index layout: photon_config * 2^emitters + tls, so index 0 is the
/// all-ground vacuum.
class FockBasis {
public:
    FockBasis(int loop_bins, int n_max, int emitters = 1) : N_(loop_bins), n_max_(n_max), emitters_(emitters) {
        if (emitters < 1 || emitters > 2)
            throw ValidationError("FockBasis: emitters must be 1 or 2");
        if (loop_bins < 0)
            throw ValidationError("FockBasis: bin count must be non-negative");
        if (n_max < 0)
            throw ValidationError("FockBasis: photon cutoff must be non-negative");
        enumerate();
    }

    /// Emitter-only space (no waveguide bins), used for the Markovian no-feedback mode.
    static FockBasis emitter_only(int emitters) { return FockBasis(0, 0, emitters); }

    int loop_bins() const { return N_; }
    int total_bins() const { return N_ * emitters_; }
    int n_max() const { return n_max_; }
    int emitters() const { return emitters_; }
    std::size_t tls_states() const { return std::size_t{1} << emitters_; }
    std::size_t size() const { return photon_configs_.size() * tls_states(); }

    int outgoing_bin(int emitter = 0) const { return emitter * N_; }
    int incoming_bin(int emitter = 0) const { return emitter * N_ + N_ - 1; }

    FockConfig config(std::size_t index) const {
        return FockConfig{static_cast<std::uint32_t>(index % tls_states()), photon_configs_[index / tls_states()]};
    }

    std::uint32_t tls_of(std::size_t index) const { return static_cast<std::uint32_t>(index % tls_states()); }
    const std::vector<int>& bins_of(std::size_t index) const { return photon_configs_[index / tls_states()]; }
    int photons_of(std::size_t index) const { return static_cast<int>(bins_of(index).size()); }

    std::optional<std::size_t> find(const FockConfig& c) const {
        if (c.tls >= tls_states())
            return std::nullopt;
        auto it = lookup_.find(c.bins);
        if (it == lookup_.end())
            return std::nullopt;
        return it->second * tls_states() + c.tls;
    }

    std::size_t index_of(const FockConfig& c) const {
        auto i = find(c);
        if (!i)
            throw ValidationError("FockBasis: configuration outside the truncated space");
        return *i;
    }

    /// 2^E * sum_{k<=n_max} C(E*N + k - 1, k)
    static std::size_t expected_size(int loop_bins, int n_max, int emitters = 1) {
        const std::size_t modes = static_cast<std::size_t>(loop_bins) * static_cast<std::size_t>(emitters);
        std::size_t total = 0;
        if (modes == 0)
            total = 1;
        else
            for (int k = 0; k <= n_max; ++k) {
                // C(modes + k - 1, k)
                double c = 1.0;
                for (int j = 1; j <= k; ++j)
                    c = c * static_cast<double>(modes + j - 1) / j;
                total += static_cast<std::size_t>(std::llround(c));
            }
        return total << emitters;
    }

private:
    void enumerate() {
        const int modes = total_bins();
        const int cap = modes == 0 ? 0 : n_max_;
        std::vector<int> current;
        for (int k = 0; k <= cap; ++k) {
            current.assign(static_cast<std::size_t>(k), 0);
            // non-decreasing sequences of length k over [0, modes)
            while (true) {
                lookup_.emplace(current, photon_configs_.size());
                photon_configs_.push_back(current);
                int pos = k - 1;
                while (pos >= 0 && current[static_cast<std::size_t>(pos)] == modes - 1)
                    --pos;
                if (pos < 0)
                    break;
                const int v = ++current[static_cast<std::size_t>(pos)];
                for (int q = pos + 1; q < k; ++q)
                    current[static_cast<std::size_t>(q)] = v;
            }
        }
    }

    int N_;
    int n_max_;
    int emitters_;
    std::vector<std::vector<int>> photon_configs_;
    std::map<std::vector<int>, std::size_t> lookup_;
};

/// Validated construction of the single-emitter loop basis.
inline std::shared_ptr<const FockBasis> enumerate_basis(int N, int n_max) {
    if (N < 1)
        throw ValidationError("enumerate_basis: N must be >= 1");
    if (n_max < 1)
        throw ValidationError("enumerate_basis: n_max must be >= 1");
    return std::make_shared<const FockBasis>(N, n_max, 1);
}

/// Complex amplitude vector over a shared basis.
class Ket {
public:
    explicit Ket(std::shared_ptr<const FockBasis> basis)
        : basis_(std::move(basis)), amps_(basis_->size(), cplx{0.0, 0.0}) {}

    static Ket basis_state(std::shared_ptr<const FockBasis> basis, const FockConfig& c) {
        Ket k(basis);
        k.amps_[basis->index_of(c)] = 1.0;
        return k;
    }

    static Ket ground(std::shared_ptr<const FockBasis> basis) {
        Ket k(std::move(basis));
        k.amps_[0] = 1.0;
        return k;
    }

    const FockBasis& basis() const { return *basis_; }
    const std::shared_ptr<const FockBasis>& basis_ptr() const { return basis_; }
    std::size_t size() const { return amps_.size(); }

    std::span<cplx> amplitudes() { return amps_; }
    std::span<const cplx> amplitudes() const { return amps_; }
    cplx& operator[](std::size_t i) { return amps_[i]; }
    const cplx& operator[](std::size_t i) const { return amps_[i]; }

    cplx amplitude(const FockConfig& c) const {
        auto i = basis_->find(c);
        return i ? amps_[*i] : cplx{};
    }

    double norm_squared() const {
        double s = 0.0;
        for (const auto& a : amps_)
            s += std::norm(a);
        return s;
    }

    /// Returns the norm before scaling; a zero vector is left untouched.
    double normalize() {
        const double n = std::sqrt(norm_squared());
        if (n > 0.0)
            for (auto& a : amps_)
                a /= n;
        return n;
    }

    /// <this|other>
    cplx inner(const Ket& other) const {
        cplx s{};
        for (std::size_t i = 0; i < amps_.size(); ++i)
            s += std::conj(amps_[i]) * other.amps_[i];
        return s;
    }

    Ket& operator+=(const Ket& o) {
        for (std::size_t i = 0; i < amps_.size(); ++i)
            amps_[i] += o.amps_[i];
        return *this;
    }
    Ket& operator-=(const Ket& o) {
        for (std::size_t i = 0; i < amps_.size(); ++i)
            amps_[i] -= o.amps_[i];
        return *this;
    }
    Ket& operator*=(cplx s) {
        for (auto& a : amps_)
            a *= s;
        return *this;
    }

private:
    std::shared_ptr<const FockBasis> basis_;
    std::vector<cplx> amps_;
};

/// Weight pushed past the photon cutoff by creation operators.
struct TruncationTally {
    double weight = 0.0;
    std::size_t events = 0;
};

namespace detail {
inline void check_bin(const FockBasis& b, int bin, const char* op) {
    if (bin < 0 || bin >= b.total_bins()) {
        std::ostringstream os;
        os << op << ": bin index " << bin << " outside [0, " << b.total_bins() - 1 << "]";
        throw ValidationError(os.str());
    }
}
} // namespace detail

inline Ket apply_bin_annihilate(const Ket& ket, int bin) {
    const FockBasis& b = ket.basis();
    detail::check_bin(b, bin, "apply_bin_annihilate");
    Ket out(ket.basis_ptr());
    for (std::size_t i = 0; i < ket.size(); ++i) {
        if (ket[i] == cplx{})
            continue;
        FockConfig c = b.config(i);
        const int occ = c.occupation(bin);
        if (occ == 0)
            continue;
        c.remove_photon(bin);
        out[b.index_of(c)] += std::sqrt(static_cast<double>(occ)) * ket[i];
    }
    return out;
}

inline Ket apply_bin_create(const Ket& ket, int bin, TruncationTally* tally = nullptr) {
    const FockBasis& b = ket.basis();
    detail::check_bin(b, bin, "apply_bin_create");
    Ket out(ket.basis_ptr());
    for (std::size_t i = 0; i < ket.size(); ++i) {
        if (ket[i] == cplx{})
            continue;
        FockConfig c = b.config(i);
        const int occ = c.occupation(bin);
        const cplx amp = std::sqrt(static_cast<double>(occ + 1)) * ket[i];
        if (c.photons() >= b.n_max()) {
            if (tally) {
                tally->weight += std::norm(amp);
                ++tally->events;
            }
            continue;
        }
        c.add_photon(bin);
        out[b.index_of(c)] += amp;
    }
    return out;
}

enum class SigmaOp { raise, lower, population };

inline Ket apply_sigma(const Ket& ket, SigmaOp which, int emitter = 0) {
    const FockBasis& b = ket.basis();
    if (emitter < 0 || emitter >= b.emitters())
        throw ValidationError("apply_sigma: emitter index out of range");
    const std::uint32_t bit = 1u << emitter;
    Ket out(ket.basis_ptr());
    for (std::size_t i = 0; i < ket.size(); ++i) {
        const bool excited = (b.tls_of(i) & bit) != 0;
        switch (which) {
        case SigmaOp::raise:
            if (!excited)
                out[i + bit] += ket[i];
            break;
        case SigmaOp::lower:
            if (excited)
                out[i - bit] += ket[i];
            break;
        case SigmaOp::population:
            if (excited)
                out[i] += ket[i];
            break;
        }
    }
    return out;
}

/// Moves every photon one bin towards the outgoing bin of its loop, with
/// `phase` applied once per photon.  The outgoing bins must be empty.
inline Ket shift_bins(const Ket& ket, cplx phase) {
    const FockBasis& b = ket.basis();
    const int N = b.loop_bins();
    if (N == 0)
        return ket;
    double residual = 0.0;
    Ket out(ket.basis_ptr());
    for (std::size_t i = 0; i < ket.size(); ++i) {
        if (ket[i] == cplx{})
            continue;
        FockConfig c = b.config(i);
        bool blocked = false;
        for (int& bin : c.bins) {
            if (bin % N == 0) {
                blocked = true;
                break;
            }
            --bin;
        }
        if (blocked) {
            residual += std::norm(ket[i]);
            continue;
        }
        cplx f = ket[i];
        for (int k = 0; k < c.photons(); ++k)
            f *= phase;
        out[b.index_of(c)] = f;
    }
    if (residual > 1e-24) {
        std::ostringstream os;
        os << "shift_bins: outgoing bin still occupied (residual weight " << residual << ")";
        throw ContractError(os.str());
    }
    return out;
}

struct Observable {
    enum class Kind { bin_number, tls_population } kind;
    int index = 0;

    static Observable bin_number(int n) { return {Kind::bin_number, n}; }
    static Observable tls_population(int emitter = 0) { return {Kind::tls_population, emitter}; }
};

inline double expectation(const Ket& ket, Observable obs) {
    const FockBasis& b = ket.basis();
    double s = 0.0;
    if (obs.kind == Observable::Kind::bin_number) {
        detail::check_bin(b, obs.index, "expectation");
        for (std::size_t i = 0; i < ket.size(); ++i) {
            const auto& bins = b.bins_of(i);
            const auto [lo, hi] = std::equal_range(bins.begin(), bins.end(), obs.index);
            s += static_cast<double>(hi - lo) * std::norm(ket[i]);
        }
    } else {
        if (obs.index < 0 || obs.index >= b.emitters())
            throw ValidationError("expectation: emitter index out of range");
        const std::uint32_t bit = 1u << obs.index;
        for (std::size_t i = 0; i < ket.size(); ++i)
            if (b.tls_of(i) & bit)
                s += std::norm(ket[i]);
    }
    return s;
}

} // namespace fbqt
