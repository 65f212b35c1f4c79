#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kuq/array.hpp"
#include "kuq/dataset.hpp"
#include "kuq/errors.hpp"
#include "kuq/rng.hpp"

namespace kuq {

/// Synthetic dynamical system, the desk-scale stand-in data source.
/// Initial states are drawn i.i.d. uniform in [-init_scale, init_scale] per
/// component; observation noise is additive i.i.d. Gaussian.
struct SystemSpec {
    enum class Kind { linear, damped_oscillator, van_der_pol };

    Kind kind = Kind::damped_oscillator;
    std::vector<double> a_matrix;  // linear: n x n row-major
    double omega = 2.0;            // damped oscillator: natural frequency
    double zeta = 0.1;             // damped oscillator: damping ratio
    double mu = 1.0;               // van der Pol: nonlinearity strength
    double noise_std = 0.0;
    double init_scale = 1.0;
    std::uint64_t seed = 0;

    int state_dim() const {
        if (kind != Kind::linear) return 2;
        const auto n = static_cast<int>(std::lround(std::sqrt(static_cast<double>(a_matrix.size()))));
        return n;
    }

    void validate() const {
        if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
        if (!(init_scale > 0.0)) throw ConfigError("init_scale must be > 0");
        switch (kind) {
            case Kind::linear: {
                const int n = state_dim();
                if (n < 1 || static_cast<std::size_t>(n) * static_cast<std::size_t>(n) !=
                                 a_matrix.size()) {
                    throw ConfigError("a_matrix must be a non-empty square matrix (n*n values)");
                }
                for (double v : a_matrix)
                    if (!std::isfinite(v)) throw ConfigError("a_matrix must be finite");
                break;
            }
            case Kind::damped_oscillator:
                if (!(omega > 0.0)) throw ConfigError("omega must be > 0");
                if (!(zeta >= 0.0)) throw ConfigError("zeta (damping) must be >= 0");
                break;
            case Kind::van_der_pol:
                if (!(mu >= 0.0)) throw ConfigError("mu must be >= 0");
                break;
        }
    }
};

inline SystemSpec::Kind system_kind_from_string(const std::string& s) {
    if (s == "linear") return SystemSpec::Kind::linear;
    if (s == "damped_oscillator") return SystemSpec::Kind::damped_oscillator;
    if (s == "van_der_pol") return SystemSpec::Kind::van_der_pol;
    throw ConfigError("unknown system '" + s +
                      "' (expected linear, damped_oscillator or van_der_pol)");
}

/// Matrix exponential by scaling-and-squaring with a Taylor series; meant for
/// the small generators used here (n <= a few dozen).
inline RealArray expm(const RealArray& a) {
    if (a.rank() != 2 || a.shape[0] != a.shape[1]) {
        throw ShapeError("expm: matrix must be square, got " + shape_str(a.shape));
    }
    const std::size_t n = a.shape[0];
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) row += std::fabs(a.data[i * n + j]);
        norm = std::max(norm, row);
    }
    int squarings = 0;
    double scale = 1.0;
    while (norm * scale > 0.5) {
        scale *= 0.5;
        ++squarings;
    }

    RealArray b = RealArray::zeros({n, n});
    for (std::size_t i = 0; i < b.numel(); ++i) b.data[i] = a.data[i] * scale;

    const auto matmul_sq = [n](const RealArray& x, const RealArray& y) {
        RealArray out = RealArray::zeros({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t l = 0; l < n; ++l) {
                const double v = x.data[i * n + l];
                if (v == 0.0) continue;
                for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += v * y.data[l * n + j];
            }
        return out;
    };

    RealArray result = RealArray::identity(n);
    RealArray term = RealArray::identity(n);
    for (int k = 1; k <= 30; ++k) {
        term = matmul_sq(term, b);
        for (double& v : term.data) v /= static_cast<double>(k);
        double tnorm = 0.0;
        for (double v : term.data) tnorm = std::max(tnorm, std::fabs(v));
        for (std::size_t i = 0; i < result.numel(); ++i) result.data[i] += term.data[i];
        if (tnorm < 1e-18) break;
    }
    for (int s = 0; s < squarings; ++s) result = matmul_sq(result, result);
    return result;
}

namespace detail {

/// One RK4 step of the van der Pol oscillator x'' = mu (1 - x^2) x' - x.
inline void vdp_rk4_step(double mu, double h, double& x, double& v) {
    const auto fx = [](double, double vv) { return vv; };
    const auto fv = [mu](double xx, double vv) { return mu * (1.0 - xx * xx) * vv - xx; };
    const double k1x = fx(x, v), k1v = fv(x, v);
    const double k2x = fx(x + 0.5 * h * k1x, v + 0.5 * h * k1v);
    const double k2v = fv(x + 0.5 * h * k1x, v + 0.5 * h * k1v);
    const double k3x = fx(x + 0.5 * h * k2x, v + 0.5 * h * k2v);
    const double k3v = fv(x + 0.5 * h * k2x, v + 0.5 * h * k2v);
    const double k4x = fx(x + h * k3x, v + h * k3v);
    const double k4v = fv(x + h * k3x, v + h * k3v);
    x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
    v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
}

}  // namespace detail

/// Generates N series of T+1 steps sampled at dt. Linear systems (including
/// the damped oscillator) advance by the exact matrix exponential of one
/// step; van der Pol integrates RK4 at dt/10 substeps. Observation noise is
/// drawn from a stream separate from the initial states, so the noiseless
/// trajectory is unaffected by the noise draw.
inline TimeSeriesDataset generate(const SystemSpec& spec, std::size_t n_series,
                                  std::size_t horizon, double dt) {
    spec.validate();
    if (n_series < 1 || horizon < 1) throw ConfigError("generate: need N >= 1 and T >= 1");
    if (!(dt > 0.0)) throw ConfigError("generate: dt must be > 0");

    const int n = spec.state_dim();
    TimeSeriesDataset ds;
    ds.series_count = n_series;
    ds.step_count = horizon + 1;
    ds.channel_count = static_cast<std::size_t>(n);
    ds.dt = dt;
    ds.values.assign(n_series * ds.step_count * ds.channel_count, 0.0);
    if (spec.kind == SystemSpec::Kind::linear) {
        for (int c = 0; c < n; ++c) ds.channel_names.push_back("x" + std::to_string(c));
        ds.provenance = "linear";
    } else {
        ds.channel_names = {"x", "v"};
        ds.provenance =
            spec.kind == SystemSpec::Kind::damped_oscillator ? "damped_oscillator" : "van_der_pol";
    }

    Rng init_rng(Rng::derive(spec.seed, 0x696e6974ull));   // "init" stream
    Rng noise_rng(Rng::derive(spec.seed, 0x6e6f697365ull));  // "noise" stream

    // Draw all initial states first so the clean trajectories depend only on
    // the init stream.
    std::vector<double> init(n_series * static_cast<std::size_t>(n));
    for (double& v : init) v = init_rng.uniform(-spec.init_scale, spec.init_scale);

    RealArray step_matrix;
    if (spec.kind == SystemSpec::Kind::linear || spec.kind == SystemSpec::Kind::damped_oscillator) {
        RealArray gen = spec.kind == SystemSpec::Kind::linear
                            ? RealArray::mat(static_cast<std::size_t>(n),
                                             static_cast<std::size_t>(n), spec.a_matrix)
                            : RealArray::mat(2, 2,
                                             {0.0, 1.0, -spec.omega * spec.omega,
                                              -2.0 * spec.zeta * spec.omega});
        for (double& v : gen.data) v *= dt;
        step_matrix = expm(gen);
    }

    std::vector<double> state(static_cast<std::size_t>(n)), next(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < n_series; ++i) {
        for (int c = 0; c < n; ++c) state[static_cast<std::size_t>(c)] = init[i * n + c];
        for (std::size_t t = 0; t <= horizon; ++t) {
            for (int c = 0; c < n; ++c) ds.at(i, t, static_cast<std::size_t>(c)) = state[c];
            if (t == horizon) break;
            if (spec.kind == SystemSpec::Kind::van_der_pol) {
                double x = state[0], v = state[1];
                for (int sub = 0; sub < 10; ++sub) detail::vdp_rk4_step(spec.mu, dt / 10.0, x, v);
                state[0] = x;
                state[1] = v;
            } else {
                for (int r = 0; r < n; ++r) {
                    double s = 0.0;
                    for (int c = 0; c < n; ++c) s += step_matrix.data[r * n + c] * state[c];
                    next[static_cast<std::size_t>(r)] = s;
                }
                state = next;
            }
        }
    }

    if (spec.noise_std > 0.0) {
        for (double& v : ds.values) v += spec.noise_std * noise_rng.gaussian();
    }
    ds.validate();
    return ds;
}

}  // namespace kuq
