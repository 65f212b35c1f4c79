#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kuq/array.hpp"
#include "kuq/errors.hpp"
#include "kuq/normalize.hpp"
#include "kuq/reduce.hpp"
#include "kuq/rng.hpp"
#include "kuq/threadpool.hpp"

namespace kuq {

enum class Activation { tanh, linear };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "linear"; }

inline Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "linear") return Activation::linear;
    throw ConfigError("unknown activation '" + s + "' (expected tanh or linear)");
}

/// Architecture knobs shared by every ensemble member.
struct ModelConfig {
    int latent_dim = 32;
    std::vector<int> hidden = {64, 64};
    Activation activation = Activation::tanh;

    void validate() const {
        if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
        for (int h : hidden)
            if (h < 1) throw ConfigError("hidden widths must be >= 1");
    }
};

/// Fully connected layers with the activation applied between layers
/// (linear output layer).
struct Mlp {
    int in_dim = 0;
    int out_dim = 0;
    Activation activation = Activation::tanh;
    std::vector<RealArray> weights;  // layer l: (width_{l+1} x width_l)
    std::vector<RealArray> biases;   // layer l: (width_{l+1})

    std::size_t layer_count() const { return weights.size(); }

    std::vector<double> eval(std::span<const double> x) const {
        if (static_cast<int>(x.size()) != in_dim) {
            throw ShapeError("mlp: input width " + std::to_string(x.size()) + " != " +
                             std::to_string(in_dim));
        }
        std::vector<double> cur(x.begin(), x.end());
        std::vector<double> next;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            const RealArray& w = weights[l];
            const RealArray& b = biases[l];
            const std::size_t r = w.shape[0], k = w.shape[1];
            next.assign(r, 0.0);
            for (std::size_t i = 0; i < r; ++i) {
                const double* row = w.data.data() + i * k;
                double s = b.data[i];
                for (std::size_t j = 0; j < k; ++j) s += row[j] * cur[j];
                next[i] = s;
            }
            if (activation == Activation::tanh && l + 1 < weights.size()) {
                for (double& v : next) v = std::tanh(v);
            }
            cur.swap(next);
        }
        return cur;
    }
};

/// Encoder/decoder pair with a dense latent transition matrix.
struct KoopmanAutoencoder {
    int state_dim = 0;   // n
    int latent_dim = 0;  // d
    Mlp encoder;         // R^n -> R^d
    Mlp decoder;         // R^d -> R^n
    RealArray transition;  // K: d x d

    void validate() const {
        if (state_dim < 1 || latent_dim < 1) throw ContractError("model: dims must be >= 1");
        if (encoder.in_dim != state_dim || encoder.out_dim != latent_dim ||
            decoder.in_dim != latent_dim || decoder.out_dim != state_dim) {
            throw ShapeError("model: encoder/decoder widths do not match (n, d)");
        }
        if (transition.rank() != 2 || transition.shape[0] != static_cast<std::size_t>(latent_dim) ||
            transition.shape[1] != static_cast<std::size_t>(latent_dim)) {
            throw ShapeError("model: transition matrix must be d x d");
        }
    }

    std::vector<double> encode(std::span<const double> x) const {
        if (static_cast<int>(x.size()) != state_dim) {
            throw ShapeError("encode: input width " + std::to_string(x.size()) +
                             " != state_dim " + std::to_string(state_dim));
        }
        return encoder.eval(x);
    }

    std::vector<double> decode(std::span<const double> z) const {
        if (static_cast<int>(z.size()) != latent_dim) {
            throw ShapeError("decode: input width " + std::to_string(z.size()) +
                             " != latent_dim " + std::to_string(latent_dim));
        }
        return decoder.eval(z);
    }

    /// z_{t+1} = K z_t, repeated `horizon` times. O(H d^2); no matrix powers.
    std::vector<std::vector<double>> rollout_latent(std::span<const double> z0, int horizon) const {
        if (horizon < 1) throw ContractError("rollout_latent: horizon must be >= 1");
        if (static_cast<int>(z0.size()) != latent_dim) {
            throw ShapeError("rollout_latent: z0 width mismatch");
        }
        const std::size_t d = static_cast<std::size_t>(latent_dim);
        std::vector<std::vector<double>> out;
        out.reserve(static_cast<std::size_t>(horizon));
        std::vector<double> cur(z0.begin(), z0.end());
        std::vector<double> next(d, 0.0);
        for (int t = 0; t < horizon; ++t) {
            for (std::size_t i = 0; i < d; ++i) {
                const double* row = transition.data.data() + i * d;
                double s = 0.0;
                for (std::size_t j = 0; j < d; ++j) s += row[j] * cur[j];
                next[i] = s;
            }
            cur = next;
            out.push_back(cur);
        }
        return out;
    }

    /// x_hat_tau = decode(K^tau encode(x0)) for tau = 1..H, as an (H x n) array.
    /// Operates in normalized space; the caller owns de-normalization.
    RealArray forecast(std::span<const double> x0, int horizon) const {
        const auto z0 = encode(x0);
        const auto latents = rollout_latent(z0, horizon);
        RealArray traj = RealArray::zeros(
            {static_cast<std::size_t>(horizon), static_cast<std::size_t>(state_dim)});
        for (int t = 0; t < horizon; ++t) {
            const auto xt = decode(latents[static_cast<std::size_t>(t)]);
            for (int c = 0; c < state_dim; ++c) {
                traj.data[static_cast<std::size_t>(t) * state_dim + c] = xt[c];
            }
        }
        return traj;
    }
};

namespace detail {

inline Mlp make_mlp(int in_dim, int out_dim, const std::vector<int>& hidden, Activation act,
                    Rng& rng) {
    Mlp mlp;
    mlp.in_dim = in_dim;
    mlp.out_dim = out_dim;
    mlp.activation = act;
    std::vector<int> widths;
    widths.push_back(in_dim);
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(out_dim);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const auto rows = static_cast<std::size_t>(widths[l + 1]);
        const auto cols = static_cast<std::size_t>(widths[l]);
        const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
        RealArray w = RealArray::zeros({rows, cols});
        for (double& v : w.data) v = rng.uniform(-bound, bound);
        RealArray b = RealArray::zeros({rows});
        for (double& v : b.data) v = rng.uniform(-bound, bound);
        mlp.weights.push_back(std::move(w));
        mlp.biases.push_back(std::move(b));
    }
    return mlp;
}

}  // namespace detail

/// Seeded member initialization. The transition matrix starts near identity
/// so early rollouts stay bounded over long horizons.
inline KoopmanAutoencoder make_autoencoder(int state_dim, const ModelConfig& cfg,
                                           std::uint64_t seed) {
    cfg.validate();
    if (state_dim < 1) throw ConfigError("state_dim must be >= 1");
    Rng rng(Rng::derive(seed, 0x6d6f64656cull));  // "model" stream
    KoopmanAutoencoder m;
    m.state_dim = state_dim;
    m.latent_dim = cfg.latent_dim;
    m.encoder = detail::make_mlp(state_dim, cfg.latent_dim, cfg.hidden, cfg.activation, rng);
    m.decoder = detail::make_mlp(cfg.latent_dim, state_dim, cfg.hidden, cfg.activation, rng);
    m.transition = RealArray::identity(static_cast<std::size_t>(cfg.latent_dim));
    for (double& v : m.transition.data) v += 1e-3 * rng.gaussian();
    m.validate();
    return m;
}

/// Canonical parameter order for one member: encoder (W, b per layer),
/// decoder (W, b per layer), transition. Checkpoints, the optimizer and
/// gradient assembly all rely on this order.
template <typename Fn>
void visit_params(KoopmanAutoencoder& model, Fn&& fn) {
    for (std::size_t l = 0; l < model.encoder.weights.size(); ++l) {
        fn("enc.w" + std::to_string(l), model.encoder.weights[l]);
        fn("enc.b" + std::to_string(l), model.encoder.biases[l]);
    }
    for (std::size_t l = 0; l < model.decoder.weights.size(); ++l) {
        fn("dec.w" + std::to_string(l), model.decoder.weights[l]);
        fn("dec.b" + std::to_string(l), model.decoder.biases[l]);
    }
    fn("K", model.transition);
}

inline std::vector<double> flatten_params(const KoopmanAutoencoder& model) {
    std::vector<double> flat;
    visit_params(const_cast<KoopmanAutoencoder&>(model), [&](const std::string&, RealArray& a) {
        flat.insert(flat.end(), a.data.begin(), a.data.end());
    });
    return flat;
}

inline void unflatten_params(KoopmanAutoencoder& model, std::span<const double> flat) {
    std::size_t pos = 0;
    bool overflow = false;
    visit_params(model, [&](const std::string&, RealArray& a) {
        if (pos + a.numel() > flat.size()) {
            overflow = true;
            return;
        }
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                  flat.begin() + static_cast<std::ptrdiff_t>(pos + a.numel()), a.data.begin());
        pos += a.numel();
    });
    if (overflow || pos != flat.size()) {
        throw ShapeError("unflatten_params: blob holds " + std::to_string(flat.size()) +
                         " values, architecture expects " + std::to_string(pos));
    }
}

enum class Regime { independent, variance, crps_proxy };

inline std::string to_string(Regime r) {
    switch (r) {
        case Regime::independent: return "independent";
        case Regime::variance: return "variance";
        case Regime::crps_proxy: return "crps_proxy";
    }
    return "?";
}

inline Regime regime_from_string(const std::string& s) {
    if (s == "independent") return Regime::independent;
    if (s == "variance") return Regime::variance;
    if (s == "crps_proxy") return Regime::crps_proxy;
    throw ConfigError("unknown regime '" + s + "' (expected independent, variance or crps_proxy)");
}

/// M jointly usable members plus the normalization frozen at training time.
struct Ensemble {
    std::vector<KoopmanAutoencoder> members;
    Normalization normalization;
    Regime regime = Regime::independent;
    double lambda = 0.0;

    std::size_t size() const { return members.size(); }

    void validate() const {
        if (members.empty()) throw ContractError("ensemble: must have at least one member");
        const auto& first = members.front();
        for (const auto& m : members) {
            m.validate();
            if (m.state_dim != first.state_dim || m.latent_dim != first.latent_dim) {
                throw ShapeError("ensemble: members must be dimensionally identical");
            }
        }
        normalization.validate();
    }
};

/// Member trajectories with their mean and per-scalar spread.
/// Spread is the cross-member standard deviation with divisor M-1 (0 for a
/// single member); the training-time variance penalty uses divisor M instead.
struct ForecastDistribution {
    std::size_t member_count = 0;
    std::size_t horizon = 0;
    std::size_t channels = 0;
    std::vector<double> member_traj;  // M x H x n
    std::vector<double> mean;         // H x n
    std::vector<double> spread;       // H x n

    double member(std::size_t j, std::size_t t, std::size_t c) const {
        return member_traj[(j * horizon + t) * channels + c];
    }
    double mean_at(std::size_t t, std::size_t c) const { return mean[t * channels + c]; }
    double spread_at(std::size_t t, std::size_t c) const { return spread[t * channels + c]; }
};

/// Runs every member forecast (concurrently when a worker pool is available)
/// and reduces mean/spread in canonical member order.
inline ForecastDistribution ensemble_forecast(const Ensemble& ens, std::span<const double> x0,
                                              int horizon) {
    if (ens.members.empty()) throw ContractError("ensemble_forecast: empty ensemble");
    if (horizon < 1) throw ContractError("ensemble_forecast: horizon must be >= 1");
    const std::size_t m_count = ens.members.size();
    const auto h = static_cast<std::size_t>(horizon);
    const auto n = static_cast<std::size_t>(ens.members.front().state_dim);

    ForecastDistribution dist;
    dist.member_count = m_count;
    dist.horizon = h;
    dist.channels = n;
    dist.member_traj.assign(m_count * h * n, 0.0);
    dist.mean.assign(h * n, 0.0);
    dist.spread.assign(h * n, 0.0);

    std::vector<double> x0v(x0.begin(), x0.end());
    parallel_for(m_count, [&](std::size_t j) {
        RealArray traj = ens.members[j].forecast(x0v, horizon);
        std::copy(traj.data.begin(), traj.data.end(), dist.member_traj.begin() + j * h * n);
    });

    std::vector<double> stack(m_count), scratch;
    for (std::size_t s = 0; s < h * n; ++s) {
        for (std::size_t j = 0; j < m_count; ++j) stack[j] = dist.member_traj[j * h * n + s];
        const double mu = detail::canonical_mean(stack, scratch);
        dist.mean[s] = mu;
        if (m_count > 1) {
            std::vector<double> sq(m_count);
            for (std::size_t j = 0; j < m_count; ++j) {
                const double d = stack[j] - mu;
                sq[j] = d * d;
            }
            dist.spread[s] = std::sqrt(detail::canonical_sum(sq, scratch) /
                                       static_cast<double>(m_count - 1));
        }
    }
    return dist;
}

}  // namespace kuq
