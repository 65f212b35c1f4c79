#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kuq/array.hpp"
#include "kuq/errors.hpp"

namespace kuq {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (!(lr > 0.0)) throw ContractError("adam: learning rate must be > 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ContractError("adam: beta1 must be in [0, 1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ContractError("adam: beta2 must be in [0, 1)");
        if (!(eps > 0.0)) throw ContractError("adam: eps must be > 0");
    }
};

/// Bias-corrected Adam over a fixed list of parameter arrays.
class AdamState {
public:
    AdamState(std::span<const RealArray* const> params, AdamConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (const RealArray* p : params) {
            m_.push_back(RealArray::zeros(p->shape));
            v_.push_back(RealArray::zeros(p->shape));
        }
    }

    const AdamConfig& config() const { return cfg_; }
    std::int64_t step_count() const { return step_; }
    std::span<const RealArray> first_moments() const { return m_; }
    std::span<const RealArray> second_moments() const { return v_; }

    /// Restores optimizer state (checkpoint resume).
    void restore(std::int64_t step, std::vector<RealArray> m, std::vector<RealArray> v) {
        if (step < 0 || m.size() != m_.size() || v.size() != v_.size()) {
            throw ContractError("adam: restore state does not match parameter list");
        }
        for (std::size_t i = 0; i < m.size(); ++i) {
            if (!same_shape(m[i], m_[i]) || !same_shape(v[i], v_[i])) {
                throw ShapeError("adam: restored moment shape mismatch at array " +
                                 std::to_string(i));
            }
        }
        step_ = step;
        m_ = std::move(m);
        v_ = std::move(v);
    }

    void apply(std::span<RealArray* const> params, std::span<const RealArray> grads) {
        if (params.size() != m_.size() || grads.size() != m_.size()) {
            throw ShapeError("adam: parameter/gradient list size mismatch");
        }
        step_ += 1;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t a = 0; a < params.size(); ++a) {
            RealArray& p = *params[a];
            const RealArray& g = grads[a];
            if (!same_shape(p, m_[a]) || !same_shape(g, p)) {
                throw ShapeError("adam: shape mismatch at array " + std::to_string(a) + ": param " +
                                 shape_str(p.shape) + ", grad " + shape_str(g.shape));
            }
            auto& m = m_[a].data;
            auto& v = v_[a].data;
            for (std::size_t i = 0; i < p.numel(); ++i) {
                const double gi = g.data[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    AdamConfig cfg_;
    std::int64_t step_ = 0;
    std::vector<RealArray> m_;
    std::vector<RealArray> v_;
};

/// One optimizer step: updates params in place and advances the state.
inline void adam_step(AdamState& state, std::span<RealArray* const> params,
                      std::span<const RealArray> grads) {
    state.apply(params, grads);
}

}  // namespace kuq
