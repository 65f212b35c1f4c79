#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "kuq/errors.hpp"

namespace kuq {

/// Per-channel affine normalization (x - mean) / std.
/// Channels with negligible variance get std 1 so they map to 0.
struct Normalization {
    std::vector<double> mean;
    std::vector<double> stdev;

    std::size_t channels() const { return mean.size(); }

    double apply(std::size_t channel, double v) const {
        return (v - mean[channel]) / stdev[channel];
    }
    double invert(std::size_t channel, double v) const {
        return v * stdev[channel] + mean[channel];
    }

    void apply_state(std::span<double> state) const {
        for (std::size_t c = 0; c < state.size(); ++c) state[c] = apply(c, state[c]);
    }
    void invert_state(std::span<double> state) const {
        for (std::size_t c = 0; c < state.size(); ++c) state[c] = invert(c, state[c]);
    }

    void validate() const {
        if (mean.size() != stdev.size()) throw ContractError("normalization: mean/std size mismatch");
        for (double s : stdev)
            if (!(s > 0.0)) throw ContractError("normalization: std must be > 0");
    }
};

}  // namespace kuq
