#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "kuq/adam.hpp"
#include "kuq/checkpoint.hpp"
#include "kuq/dataset.hpp"
#include "kuq/errors.hpp"
#include "kuq/losses.hpp"
#include "kuq/model.hpp"
#include "kuq/rng.hpp"
#include "kuq/tape.hpp"

namespace kuq {

/// Everything a training run needs. CLI flags and config files mirror these
/// fields; see the README for the exact names.
struct RunConfig {
    std::string dataset;  // path, consumed by the CLI layer
    ModelConfig model;
    int members = 8;
    Regime regime = Regime::independent;
    double lambda = 0.0;  // diversity weight; crps_proxy conventionally uses 1
    double alpha = 0.01;  // orthogonality weight
    AdamConfig optim;
    int steps = 5000;
    int batch_size = 32;
    std::uint64_t seed = 0;
    int horizon = 0;  // evaluation horizon; 0 means full series length
    std::string out_dir;
    bool allow_divergent = false;
    // Training window: 0 trains on full series anchored at t = 0, matching
    // the objective definitions. A shorter window with random_window set
    // augments batches with random anchor offsets instead.
    int train_horizon = 0;
    bool random_window = false;

    double effective_lambda() const { return regime == Regime::independent ? 0.0 : lambda; }

    void validate() const {
        model.validate();
        optim.validate();
        if (members < 1) throw ConfigError("members must be >= 1");
        if (steps < 1) throw ConfigError("steps must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
        if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
        if (regime != Regime::crps_proxy && lambda > 1.0 && !allow_divergent) {
            throw ConfigError(
                "lambda > 1: the training procedure will diverge with an inter-model variance "
                "growing to infinity; pass --allow-divergent to run it anyway");
        }
        if (horizon < 0) throw ConfigError("horizon must be >= 0");
        if (train_horizon < 0) throw ConfigError("train_horizon must be >= 0");
        if (random_window && train_horizon == 0) {
            throw ConfigError("random_window needs a train_horizon below the series length");
        }
    }
};

/// Series indices for one optimization step: full-series batches sampled
/// without replacement within each epoch, under a per-epoch permutation that
/// depends only on (seed, epoch). Stateless in the step index, so resumed
/// runs see the same schedule.
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t n_series,
                                              std::size_t batch_size, std::int64_t step) {
    if (batch_size > n_series) batch_size = n_series;
    const std::size_t per_epoch = (n_series + batch_size - 1) / batch_size;
    const auto epoch = static_cast<std::uint64_t>(step) / per_epoch;
    const std::size_t slot = static_cast<std::uint64_t>(step) % per_epoch;

    std::vector<std::size_t> perm(n_series);
    for (std::size_t i = 0; i < n_series; ++i) perm[i] = i;
    Rng rng(Rng::derive(Rng::derive(seed, 0x62617463ull), epoch));  // "batc" stream
    for (std::size_t i = n_series; i > 1; --i) {
        const std::size_t k = rng.below(i);
        std::swap(perm[i - 1], perm[k]);
    }
    const std::size_t begin = slot * batch_size;
    const std::size_t end = std::min(begin + batch_size, n_series);
    return {perm.begin() + static_cast<std::ptrdiff_t>(begin),
            perm.begin() + static_cast<std::ptrdiff_t>(end)};
}

inline TrainingBatch make_batch(const TimeSeriesDataset& normalized,
                                std::span<const std::size_t> series) {
    TrainingBatch batch;
    batch.series_count = series.size();
    batch.horizon = normalized.horizon();
    batch.channels = normalized.channel_count;
    batch.values.reserve(batch.series_count * normalized.step_count * batch.channels);
    for (std::size_t i : series) {
        const auto row = std::span<const double>(normalized.values)
                             .subspan(i * normalized.step_count * normalized.channel_count,
                                      normalized.step_count * normalized.channel_count);
        batch.values.insert(batch.values.end(), row.begin(), row.end());
    }
    return batch;
}

/// Window of `horizon + 1` steps per series, starting at the given offsets.
inline TrainingBatch make_batch_window(const TimeSeriesDataset& normalized,
                                       std::span<const std::size_t> series,
                                       std::span<const std::size_t> offsets,
                                       std::size_t horizon) {
    TrainingBatch batch;
    batch.series_count = series.size();
    batch.horizon = horizon;
    batch.channels = normalized.channel_count;
    batch.values.reserve(batch.series_count * (horizon + 1) * batch.channels);
    for (std::size_t k = 0; k < series.size(); ++k) {
        const std::size_t start = (series[k] * normalized.step_count + offsets[k]) *
                                  normalized.channel_count;
        const auto row = std::span<const double>(normalized.values)
                             .subspan(start, (horizon + 1) * normalized.channel_count);
        batch.values.insert(batch.values.end(), row.begin(), row.end());
    }
    return batch;
}

struct TrainLogRow {
    std::int64_t step = 0;
    LossBreakdown loss;
    double ensemble_variance = 0.0;  // positive inter-member variance, all regimes
};

inline const char* train_log_header() {
    return "step,pred,ae,lin,orth,var,abs_dev,total,ensemble_variance";
}

inline std::string format_log_row(const TrainLogRow& row) {
    char buf[360];
    std::snprintf(buf, sizeof(buf),
                  "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                  static_cast<long long>(row.step), row.loss.pred, row.loss.ae, row.loss.lin,
                  row.loss.orth, row.loss.var, row.loss.abs_dev, row.loss.total,
                  row.ensemble_variance);
    return buf;
}

/// Joint trainer: one Adam instance over the concatenated parameters of all
/// members, one tape per step. The independent regime is the lambda = 0
/// special case of the same path, so the two are bit-identical by
/// construction.
class Trainer {
public:
    Trainer(const RunConfig& cfg, const TimeSeriesDataset& raw) : cfg_(cfg) {
        init_common(raw);
        const int n = static_cast<int>(raw.channel_count);
        for (int j = 0; j < cfg_.members; ++j) {
            ensemble_.members.push_back(
                make_autoencoder(n, cfg_.model, cfg_.seed + static_cast<std::uint64_t>(j)));
        }
        finish_setup();
    }

    Trainer(const RunConfig& cfg, const TimeSeriesDataset& raw, const Checkpoint& resume)
        : cfg_(cfg) {
        init_common(raw);
        if (resume.state_dim != static_cast<int>(raw.channel_count)) {
            throw ShapeError("resume: checkpoint state_dim " + std::to_string(resume.state_dim) +
                             " does not match dataset channels " +
                             std::to_string(raw.channel_count));
        }
        if (resume.member_count != static_cast<std::size_t>(cfg_.members)) {
            throw ConfigError("resume: checkpoint holds " + std::to_string(resume.member_count) +
                              " members, config asks for " + std::to_string(cfg_.members));
        }
        Ensemble restored = restore_ensemble(resume);
        ensemble_.members = std::move(restored.members);
        ensemble_.normalization = resume.normalization;
        normalized_ = apply_normalizer(ensemble_.normalization, raw);
        step_ = resume.step;
        finish_setup();
        if (resume.has_optimizer) {
            std::vector<RealArray> m, v;
            std::size_t pos = 0;
            for (RealArray* p : param_ptrs_) {
                RealArray mm = RealArray::zeros(p->shape), vv = RealArray::zeros(p->shape);
                for (std::size_t i = 0; i < p->numel(); ++i) {
                    mm.data[i] = resume.optim_m[pos + i];
                    vv.data[i] = resume.optim_v[pos + i];
                }
                pos += p->numel();
                m.push_back(std::move(mm));
                v.push_back(std::move(vv));
            }
            adam_->restore(resume.optim_step, std::move(m), std::move(v));
        }
    }

    const Ensemble& ensemble() const { return ensemble_; }
    std::int64_t current_step() const { return step_; }
    const RunConfig& config() const { return cfg_; }

    /// One optimization step. Throws NumericError before touching the
    /// parameters if the loss is non-finite, so the ensemble still holds the
    /// last good state.
    TrainLogRow step() {
        const std::vector<std::size_t> idx =
            batch_indices(cfg_.seed, normalized_.series_count,
                          static_cast<std::size_t>(cfg_.batch_size), step_);
        const TrainingBatch batch = assemble_batch(idx);

        Tape tape;
        graph::EnsembleGraph eg = graph::build_ensemble_graph(
            tape, ensemble_, batch, cfg_.alpha, cfg_.effective_lambda(), cfg_.regime);
        tape.forward();

        TrainLogRow row;
        row.loss = eg.read(tape);
        row.ensemble_variance = eg.prediction_variance(tape);
        if (!std::isfinite(row.loss.total)) {
            throw NumericError("training diverged: non-finite loss at step " +
                               std::to_string(step_ + 1));
        }

        GradMap grads = tape.backward(eg.total);
        grad_list_.clear();
        for (const std::string& name : param_names_) {
            auto it = grads.find(name);
            if (it == grads.end()) throw ContractError("missing gradient for " + name);
            grad_list_.push_back(std::move(it->second));
        }
        adam_->apply(param_ptrs_, grad_list_);

        step_ += 1;
        row.step = step_;
        return row;
    }

    Checkpoint make_checkpoint() const {
        Checkpoint ck = snapshot_ensemble(ensemble_, static_cast<int>(normalized_.channel_count),
                                          cfg_.model, cfg_.alpha, cfg_.seed, step_);
        ck.has_optimizer = true;
        ck.optim = cfg_.optim;
        ck.optim_step = adam_->step_count();
        for (std::size_t a = 0; a < param_ptrs_.size(); ++a) {
            const RealArray& m = adam_->first_moments()[a];
            const RealArray& v = adam_->second_moments()[a];
            ck.optim_m.insert(ck.optim_m.end(), m.data.begin(), m.data.end());
            ck.optim_v.insert(ck.optim_v.end(), v.data.begin(), v.data.end());
        }
        return ck;
    }

private:
    TrainingBatch assemble_batch(std::span<const std::size_t> idx) const {
        const auto full = normalized_.horizon();
        const auto window = static_cast<std::size_t>(cfg_.train_horizon);
        if (window == 0 || window >= full) return make_batch(normalized_, idx);
        std::vector<std::size_t> offsets(idx.size(), 0);
        if (cfg_.random_window) {
            Rng rng(Rng::derive(Rng::derive(cfg_.seed, 0x77696e64ull),
                                static_cast<std::uint64_t>(step_)));  // "wind" stream
            for (auto& o : offsets) o = rng.below(full - window + 1);
        }
        return make_batch_window(normalized_, idx, offsets, window);
    }

    void init_common(const TimeSeriesDataset& raw) {
        cfg_.validate();
        raw.validate();
        ensemble_.regime = cfg_.regime;
        ensemble_.lambda = cfg_.effective_lambda();
        if (ensemble_.normalization.channels() == 0) {
            ensemble_.normalization = fit_normalizer(raw);
            normalized_ = apply_normalizer(ensemble_.normalization, raw);
        }
    }

    void finish_setup() {
        ensemble_.validate();
        for (std::size_t j = 0; j < ensemble_.members.size(); ++j) {
            visit_params(ensemble_.members[j], [&](const std::string& name, RealArray& a) {
                param_names_.push_back("m" + std::to_string(j) + "." + name);
                param_ptrs_.push_back(&a);
            });
        }
        std::vector<const RealArray*> view(param_ptrs_.begin(), param_ptrs_.end());
        adam_.emplace(std::span<const RealArray* const>(view), cfg_.optim);
    }

    RunConfig cfg_;
    TimeSeriesDataset normalized_;
    Ensemble ensemble_;
    std::vector<std::string> param_names_;
    std::vector<RealArray*> param_ptrs_;
    std::optional<AdamState> adam_;
    std::int64_t step_ = 0;
    std::vector<RealArray> grad_list_;
};

}  // namespace kuq
