#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "kuq/dataset.hpp"
#include "kuq/errors.hpp"
#include "kuq/metrics.hpp"
#include "kuq/model.hpp"
#include "kuq/threadpool.hpp"

namespace kuq {

struct EvalOptions {
    int horizon = 0;                  // 0: full series length T
    std::size_t series_begin = 0;     // half-open series slice
    std::size_t series_end = SIZE_MAX;
    int bin_count = 20;
};

/// Aggregated probabilistic-forecast quality over a dataset. Forecasts run
/// from each series' t = 0 in normalized space and are scored against the raw
/// truth after de-normalization.
struct EvalReport {
    std::size_t series_used = 0;
    int horizon = 0;
    std::size_t member_count = 0;
    double crps_per_scalar = 0.0;   // headline: mean over univariate samples
    double crps_channel_sum = 0.0;  // channel-summed variant
    double mae = 0.0;               // MAE of the mean prediction
    SpreadSkillReport spread_skill;

    nlohmann::json to_json() const {
        nlohmann::json bins = nlohmann::json::array();
        for (const auto& b : spread_skill.bins) {
            bins.push_back({{"spread", b.spread}, {"skill", b.skill}, {"count", b.count}});
        }
        nlohmann::json j{
            {"series_used", series_used},
            {"horizon", horizon},
            {"members", member_count},
            {"crps_per_scalar", crps_per_scalar},
            {"crps_channel_sum", crps_channel_sum},
            {"mae", mae},
            {"ssrel", spread_skill.ssrel},
            {"ssrat", spread_skill.ssrat},
            {"bin_count", spread_skill.bin_count},
            {"samples", spread_skill.total_samples},
            {"bins", bins},
            // Bin coordinates are RMS values, matching the skill definition.
            {"spread_bin_coordinate", "rms"},
        };
        if (!spread_skill.flag.empty()) j["flag"] = spread_skill.flag;
        return j;
    }

    std::string bins_csv() const {
        std::string out = "bin,spread,skill,count\n";
        for (std::size_t i = 0; i < spread_skill.bins.size(); ++i) {
            const auto& b = spread_skill.bins[i];
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%zu\n", i, b.spread, b.skill, b.count);
            out += buf;
        }
        return out;
    }
};

inline EvalReport evaluate_ensemble(const Ensemble& ensemble, const TimeSeriesDataset& raw,
                                    const EvalOptions& opt = {}) {
    ensemble.validate();
    raw.validate();
    if (ensemble.normalization.channels() != raw.channel_count) {
        throw ShapeError("evaluate: checkpoint has " +
                         std::to_string(ensemble.normalization.channels()) +
                         " channels, dataset has " + std::to_string(raw.channel_count));
    }
    const std::size_t begin = std::min(opt.series_begin, raw.series_count);
    const std::size_t end = std::min(opt.series_end, raw.series_count);
    if (begin >= end) throw ContractError("evaluate: empty series slice");
    const int horizon = opt.horizon > 0 ? opt.horizon : static_cast<int>(raw.horizon());
    if (static_cast<std::size_t>(horizon) > raw.horizon()) {
        throw ContractError("evaluate: horizon " + std::to_string(horizon) +
                            " exceeds dataset T = " + std::to_string(raw.horizon()));
    }

    const std::size_t n_series = end - begin;
    const std::size_t n = raw.channel_count;
    const auto h = static_cast<std::size_t>(horizon);

    std::vector<ScoreResult> per_series(n_series);
    parallel_for(n_series, [&](std::size_t s) {
        const std::size_t i = begin + s;
        std::vector<double> x0(raw.state(i, 0).begin(), raw.state(i, 0).end());
        ensemble.normalization.apply_state(x0);
        ForecastDistribution dist = ensemble_forecast(ensemble, x0, horizon);
        // Back to raw units before scoring.
        for (std::size_t j = 0; j < dist.member_count; ++j)
            for (std::size_t t = 0; t < h; ++t)
                for (std::size_t c = 0; c < n; ++c) {
                    double& v = dist.member_traj[(j * h + t) * n + c];
                    v = ensemble.normalization.invert(c, v);
                }
        for (std::size_t t = 0; t < h; ++t)
            for (std::size_t c = 0; c < n; ++c) {
                dist.mean[t * n + c] = ensemble.normalization.invert(c, dist.mean[t * n + c]);
                dist.spread[t * n + c] *= ensemble.normalization.stdev[c];
            }
        std::vector<double> truth(h * n);
        for (std::size_t t = 0; t < h; ++t)
            for (std::size_t c = 0; c < n; ++c) truth[t * n + c] = raw.at(i, t + 1, c);
        per_series[s] = score_forecasts(dist, truth);
    });

    std::vector<ScoredSample> samples;
    std::vector<double> crps_scalar, crps_chan, maes, scratch;
    for (auto& sr : per_series) {
        crps_scalar.push_back(sr.crps_per_scalar);
        crps_chan.push_back(sr.crps_channel_sum);
        maes.push_back(sr.mae);
        for (auto& s : sr.samples) samples.push_back(std::move(s));
    }
    EvalReport report;
    report.series_used = n_series;
    report.horizon = horizon;
    report.member_count = ensemble.size();
    const double ns = static_cast<double>(n_series);
    report.crps_per_scalar = detail::canonical_sum(crps_scalar, scratch) / ns;
    report.crps_channel_sum = detail::canonical_sum(crps_chan, scratch) / ns;
    report.mae = detail::canonical_sum(maes, scratch) / ns;
    report.spread_skill = spread_skill_report(samples, opt.bin_count);
    return report;
}

}  // namespace kuq
