#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "kuq/errors.hpp"
#include "kuq/model.hpp"
#include "kuq/reduce.hpp"

namespace kuq {

/// Ensemble CRPS for one scalar:
///   (1/M) sum_j |y - m_j|  -  (1/(2 M^2)) sum_j sum_k |m_j - m_k|.
/// Always >= 0; equals the MAE for M = 1. Accumulation is order-canonical, so
/// member permutations change nothing, bit for bit.
inline double crps_ensemble(std::span<const double> members, double truth) {
    if (members.empty()) throw ContractError("crps_ensemble: empty member list");
    const std::size_t m_count = members.size();
    std::vector<double> buf(m_count), scratch;
    for (std::size_t j = 0; j < m_count; ++j) buf[j] = std::fabs(truth - members[j]);
    const double mae = detail::canonical_sum(buf, scratch) / static_cast<double>(m_count);
    if (m_count == 1) return mae;
    std::vector<double> pair_buf;
    pair_buf.reserve(m_count * m_count);
    for (std::size_t j = 0; j < m_count; ++j)
        for (std::size_t k = 0; k < m_count; ++k)
            pair_buf.push_back(std::fabs(members[j] - members[k]));
    const double pairwise = detail::canonical_sum(pair_buf, scratch) /
                            (2.0 * static_cast<double>(m_count) * static_cast<double>(m_count));
    return mae - pairwise;
}

/// Multivariate convention: scores are summed over variables, ignoring
/// correlations. `members` is (M x n) row-major, `truth` has n entries.
inline double crps_ensemble_sum(std::span<const double> members, std::size_t member_count,
                                std::span<const double> truth) {
    if (member_count == 0) throw ContractError("crps_ensemble_sum: empty member list");
    const std::size_t n = truth.size();
    if (members.size() != member_count * n) {
        throw ShapeError("crps_ensemble_sum: member block is not M x n");
    }
    std::vector<double> slice(member_count), per_channel(n);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t j = 0; j < member_count; ++j) slice[j] = members[j * n + c];
        per_channel[c] = crps_ensemble(slice, truth[c]);
    }
    return detail::canonical_sum(per_channel);
}

/// Both routes through the CRPS integral of the empirical step CDF.
struct CrpsIntegral {
    double exact = 0.0;       // piecewise-constant integrand, closed form
    double quadrature = 0.0;  // midpoint rule at the requested step
};

/// Integrates [F(y) - 1_{y >= truth}]^2 dy for the empirical member CDF.
/// The integrand is piecewise constant between sorted breakpoints, so the
/// closed form is exact; the quadrature route covers [min - 1, max + 1].
inline CrpsIntegral crps_integral(std::span<const double> members, double truth, double step) {
    if (members.empty()) throw ContractError("crps_integral: empty member list");
    if (!(step > 0.0)) throw ContractError("crps_integral: step must be > 0");
    std::vector<double> brk(members.begin(), members.end());
    brk.push_back(truth);
    std::sort(brk.begin(), brk.end());
    brk.erase(std::unique(brk.begin(), brk.end()), brk.end());
    const double m_count = static_cast<double>(members.size());

    const auto cdf = [&](double y) {
        double c = 0.0;
        for (double m : members)
            if (m <= y) c += 1.0;
        return c / m_count;
    };

    CrpsIntegral out;
    for (std::size_t i = 0; i + 1 < brk.size(); ++i) {
        const double f = cdf(brk[i]);
        const double heav = brk[i] >= truth ? 1.0 : 0.0;
        const double g = f - heav;
        out.exact += g * g * (brk[i + 1] - brk[i]);
    }

    const double lo = brk.front() - 1.0;
    const double hi = brk.back() + 1.0;
    const auto cells = static_cast<std::size_t>(std::ceil((hi - lo) / step));
    for (std::size_t i = 0; i < cells; ++i) {
        const double y = lo + (static_cast<double>(i) + 0.5) * step;
        if (y > hi) break;
        const double g = cdf(y) - (y >= truth ? 1.0 : 0.0);
        out.quadrature += g * g * step;
    }
    return out;
}

/// Independent oracle for crps_ensemble: the closed-form integral.
inline double crps_integral_oracle(std::span<const double> members, double truth, double step) {
    return crps_integral(members, truth, step).exact;
}

/// One univariate forecast scalar: spectral bands and horizons are separated.
/// spread uses divisor M-1; error is the absolute error of the mean prediction.
struct ScoredSample {
    double spread = 0.0;
    double error = 0.0;
    std::vector<double> members;
    double truth = 0.0;
};

struct ScoreResult {
    std::vector<ScoredSample> samples;      // one per (t, channel)
    double crps_per_scalar = 0.0;           // mean over samples of scalar CRPS
    double crps_channel_sum = 0.0;          // mean over t of channel-summed CRPS
    double mae = 0.0;                       // mean over samples of |mean - truth|
};

/// Scores a forecast distribution against a truth trajectory (H x n).
inline ScoreResult score_forecasts(const ForecastDistribution& dist,
                                   std::span<const double> truth) {
    if (truth.size() != dist.horizon * dist.channels) {
        throw ShapeError("score_forecasts: truth trajectory is not H x n");
    }
    if (dist.member_count == 0) throw ContractError("score_forecasts: empty distribution");
    ScoreResult out;
    out.samples.reserve(dist.horizon * dist.channels);
    std::vector<double> crps_vals, err_vals, step_sums;
    std::vector<double> slice(dist.member_count), scratch;
    for (std::size_t t = 0; t < dist.horizon; ++t) {
        double channel_sum = 0.0;
        for (std::size_t c = 0; c < dist.channels; ++c) {
            const std::size_t s = t * dist.channels + c;
            ScoredSample sample;
            sample.truth = truth[s];
            sample.spread = dist.spread[s];
            sample.error = std::fabs(dist.mean[s] - truth[s]);
            sample.members.resize(dist.member_count);
            for (std::size_t j = 0; j < dist.member_count; ++j) {
                sample.members[j] = dist.member(j, t, c);
            }
            const double crps = crps_ensemble(sample.members, sample.truth);
            crps_vals.push_back(crps);
            err_vals.push_back(sample.error);
            channel_sum += crps;
            out.samples.push_back(std::move(sample));
        }
        step_sums.push_back(channel_sum);
    }
    const double count = static_cast<double>(crps_vals.size());
    out.crps_per_scalar = detail::canonical_sum(crps_vals, scratch) / count;
    out.mae = detail::canonical_sum(err_vals, scratch) / count;
    out.crps_channel_sum =
        detail::canonical_sum(step_sums, scratch) / static_cast<double>(step_sums.size());
    return out;
}

struct SpreadSkillBin {
    double spread = 0.0;  // RMS spread of the samples in the bin
    double skill = 0.0;   // RMS error of the mean predictions in the bin
    std::size_t count = 0;
};

/// Binned spread-skill diagnostics.
/// SSREL: frequency-weighted mean |spread - skill| over bins (0 is ideal).
/// SSRAT: global RMS spread / RMS error, computed unbinned; < 1 flags an
/// overconfident ensemble, > 1 an underconfident one.
struct SpreadSkillReport {
    std::vector<SpreadSkillBin> bins;
    double ssrel = 0.0;
    double ssrat = 0.0;
    int bin_count = 20;
    std::size_t total_samples = 0;
    std::string flag;  // "overconfident" when every spread is zero

    void validate() const {
        std::size_t c = 0;
        for (const auto& b : bins) c += b.count;
        if (c != total_samples) throw ContractError("spread-skill report: bin counts do not sum");
    }
};

/// Equal-width binning over [0, max spread]; empty bins are dropped. Bin
/// coordinates are RMS values for homogeneity between the two axes.
inline SpreadSkillReport spread_skill_report(std::span<const ScoredSample> samples,
                                             int bin_count = 20) {
    if (samples.empty()) throw ContractError("spread_skill_report: needs at least one sample");
    if (bin_count < 1) throw ContractError("spread_skill_report: bin_count must be >= 1");

    SpreadSkillReport report;
    report.bin_count = bin_count;
    report.total_samples = samples.size();

    double max_spread = 0.0;
    for (const auto& s : samples) max_spread = std::max(max_spread, s.spread);

    std::vector<double> scratch;
    std::vector<double> all_spread_sq, all_err_sq;
    all_spread_sq.reserve(samples.size());
    all_err_sq.reserve(samples.size());
    for (const auto& s : samples) {
        all_spread_sq.push_back(s.spread * s.spread);
        all_err_sq.push_back(s.error * s.error);
    }
    const double n = static_cast<double>(samples.size());
    const double rms_spread = std::sqrt(detail::canonical_sum(all_spread_sq, scratch) / n);
    const double rms_err = std::sqrt(detail::canonical_sum(all_err_sq, scratch) / n);

    if (max_spread == 0.0) {
        // Deterministic ensemble: a single bin pinned at zero spread.
        SpreadSkillBin bin;
        bin.spread = 0.0;
        bin.skill = rms_err;
        bin.count = samples.size();
        report.bins.push_back(bin);
        report.ssrel = rms_err;
        report.ssrat = 0.0;
        report.flag = "overconfident";
        return report;
    }

    struct Acc {
        std::vector<double> spread_sq, err_sq;
    };
    std::vector<Acc> acc(static_cast<std::size_t>(bin_count));
    const double width = max_spread / static_cast<double>(bin_count);
    for (const auto& s : samples) {
        auto idx = static_cast<std::size_t>(s.spread / width);
        if (idx >= static_cast<std::size_t>(bin_count)) idx = static_cast<std::size_t>(bin_count) - 1;
        acc[idx].spread_sq.push_back(s.spread * s.spread);
        acc[idx].err_sq.push_back(s.error * s.error);
    }
    std::vector<double> rel_terms;
    for (const auto& a : acc) {
        if (a.spread_sq.empty()) continue;
        const double cnt = static_cast<double>(a.spread_sq.size());
        SpreadSkillBin bin;
        bin.spread = std::sqrt(detail::canonical_sum(a.spread_sq, scratch) / cnt);
        bin.skill = std::sqrt(detail::canonical_sum(a.err_sq, scratch) / cnt);
        bin.count = a.spread_sq.size();
        rel_terms.push_back(cnt / n * std::fabs(bin.spread - bin.skill));
        report.bins.push_back(bin);
    }
    report.ssrel = detail::canonical_sum(rel_terms, scratch);
    report.ssrat = rms_err > 0.0 ? rms_spread / rms_err
                                 : (rms_spread > 0.0
                                        ? std::numeric_limits<double>::infinity()
                                        : 0.0);
    return report;
}

}  // namespace kuq
