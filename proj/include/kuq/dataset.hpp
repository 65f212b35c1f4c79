#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "kuq/errors.hpp"
#include "kuq/normalize.hpp"
#include "kuq/reduce.hpp"

namespace kuq {

/// N series x (T+1) steps x n channels of real observations.
struct TimeSeriesDataset {
    std::size_t series_count = 0;   // N
    std::size_t step_count = 0;     // T + 1
    std::size_t channel_count = 0;  // n
    std::vector<double> values;     // row-major N x (T+1) x n
    std::vector<std::string> channel_names;
    double dt = 1.0;
    std::string provenance;  // in-memory tag only, not serialized

    std::size_t horizon() const { return step_count - 1; }  // T

    double at(std::size_t i, std::size_t t, std::size_t c) const {
        return values[(i * step_count + t) * channel_count + c];
    }
    double& at(std::size_t i, std::size_t t, std::size_t c) {
        return values[(i * step_count + t) * channel_count + c];
    }
    std::span<const double> state(std::size_t i, std::size_t t) const {
        return std::span<const double>(values).subspan((i * step_count + t) * channel_count,
                                                       channel_count);
    }

    void validate() const {
        if (series_count < 1 || step_count < 2 || channel_count < 1) {
            throw ContractError("dataset: needs N >= 1, T >= 1, n >= 1");
        }
        if (values.size() != series_count * step_count * channel_count) {
            throw ShapeError("dataset: value count does not match N x (T+1) x n");
        }
        if (channel_names.size() != channel_count) {
            throw ShapeError("dataset: channel name count does not match n");
        }
        for (double v : values)
            if (!std::isfinite(v)) throw NumericError("dataset: non-finite value");
    }
};

/// Per-channel mean and std over every (series, step) sample. Std uses
/// divisor count-1; near-constant channels get std 1 so they normalize to 0.
inline Normalization fit_normalizer(const TimeSeriesDataset& ds) {
    ds.validate();
    const std::size_t n = ds.channel_count;
    const std::size_t samples = ds.series_count * ds.step_count;
    Normalization norm;
    norm.mean.assign(n, 0.0);
    norm.stdev.assign(n, 1.0);
    std::vector<double> buf(samples), scratch;
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t s = 0; s < samples; ++s) buf[s] = ds.values[s * n + c];
        const double mu = detail::canonical_sum(buf, scratch) / static_cast<double>(samples);
        norm.mean[c] = mu;
        if (samples > 1) {
            std::vector<double> sq(samples);
            for (std::size_t s = 0; s < samples; ++s) {
                const double d = buf[s] - mu;
                sq[s] = d * d;
            }
            const double var =
                detail::canonical_sum(sq, scratch) / static_cast<double>(samples - 1);
            const double sd = std::sqrt(var);
            norm.stdev[c] = sd < 1e-12 ? 1.0 : sd;
        }
    }
    return norm;
}

inline TimeSeriesDataset apply_normalizer(const Normalization& norm, const TimeSeriesDataset& ds) {
    if (norm.channels() != ds.channel_count) {
        throw ShapeError("normalize: channel count mismatch");
    }
    TimeSeriesDataset out = ds;
    const std::size_t n = ds.channel_count;
    for (std::size_t s = 0; s < out.values.size(); ++s) {
        out.values[s] = norm.apply(s % n, out.values[s]);
    }
    return out;
}

// ---- KTS1 binary format ------------------------------------------------------
//
// magic "KTS1", then little-endian u32 N, u32 step count (T+1), u32 n,
// u32 name-block length, UTF-8 channel names joined by '\n', f64 dt, then
// N*(T+1)*n little-endian f64 in row-major order.

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
}

/// Cursor that throws ParseError with the current byte offset on underrun.
struct ByteReader {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;

    void need(std::size_t count, const char* what) const {
        if (pos + count > bytes.size()) {
            throw ParseError(std::string("unexpected end of file while reading ") + what, pos);
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    double f64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
        pos += 8;
        return std::bit_cast<double>(v);
    }
    std::string str(std::size_t count, const char* what) {
        need(count, what);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), count);
        pos += count;
        return s;
    }
};

inline std::vector<std::string> split_names(const std::string& block) {
    std::vector<std::string> names;
    std::size_t start = 0;
    for (;;) {
        const std::size_t nl = block.find('\n', start);
        if (nl == std::string::npos) {
            names.push_back(block.substr(start));
            return names;
        }
        names.push_back(block.substr(start, nl - start));
        start = nl + 1;
    }
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_kts1(const TimeSeriesDataset& ds) {
    ds.validate();
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'K', 'T', 'S', '1'});
    detail::put_u32(out, static_cast<std::uint32_t>(ds.series_count));
    detail::put_u32(out, static_cast<std::uint32_t>(ds.step_count));
    detail::put_u32(out, static_cast<std::uint32_t>(ds.channel_count));
    std::string names;
    for (std::size_t c = 0; c < ds.channel_names.size(); ++c) {
        if (c) names += '\n';
        names += ds.channel_names[c];
    }
    detail::put_u32(out, static_cast<std::uint32_t>(names.size()));
    out.insert(out.end(), names.begin(), names.end());
    detail::put_f64(out, ds.dt);
    for (double v : ds.values) detail::put_f64(out, v);
    return out;
}

inline TimeSeriesDataset decode_kts1(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r{bytes};
    const std::string magic = r.str(4, "magic");
    if (magic != "KTS1") throw ParseError("bad magic, expected KTS1", 0);
    TimeSeriesDataset ds;
    ds.series_count = r.u32("series count");
    ds.step_count = r.u32("step count");
    ds.channel_count = r.u32("channel count");
    if (ds.series_count < 1 || ds.step_count < 2 || ds.channel_count < 1) {
        throw ParseError("invalid dimensions (need N >= 1, T+1 >= 2, n >= 1)", 4);
    }
    const std::uint32_t name_len = r.u32("name block length");
    const std::size_t names_at = r.pos;
    const std::string name_block = r.str(name_len, "channel names");
    ds.channel_names = detail::split_names(name_block);
    if (ds.channel_names.size() != ds.channel_count) {
        throw ParseError("channel name count does not match n", names_at);
    }
    ds.dt = r.f64("dt");
    const std::size_t count = ds.series_count * ds.step_count * ds.channel_count;
    ds.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t at = r.pos;
        ds.values[i] = r.f64("data payload");
        if (!std::isfinite(ds.values[i])) throw ParseError("non-finite data value", at);
    }
    if (r.pos != bytes.size()) {
        throw ParseError("trailing bytes after data payload", r.pos);
    }
    return ds;
}

inline void save_dataset(const TimeSeriesDataset& ds, const std::string& path) {
    const std::vector<std::uint8_t> bytes = encode_kts1(ds);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to '" + path + "'");
}

inline TimeSeriesDataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    TimeSeriesDataset ds = decode_kts1(bytes);
    ds.provenance = path;
    return ds;
}

}  // namespace kuq
