#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "kuq/errors.hpp"
#include "kuq/model.hpp"

namespace kuq {

namespace detail {

inline std::string svg_num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

}  // namespace detail

/// Band plot of a forecast distribution against the truth: one panel per
/// channel with the mean +/- spread band, every member trajectory and the
/// truth. Returns a standalone SVG document.
inline std::string forecast_svg(const ForecastDistribution& dist, std::span<const double> truth,
                                std::span<const std::string> channel_names) {
    if (truth.size() != dist.horizon * dist.channels) {
        throw ShapeError("forecast_svg: truth trajectory is not H x n");
    }
    const std::size_t h = dist.horizon;
    const std::size_t n = dist.channels;
    const double panel_w = 640.0, panel_h = 200.0, margin = 42.0, gap = 26.0;
    const double width = panel_w + 2.0 * margin;
    const double height = margin + n * panel_h + (n - 1) * gap + margin;

    std::string out;
    out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::svg_num(width) +
           "\" height=\"" + detail::svg_num(height) + "\" viewBox=\"0 0 " +
           detail::svg_num(width) + " " + detail::svg_num(height) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

    for (std::size_t c = 0; c < n; ++c) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t t = 0; t < h; ++t) {
            lo = std::min({lo, truth[t * n + c], dist.mean_at(t, c) - dist.spread_at(t, c)});
            hi = std::max({hi, truth[t * n + c], dist.mean_at(t, c) + dist.spread_at(t, c)});
            for (std::size_t j = 0; j < dist.member_count; ++j) {
                lo = std::min(lo, dist.member(j, t, c));
                hi = std::max(hi, dist.member(j, t, c));
            }
        }
        if (hi <= lo) hi = lo + 1.0;
        const double pad = 0.06 * (hi - lo);
        lo -= pad;
        hi += pad;

        const double top = margin + c * (panel_h + gap);
        const auto px = [&](std::size_t t) {
            return margin + panel_w * (h > 1 ? static_cast<double>(t) / (h - 1) : 0.5);
        };
        const auto py = [&](double v) { return top + panel_h * (1.0 - (v - lo) / (hi - lo)); };

        const std::string name = c < channel_names.size() ? channel_names[c] : std::to_string(c);
        out += "<g id=\"channel-" + std::to_string(c) + "\">\n";
        out += "<rect x=\"" + detail::svg_num(margin) + "\" y=\"" + detail::svg_num(top) +
               "\" width=\"" + detail::svg_num(panel_w) + "\" height=\"" +
               detail::svg_num(panel_h) + "\" fill=\"none\" stroke=\"#cccccc\"/>\n";
        out += "<text x=\"" + detail::svg_num(margin + 4) + "\" y=\"" +
               detail::svg_num(top + 14) + "\" font-size=\"12\">" + name + "</text>\n";

        // mean +/- spread band
        std::string band;
        for (std::size_t t = 0; t < h; ++t) {
            band += detail::svg_num(px(t)) + "," +
                    detail::svg_num(py(dist.mean_at(t, c) + dist.spread_at(t, c))) + " ";
        }
        for (std::size_t t = h; t-- > 0;) {
            band += detail::svg_num(px(t)) + "," +
                    detail::svg_num(py(dist.mean_at(t, c) - dist.spread_at(t, c))) + " ";
        }
        out += "<polygon class=\"band\" points=\"" + band +
               "\" fill=\"#9ecae1\" fill-opacity=\"0.4\" stroke=\"none\"/>\n";

        const auto polyline = [&](const std::string& cls, const std::string& style,
                                  auto&& value_at) {
            std::string pts;
            for (std::size_t t = 0; t < h; ++t) {
                pts += detail::svg_num(px(t)) + "," + detail::svg_num(py(value_at(t))) + " ";
            }
            out += "<polyline class=\"" + cls + "\" points=\"" + pts + "\" fill=\"none\" " +
                   style + "/>\n";
        };
        for (std::size_t j = 0; j < dist.member_count; ++j) {
            polyline("member", "stroke=\"#6baed6\" stroke-width=\"0.8\"",
                     [&](std::size_t t) { return dist.member(j, t, c); });
        }
        polyline("mean", "stroke=\"#08519c\" stroke-width=\"1.6\"",
                 [&](std::size_t t) { return dist.mean_at(t, c); });
        polyline("truth", "stroke=\"#d62728\" stroke-width=\"1.6\" stroke-dasharray=\"5,3\"",
                 [&](std::size_t t) { return truth[t * n + c]; });
        out += "</g>\n";
    }
    out += "</svg>\n";
    return out;
}

}  // namespace kuq
