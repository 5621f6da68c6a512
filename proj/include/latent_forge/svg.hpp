#pragma once

// Deterministic standalone SVG plots: fixed canvas, fixed numeric precision,
// series drawn in the order given.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "common.hpp"
#include "error.hpp"

namespace latent_forge {

enum class PlotKind { line, kde, scatter, quantile_band };

struct PlotSeries {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
    std::vector<double> y_low;   // quantile_band only
    std::vector<double> y_high;  // quantile_band only
};

struct PlotSpec {
    PlotKind kind = PlotKind::line;
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<PlotSeries> series;
    std::filesystem::path output;
};

namespace detail {

inline std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    std::string s = buf;
    if (s == "-0.000") s = "0.000";
    return s;
}

inline std::string fmt_tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return colors[i % 10];
}

}  // namespace detail

/// SVG document text for a plot.
inline std::string render_svg(const PlotSpec& spec) {
    if (spec.series.empty()) throw PlotError("plot '" + spec.title + "' has no series");
    double x_lo = INFINITY, x_hi = -INFINITY, y_lo = INFINITY, y_hi = -INFINITY;
    const auto extend = [](double v, double& lo, double& hi) {
        if (!std::isfinite(v)) throw PlotError("plot data contains a non-finite value");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    };
    for (const auto& s : spec.series) {
        if (s.x.empty()) throw PlotError("series '" + s.name + "' is empty");
        if (s.x.size() != s.y.size()) throw PlotError("series '" + s.name + "' has mismatched x/y lengths");
        if (spec.kind == PlotKind::quantile_band &&
            (s.y_low.size() != s.x.size() || s.y_high.size() != s.x.size()))
            throw PlotError("quantile band '" + s.name + "' needs low/high values per point");
        for (double v : s.x) extend(v, x_lo, x_hi);
        for (double v : s.y) extend(v, y_lo, y_hi);
        for (double v : s.y_low) extend(v, y_lo, y_hi);
        for (double v : s.y_high) extend(v, y_lo, y_hi);
    }
    if (spec.kind == PlotKind::kde) y_lo = std::min(y_lo, 0.0);
    if (x_hi == x_lo) {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    if (y_hi == y_lo) {
        y_lo -= 0.5;
        y_hi += 0.5;
    }

    const double width = 640, height = 400, left = 70, right = 20, top = 40, bottom = 55;
    const double pw = width - left - right, ph = height - top - bottom;
    const auto px = [&](double x) { return left + (x - x_lo) / (x_hi - x_lo) * pw; };
    const auto py = [&](double y) { return top + ph - (y - y_lo) / (y_hi - y_lo) * ph; };
    using detail::fmt_num;

    std::string out;
    out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
    out += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"400\" fill=\"white\"/>\n";
    out += "<text x=\"320\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" +
           detail::xml_escape(spec.title) + "</text>\n";
    // axes and ticks
    out += "<line x1=\"" + fmt_num(left) + "\" y1=\"" + fmt_num(top + ph) + "\" x2=\"" + fmt_num(left + pw) +
           "\" y2=\"" + fmt_num(top + ph) + "\" stroke=\"black\"/>\n";
    out += "<line x1=\"" + fmt_num(left) + "\" y1=\"" + fmt_num(top) + "\" x2=\"" + fmt_num(left) + "\" y2=\"" +
           fmt_num(top + ph) + "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = x_lo + (x_hi - x_lo) * i / 4.0, fy = y_lo + (y_hi - y_lo) * i / 4.0;
        out += "<line x1=\"" + fmt_num(px(fx)) + "\" y1=\"" + fmt_num(top + ph) + "\" x2=\"" + fmt_num(px(fx)) +
               "\" y2=\"" + fmt_num(top + ph + 5) + "\" stroke=\"black\"/>\n";
        out += "<text x=\"" + fmt_num(px(fx)) + "\" y=\"" + fmt_num(top + ph + 18) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + detail::fmt_tick(fx) +
               "</text>\n";
        out += "<line x1=\"" + fmt_num(left - 5) + "\" y1=\"" + fmt_num(py(fy)) + "\" x2=\"" + fmt_num(left) +
               "\" y2=\"" + fmt_num(py(fy)) + "\" stroke=\"black\"/>\n";
        out += "<text x=\"" + fmt_num(left - 8) + "\" y=\"" + fmt_num(py(fy) + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + detail::fmt_tick(fy) +
               "</text>\n";
    }
    out += "<text x=\"" + fmt_num(left + pw / 2) + "\" y=\"" + fmt_num(height - 12) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" +
           detail::xml_escape(spec.x_label) + "</text>\n";
    out += "<text x=\"16\" y=\"" + fmt_num(top + ph / 2) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"13\" transform=\"rotate(-90 16 " + fmt_num(top + ph / 2) + ")\">" +
           detail::xml_escape(spec.y_label) + "</text>\n";

    for (std::size_t si = 0; si < spec.series.size(); ++si) {
        const auto& s = spec.series[si];
        const std::string color = detail::palette(si);
        out += "<g>\n<title>" + detail::xml_escape(s.name) + "</title>\n";
        if (spec.kind == PlotKind::quantile_band) {
            std::string pts;
            for (std::size_t i = 0; i < s.x.size(); ++i)
                pts += fmt_num(px(s.x[i])) + "," + fmt_num(py(s.y_high[i])) + " ";
            for (std::size_t i = s.x.size(); i-- > 0;)
                pts += fmt_num(px(s.x[i])) + "," + fmt_num(py(s.y_low[i])) + (i ? " " : "");
            out += "<polygon points=\"" + pts + "\" fill=\"" + color + "\" fill-opacity=\"0.25\" stroke=\"none\"/>\n";
        }
        if (spec.kind == PlotKind::scatter) {
            for (std::size_t i = 0; i < s.x.size(); ++i)
                out += "<circle cx=\"" + fmt_num(px(s.x[i])) + "\" cy=\"" + fmt_num(py(s.y[i])) + "\" r=\"2\" fill=\"" +
                       color + "\" fill-opacity=\"0.6\"/>\n";
        } else {
            std::string pts;
            for (std::size_t i = 0; i < s.x.size(); ++i)
                pts += fmt_num(px(s.x[i])) + "," + fmt_num(py(s.y[i])) + (i + 1 < s.x.size() ? " " : "");
            out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\"/>\n";
        }
        out += "</g>\n";
        // legend
        const double ly = top + 14 + 16 * static_cast<double>(si);
        out += "<rect x=\"" + fmt_num(left + pw - 140) + "\" y=\"" + fmt_num(ly - 9) + "\" width=\"10\" height=\"10\" fill=\"" +
               color + "\"/>\n";
        out += "<text x=\"" + fmt_num(left + pw - 125) + "\" y=\"" + fmt_num(ly) +
               "\" font-family=\"sans-serif\" font-size=\"11\">" + detail::xml_escape(s.name) + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

/// Renders to spec.output.
inline void render_plot(const PlotSpec& spec) {
    const std::string svg = render_svg(spec);
    if (spec.output.empty()) throw PlotError("plot '" + spec.title + "' has no output path");
    try {
        write_text_file(spec.output, svg);
    } catch (const IoError& e) {
        throw PlotError(std::string("cannot write plot: ") + e.what());
    }
}

}  // namespace latent_forge
