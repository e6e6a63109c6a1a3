#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "flowscope/diagnostics.hpp"
#include "flowscope/errors.hpp"

namespace flowscope {

namespace detail_svg {

inline std::string num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

struct Axis {
    double lo = 0.0, hi = 1.0;

    double clip(double v) const { return std::min(std::max(v, lo), hi); }
};

} // namespace detail_svg

// Minimal line plot: axes with tick labels, a +/- std band (omitted when every
// std is zero) and one polyline through the means. Output bytes depend only on
// the series content.
inline void write_svg(const SweepSeries& series, const std::filesystem::path& path) {
    if (series.axis.empty()) throw std::invalid_argument("write_svg: empty series");
    if (series.axis.size() != series.mean.size() || series.axis.size() != series.std_dev.size())
        throw std::invalid_argument("write_svg: ragged series");

    const double width = 640.0, height = 420.0;
    const double ml = 64.0, mr = 16.0, mt = 18.0, mb = 46.0;
    const double pw = width - ml - mr, ph = height - mt - mb;

    detail_svg::Axis xr{series.axis.front(), series.axis.back()};
    if (xr.hi <= xr.lo) {
        xr.lo -= 1.0;
        xr.hi += 1.0;
    }
    double ylo = series.mean[0], yhi = series.mean[0];
    bool any_std = false;
    for (std::size_t i = 0; i < series.axis.size(); ++i) {
        ylo = std::min(ylo, series.mean[i] - series.std_dev[i]);
        yhi = std::max(yhi, series.mean[i] + series.std_dev[i]);
        if (series.std_dev[i] > 0.0) any_std = true;
    }
    if (yhi <= ylo) {
        ylo -= 1.0;
        yhi += 1.0;
    } else {
        const double pad = 0.05 * (yhi - ylo);
        ylo -= pad;
        yhi += pad;
    }

    const auto sx = [&](double v) { return ml + pw * (v - xr.lo) / (xr.hi - xr.lo); };
    const auto sy = [&](double v) { return mt + ph * (1.0 - (v - ylo) / (yhi - ylo)); };

    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path.string());

    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail_svg::num(width)
        << "\" height=\"" << detail_svg::num(height) << "\" viewBox=\"0 0 "
        << detail_svg::num(width) << " " << detail_svg::num(height) << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

    // axes
    out << "<line x1=\"" << detail_svg::num(ml) << "\" y1=\"" << detail_svg::num(mt + ph)
        << "\" x2=\"" << detail_svg::num(ml + pw) << "\" y2=\"" << detail_svg::num(mt + ph)
        << "\" stroke=\"black\" stroke-width=\"1\"/>\n"
        << "<line x1=\"" << detail_svg::num(ml) << "\" y1=\"" << detail_svg::num(mt) << "\" x2=\""
        << detail_svg::num(ml) << "\" y2=\"" << detail_svg::num(mt + ph)
        << "\" stroke=\"black\" stroke-width=\"1\"/>\n";

    // ticks
    for (int k = 0; k <= 4; ++k) {
        const double fx = xr.lo + (xr.hi - xr.lo) * k / 4.0;
        const double px = sx(fx);
        out << "<line x1=\"" << detail_svg::num(px) << "\" y1=\"" << detail_svg::num(mt + ph)
            << "\" x2=\"" << detail_svg::num(px) << "\" y2=\"" << detail_svg::num(mt + ph + 5)
            << "\" stroke=\"black\" stroke-width=\"1\"/>\n"
            << "<text x=\"" << detail_svg::num(px) << "\" y=\"" << detail_svg::num(mt + ph + 20)
            << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">"
            << detail_svg::num(fx) << "</text>\n";
        const double fy = ylo + (yhi - ylo) * k / 4.0;
        const double py = sy(fy);
        out << "<line x1=\"" << detail_svg::num(ml - 5) << "\" y1=\"" << detail_svg::num(py)
            << "\" x2=\"" << detail_svg::num(ml) << "\" y2=\"" << detail_svg::num(py)
            << "\" stroke=\"black\" stroke-width=\"1\"/>\n"
            << "<text x=\"" << detail_svg::num(ml - 8) << "\" y=\"" << detail_svg::num(py + 4)
            << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">"
            << detail_svg::num(fy) << "</text>\n";
    }

    // axis titles
    out << "<text x=\"" << detail_svg::num(ml + pw / 2) << "\" y=\""
        << detail_svg::num(height - 8)
        << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">t</text>\n"
        << "<text x=\"" << detail_svg::num(14) << "\" y=\"" << detail_svg::num(mt + ph / 2)
        << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" "
           "transform=\"rotate(-90 14 "
        << detail_svg::num(mt + ph / 2) << ")\">" << series.statistic_name << "</text>\n";

    // +/- std band (skipped entirely when it would collapse onto the line)
    if (any_std) {
        out << "<path d=\"M";
        for (std::size_t i = 0; i < series.axis.size(); ++i)
            out << (i == 0 ? "" : " L") << detail_svg::num(sx(series.axis[i])) << " "
                << detail_svg::num(sy(series.mean[i] + series.std_dev[i]));
        for (std::size_t i = series.axis.size(); i-- > 0;)
            out << " L" << detail_svg::num(sx(series.axis[i])) << " "
                << detail_svg::num(sy(series.mean[i] - series.std_dev[i]));
        out << " Z\" fill=\"#4a7ab5\" fill-opacity=\"0.25\" stroke=\"none\"/>\n";
    }

    // mean line
    out << "<polyline fill=\"none\" stroke=\"#1f4e8c\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series.axis.size(); ++i)
        out << (i == 0 ? "" : " ") << detail_svg::num(sx(series.axis[i])) << ","
            << detail_svg::num(sy(series.mean[i]));
    out << "\"/>\n</svg>\n";
    if (!out) throw FormatError("write failed: " + path.string());
}

} // namespace flowscope
