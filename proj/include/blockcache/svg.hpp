#ifndef BLOCKCACHE_SVG_HPP
#define BLOCKCACHE_SVG_HPP

#include <fstream>

#include "blockcache/cachesched.hpp"

namespace bc {

// Cache-lifetime chart: one row per cacheable block, an arrow per interval
// between recomputes.
inline void write_schedule_svg(const std::string& path, const CacheSchedule& sc) {
    std::vector<int64_t> rows;
    for (int64_t b = 0; b < sc.num_blocks(); ++b)
        if (sc.cacheable(sc.block_ids[static_cast<size_t>(b)])) rows.push_back(b);
    int64_t W = 840, row_h = 24, left = 220, top = 40;
    int64_t H = top + static_cast<int64_t>(rows.size()) * row_h + 30;
    double xstep = static_cast<double>(W - left - 30) / static_cast<double>(sc.steps);
    std::ofstream f(path);
    check(f.good(), "svg: cannot open " + path);
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    f << "<style>text{font-family:sans-serif;font-size:11px}</style>\n";
    f << "<text x='10' y='20'>Caching schedule (delta=" << sc.delta << ", policy=" << policy_name(sc.policy)
      << ", " << sc.steps << " steps)</text>\n";
    for (int64_t s = 1; s <= sc.steps; ++s) {
        double x = left + (s - 0.5) * xstep;
        f << "<text x='" << x - 4 << "' y='" << top - 8 << "'>" << s << "</text>\n";
    }
    for (size_t r = 0; r < rows.size(); ++r) {
        int64_t b = rows[r];
        double y = top + static_cast<double>(r) * row_h + row_h * 0.6;
        f << "<text x='10' y='" << y + 4 << "'>" << sc.block_ids[static_cast<size_t>(b)].str() << "</text>\n";
        const auto& rec = sc.recompute[static_cast<size_t>(b)];
        for (size_t i = 0; i < rec.size(); ++i) {
            int64_t start = rec[i];
            int64_t end = (i + 1 < rec.size()) ? rec[i + 1] - 1 : sc.steps;
            double x0 = left + (start - 0.5) * xstep;
            double x1 = left + (end - 0.5) * xstep;
            f << "<circle cx='" << x0 << "' cy='" << y << "' r='3' fill='#1f77b4'/>\n";
            if (end > start)
                f << "<line x1='" << x0 + 4 << "' y1='" << y << "' x2='" << x1 << "' y2='" << y
                  << "' stroke='#1f77b4' stroke-width='2' marker-end='url(#arrow)'/>\n";
        }
    }
    f << "<defs><marker id='arrow' viewBox='0 0 10 10' refX='8' refY='5' markerWidth='5' markerHeight='5' "
         "orient='auto'><path d='M 0 0 L 10 5 L 0 10 z' fill='#1f77b4'/></marker></defs>\n";
    f << "</svg>\n";
}

struct ChartSeries {
    std::string label;
    std::string color;
    std::vector<double> x, y;
};

// Simple line chart with linear axes.
inline void write_line_chart_svg(const std::string& path, const std::string& title,
                                 const std::string& xlabel, const std::vector<ChartSeries>& series) {
    int64_t W = 560, H = 380, left = 60, bottom = 50, top = 40, right = 20;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (xmax <= xmin) xmax = xmin + 1;
    if (ymax <= ymin) ymax = ymin + 1;
    ymin = std::min(ymin, 0.0);
    auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (W - left - right); };
    auto py = [&](double y) { return H - bottom - (y - ymin) / (ymax - ymin) * (H - bottom - top); };
    std::ofstream f(path);
    check(f.good(), "svg: cannot open " + path);
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    f << "<style>text{font-family:sans-serif;font-size:11px}</style>\n";
    f << "<text x='10' y='20'>" << title << "</text>\n";
    f << "<line x1='" << left << "' y1='" << H - bottom << "' x2='" << W - right << "' y2='" << H - bottom
      << "' stroke='black'/>\n";
    f << "<line x1='" << left << "' y1='" << top << "' x2='" << left << "' y2='" << H - bottom
      << "' stroke='black'/>\n";
    f << "<text x='" << (W / 2 - 20) << "' y='" << H - 12 << "'>" << xlabel << "</text>\n";
    for (int i = 0; i <= 4; ++i) {
        double yv = ymin + (ymax - ymin) * i / 4.0;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3g", yv);
        f << "<text x='8' y='" << py(yv) + 4 << "'>" << buf << "</text>\n";
        double xv = xmin + (xmax - xmin) * i / 4.0;
        std::snprintf(buf, sizeof buf, "%.3g", xv);
        f << "<text x='" << px(xv) - 8 << "' y='" << H - bottom + 16 << "'>" << buf << "</text>\n";
    }
    int li = 0;
    for (const auto& s : series) {
        f << "<polyline fill='none' stroke='" << s.color << "' stroke-width='2' points='";
        for (size_t i = 0; i < s.x.size(); ++i) f << px(s.x[i]) << "," << py(s.y[i]) << " ";
        f << "'/>\n";
        for (size_t i = 0; i < s.x.size(); ++i)
            f << "<circle cx='" << px(s.x[i]) << "' cy='" << py(s.y[i]) << "' r='3' fill='" << s.color
              << "'/>\n";
        f << "<text x='" << W - 180 << "' y='" << top + 14 * li << "' fill='" << s.color << "'>" << s.label
          << "</text>\n";
        ++li;
    }
    f << "</svg>\n";
}

}  // namespace bc

#endif
