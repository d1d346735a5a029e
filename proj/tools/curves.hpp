#pragma once

// Line charts and the phase timeline as PNG, plus the tidy long-format CSV.
// Charts carry no text; series colors are fixed (first series blue, second orange).

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pyreid/trace.hpp"

namespace pyreid::curves {

using Color = std::array<std::uint8_t, 3>;

inline constexpr Color kWhite{255, 255, 255};
inline constexpr Color kAxis{60, 60, 60};
inline constexpr std::array<Color, 2> kSeries{{{31, 119, 180}, {255, 127, 14}}};

class Canvas {
public:
    Canvas(std::size_t w, std::size_t h, Color bg = kWhite) : w_(w), h_(h), px_(w * h * 3) {
        for (std::size_t i = 0; i < w * h; ++i) std::copy(bg.begin(), bg.end(), px_.begin() + 3 * i);
    }

    std::size_t width() const noexcept { return w_; }
    std::size_t height() const noexcept { return h_; }

    void set(long x, long y, Color c) {
        if (x < 0 || y < 0 || x >= static_cast<long>(w_) || y >= static_cast<long>(h_)) return;
        std::copy(c.begin(), c.end(), px_.begin() + 3 * (static_cast<std::size_t>(y) * w_ + static_cast<std::size_t>(x)));
    }

    Color at(std::size_t x, std::size_t y) const {
        const auto* p = &px_[3 * (y * w_ + x)];
        return {p[0], p[1], p[2]};
    }

    void line(long x0, long y0, long x1, long y1, Color c) {
        const long dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
        const long dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
        long err = dx + dy;
        for (;;) {
            set(x0, y0, c);
            if (x0 == x1 && y0 == y1) break;
            const long e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }

    void fill(long x0, long y0, long x1, long y1, Color c) {
        for (long y = y0; y < y1; ++y)
            for (long x = x0; x < x1; ++x) set(x, y, c);
    }

    void write_png(const std::filesystem::path& path) const {
        std::FILE* f = std::fopen(path.string().c_str(), "wb");
        if (!f) throw FormatError("png: cannot open '" + path.string() + "' for writing");
        png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        png_infop info = png ? png_create_info_struct(png) : nullptr;
        if (!png || !info || setjmp(png_jmpbuf(png))) {
            png_destroy_write_struct(&png, &info);
            std::fclose(f);
            throw FormatError("png: encoding failed for '" + path.string() + "'");
        }
        png_init_io(png, f);
        png_set_IHDR(png, info, static_cast<png_uint_32>(w_), static_cast<png_uint_32>(h_), 8, PNG_COLOR_TYPE_RGB,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (std::size_t y = 0; y < h_; ++y)
            png_write_row(png, const_cast<png_bytep>(&px_[3 * y * w_]));
        png_write_end(png, nullptr);
        png_destroy_write_struct(&png, &info);
        std::fclose(f);
    }

private:
    std::size_t w_, h_;
    std::vector<std::uint8_t> px_;
};

struct Series {
    std::string name;
    std::vector<std::optional<double>> y; // one entry per trace row; gaps allowed
};

// Plots series against row index with a shared, padded y range.
inline Canvas line_chart(const std::vector<Series>& series, std::size_t width = 640, std::size_t height = 320) {
    Canvas cv(width, height);
    const long left = 40, right = static_cast<long>(width) - 10, top = 10, bottom = static_cast<long>(height) - 30;
    cv.line(left, top, left, bottom, kAxis);
    cv.line(left, bottom, right, bottom, kAxis);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::size_t n = 0;
    for (const auto& s : series) {
        n = std::max(n, s.y.size());
        for (const auto& v : s.y)
            if (v && std::isfinite(*v)) {
                lo = std::min(lo, *v);
                hi = std::max(hi, *v);
            }
    }
    if (n == 0 || !std::isfinite(lo)) return cv;
    if (hi == lo) {
        hi += 0.5;
        lo -= 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    auto px = [&](std::size_t i) {
        return n == 1 ? left : left + static_cast<long>(std::lround(static_cast<double>(i) * double(right - left) / double(n - 1)));
    };
    auto py = [&](double v) { return bottom - static_cast<long>(std::lround((v - lo) / (hi - lo) * double(bottom - top))); };
    for (std::size_t k = 0; k < series.size(); ++k) {
        const Color c = kSeries[k % kSeries.size()];
        std::optional<std::pair<long, long>> prev;
        for (std::size_t i = 0; i < series[k].y.size(); ++i) {
            const auto& v = series[k].y[i];
            if (!v || !std::isfinite(*v)) {
                prev.reset();
                continue;
            }
            const std::pair<long, long> p{px(i), py(*v)};
            if (prev) cv.line(prev->first, prev->second, p.first, p.second, c);
            else cv.set(p.first, p.second, c);
            prev = p;
        }
    }
    return cv;
}

inline Color phase_color(Phase p) {
    switch (p) {
    case Phase::id_only: return {31, 119, 180};
    case Phase::combined: return {214, 39, 40};
    case Phase::id_only_pk: return {44, 160, 44};
    }
    return kAxis;
}

// One column of `column_width` pixels per trace row.
inline Canvas phase_timeline(const std::vector<TraceRow>& rows, std::size_t column_width = 2, std::size_t height = 24) {
    Canvas cv(std::max<std::size_t>(1, rows.size() * column_width), height);
    for (std::size_t i = 0; i < rows.size(); ++i)
        cv.fill(static_cast<long>(i * column_width), 0, static_cast<long>((i + 1) * column_width),
                static_cast<long>(height), phase_color(rows[i].phase));
    return cv;
}

inline const std::vector<std::string>& quantities() {
    static const std::vector<std::string> q = {"L_id", "L_tp", "k_id", "k_tp", "p_id",
                                               "p_tp", "FL_id", "FL_tp", "lr", "phase"};
    return q;
}

inline std::vector<std::optional<double>> column(const std::vector<TraceRow>& rows, std::string_view q) {
    std::vector<std::optional<double>> out;
    for (const auto& r : rows) {
        if (q == "L_id") out.push_back(r.l_id);
        else if (q == "L_tp") out.push_back(r.l_tp);
        else if (q == "k_id") out.push_back(r.k_id);
        else if (q == "k_tp") out.push_back(r.k_tp);
        else if (q == "p_id") out.push_back(r.p_id);
        else if (q == "p_tp") out.push_back(r.p_tp);
        else if (q == "FL_id") out.push_back(r.fl_id);
        else if (q == "FL_tp") out.push_back(r.fl_tp);
        else if (q == "lr") out.push_back(r.lr);
        else throw FormatError("unknown quantity '" + std::string(q) + "'");
    }
    return out;
}

// Long format: tau,quantity,value; one row per (trace row, quantity).
inline std::string tidy_csv(const std::vector<TraceRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "tau,quantity,value\n";
    for (const auto& r : rows) {
        for (const auto& q : quantities()) {
            os << r.tau << ',' << q << ',';
            if (q == "phase") {
                os << phase_name(r.phase);
            } else {
                const auto v = column({r}, q).front();
                if (v) os << *v;
            }
            os << '\n';
        }
    }
    return os.str();
}

struct ExportSummary {
    std::vector<std::filesystem::path> images;
    std::filesystem::path tidy;
    std::size_t tidy_rows = 0;
};

inline ExportSummary export_curves(const std::vector<TraceRow>& rows, const std::filesystem::path& out) {
    if (rows.empty()) throw FormatError("trace: no rows");
    std::filesystem::create_directories(out);
    ExportSummary s;
    const std::vector<std::pair<std::string, std::vector<std::string>>> charts = {
        {"loss", {"L_id", "L_tp"}}, {"ema", {"k_id", "k_tp"}}, {"p", {"p_id", "p_tp"}},
        {"focal_weight", {"FL_id", "FL_tp"}}, {"lr", {"lr"}}};
    for (const auto& [name, qs] : charts) {
        std::vector<Series> series;
        for (const auto& q : qs) series.push_back({q, column(rows, q)});
        const auto path = out / (name + ".png");
        line_chart(series).write_png(path);
        s.images.push_back(path);
    }
    const auto tl = out / "phase_timeline.png";
    phase_timeline(rows).write_png(tl);
    s.images.push_back(tl);
    s.tidy = out / "tidy.csv";
    std::ofstream(s.tidy, std::ios::binary | std::ios::trunc) << tidy_csv(rows);
    s.tidy_rows = rows.size() * quantities().size();
    return s;
}

} // namespace pyreid::curves
