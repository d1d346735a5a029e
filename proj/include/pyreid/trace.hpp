#pragma once

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pyreid/scheduler.hpp"

namespace pyreid {

struct TraceRow {
    std::size_t tau = 0;
    Phase phase = Phase::id_only;
    std::optional<double> l_id, l_tp, k_id, k_tp;
    double p_id = 1.0, p_tp = 1.0, fl_id = 0.0, fl_tp = 0.0;
    double lr = 0.0;

    bool operator==(const TraceRow&) const = default;
};

inline constexpr std::string_view kTraceHeader = "tau,phase,L_id,L_tp,k_id,k_tp,p_id,p_tp,FL_id,FL_tp,lr";

namespace detail {
inline void put_num(std::ostream& os, double v) { os << v; }
inline void put_opt(std::ostream& os, const std::optional<double>& v) {
    if (v) os << *v;
}
} // namespace detail

inline std::string trace_csv(const std::vector<TraceRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << kTraceHeader << '\n';
    for (const auto& r : rows) {
        os << r.tau << ',' << phase_name(r.phase) << ',';
        detail::put_opt(os, r.l_id);
        os << ',';
        detail::put_opt(os, r.l_tp);
        os << ',';
        detail::put_opt(os, r.k_id);
        os << ',';
        detail::put_opt(os, r.k_tp);
        os << ',' << r.p_id << ',' << r.p_tp << ',' << r.fl_id << ',' << r.fl_tp << ',' << r.lr << '\n';
    }
    return os.str();
}

inline void write_trace(const std::vector<TraceRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    if (!f) throw FormatError("trace: cannot write '" + path + "'");
    f << trace_csv(rows);
}

inline std::vector<TraceRow> parse_trace(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("trace: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kTraceHeader) throw FormatError("trace: row 1: unexpected header");
    std::vector<TraceRow> rows;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                f.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        f.push_back(cur);
        const std::string where = "trace: row " + std::to_string(row) + ": ";
        if (f.size() != 11) throw FormatError(where + "expected 11 fields, got " + std::to_string(f.size()));
        auto num = [&](const std::string& s, const char* col) {
            try {
                std::size_t used = 0;
                const double v = std::stod(s, &used);
                if (used != s.size()) throw std::invalid_argument(s);
                return v;
            } catch (const std::exception&) {
                throw FormatError(where + "bad value '" + s + "' in column " + col);
            }
        };
        auto opt = [&](const std::string& s, const char* col) -> std::optional<double> {
            if (s.empty()) return std::nullopt;
            return num(s, col);
        };
        TraceRow r;
        const double tau = num(f[0], "tau");
        if (tau < 1 || tau != std::floor(tau)) throw FormatError(where + "tau must be a positive integer");
        r.tau = static_cast<std::size_t>(tau);
        try {
            r.phase = parse_phase(f[1]);
        } catch (const FormatError&) {
            throw FormatError(where + "unknown phase '" + f[1] + "'");
        }
        r.l_id = opt(f[2], "L_id");
        r.l_tp = opt(f[3], "L_tp");
        r.k_id = opt(f[4], "k_id");
        r.k_tp = opt(f[5], "k_tp");
        r.p_id = num(f[6], "p_id");
        r.p_tp = num(f[7], "p_tp");
        r.fl_id = num(f[8], "FL_id");
        r.fl_tp = num(f[9], "FL_tp");
        r.lr = num(f[10], "lr");
        rows.push_back(r);
    }
    return rows;
}

inline std::vector<TraceRow> read_trace(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("trace: cannot open '" + path + "'");
    return parse_trace(f);
}

} // namespace pyreid
