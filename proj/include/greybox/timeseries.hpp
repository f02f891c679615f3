#pragma once

// Named signal tables, CSV I/O, downsampling and per-signal normalisation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "greybox/rnn.hpp"

namespace greybox {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TimeSeries {
    std::vector<std::string> names;
    SignalMatrix data;  // rows = samples, cols = names

    std::size_t length() const { return data.rows; }

    std::size_t index_of(const std::string& name) const {
        auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw DataError("missing column '" + name + "'");
        return static_cast<std::size_t>(it - names.begin());
    }

    bool has(const std::string& name) const { return std::find(names.begin(), names.end(), name) != names.end(); }

    std::vector<double> column(const std::string& name) const {
        const auto c = index_of(name);
        std::vector<double> out(data.rows);
        for (std::size_t t = 0; t < data.rows; ++t) out[t] = data(t, c);
        return out;
    }

    /// Columns in the given order, as a fresh matrix.
    SignalMatrix select(const std::vector<std::string>& cols) const {
        SignalMatrix out(data.rows, cols.size());
        for (std::size_t k = 0; k < cols.size(); ++k) {
            const auto c = index_of(cols[k]);
            for (std::size_t t = 0; t < data.rows; ++t) out(t, k) = data(t, c);
        }
        return out;
    }

    void add_column(const std::string& name, const std::vector<double>& values) {
        if (has(name)) throw DataError("duplicate column '" + name + "'");
        if (!names.empty() && values.size() != data.rows) throw DataError("column '" + name + "' has wrong length");
        SignalMatrix next(values.size(), data.cols + 1);
        for (std::size_t t = 0; t < next.rows; ++t) {
            for (std::size_t c = 0; c < data.cols; ++c) next(t, c) = data(t, c);
            next(t, data.cols) = values[t];
        }
        names.push_back(name);
        data = std::move(next);
    }

    bool operator==(const TimeSeries&) const = default;
};

inline TimeSeries parse_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    TimeSeries ts;
    std::size_t line_no = 0;
    std::vector<double> values;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (detail::trim(line).empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(std::string(detail::trim(cell)));
        if (line.back() == ',') cells.emplace_back();
        if (ts.names.empty()) {
            ts.names = cells;
            for (const auto& n : ts.names) {
                if (n.empty()) throw DataError("empty column name in CSV header");
            }
            continue;
        }
        if (cells.size() != ts.names.size()) {
            throw DataError("ragged row at line " + std::to_string(line_no) + ": expected " +
                            std::to_string(ts.names.size()) + " fields, got " + std::to_string(cells.size()));
        }
        for (const auto& c : cells) {
            try {
                values.push_back(detail::parse_double(c));
            } catch (const WeightsError&) {
                throw DataError("malformed number '" + c + "' at line " + std::to_string(line_no));
            }
        }
    }
    if (ts.names.empty()) throw DataError("CSV has no header");
    ts.data.cols = ts.names.size();
    ts.data.rows = values.size() / ts.names.size();
    ts.data.data = std::move(values);
    return ts;
}

inline std::string to_csv(const TimeSeries& ts) {
    std::string out;
    for (std::size_t c = 0; c < ts.names.size(); ++c) out += (c ? "," : "") + ts.names[c];
    out += '\n';
    for (std::size_t t = 0; t < ts.data.rows; ++t) {
        for (std::size_t c = 0; c < ts.data.cols; ++c) {
            if (c) out += ',';
            out += detail::format_double(ts.data(t, c));
        }
        out += '\n';
    }
    return out;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << text;
    if (!out) throw DataError("write to '" + path + "' failed");
}

enum class DownsampleMode { stride, mean };

/// Keeps floor(N / factor) samples: the first of every block (stride) or the
/// block average (mean).
inline TimeSeries downsample(const TimeSeries& ts, std::size_t factor, DownsampleMode mode = DownsampleMode::stride) {
    if (factor == 0) throw std::invalid_argument("downsampling factor must be positive");
    TimeSeries out;
    out.names = ts.names;
    const auto n = ts.length() / factor;
    out.data = SignalMatrix(n, ts.data.cols);
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t c = 0; c < ts.data.cols; ++c) {
            if (mode == DownsampleMode::stride) {
                out.data(k, c) = ts.data(k * factor, c);
            } else {
                double s = 0.0;
                for (std::size_t i = 0; i < factor; ++i) s += ts.data(k * factor + i, c);
                out.data(k, c) = s / static_cast<double>(factor);
            }
        }
    }
    return out;
}

enum class NormalizationMode { minmax, zscore };

/// Per-signal affine map z = scale * x + offset.
struct Normalization {
    NormalizationMode mode = NormalizationMode::minmax;
    std::vector<std::string> names;
    std::vector<double> scale;
    std::vector<double> offset;
    std::vector<bool> constant;  // zero spread in the fitting data: scale 1, offset -c

    std::size_t index_of(const std::string& name) const {
        auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw DataError("no normalisation for signal '" + name + "'");
        return static_cast<std::size_t>(it - names.begin());
    }

    double apply(const std::string& name, double x) const {
        const auto i = index_of(name);
        return scale[i] * x + offset[i];
    }

    double invert(const std::string& name, double z) const {
        const auto i = index_of(name);
        return (z - offset[i]) / scale[i];
    }

    bool operator==(const Normalization&) const = default;
};

inline Normalization fit_normalization(const TimeSeries& ts, NormalizationMode mode = NormalizationMode::minmax) {
    if (ts.length() == 0) throw DataError("cannot fit normalisation on empty data");
    Normalization out;
    out.mode = mode;
    out.names = ts.names;
    for (std::size_t c = 0; c < ts.data.cols; ++c) {
        double lo = ts.data(0, c), hi = lo, sum = 0.0;
        for (std::size_t t = 0; t < ts.length(); ++t) {
            lo = std::min(lo, ts.data(t, c));
            hi = std::max(hi, ts.data(t, c));
            sum += ts.data(t, c);
        }
        const double mean = sum / static_cast<double>(ts.length());
        if (hi == lo) {
            out.scale.push_back(1.0);
            out.offset.push_back(-lo);
            out.constant.push_back(true);
            continue;
        }
        double s;
        double shift;
        if (mode == NormalizationMode::minmax) {
            s = 1.0 / (hi - lo);
            shift = lo;
        } else {
            double ss = 0.0;
            for (std::size_t t = 0; t < ts.length(); ++t) ss += (ts.data(t, c) - mean) * (ts.data(t, c) - mean);
            s = 1.0 / std::sqrt(ss / static_cast<double>(ts.length()));
            shift = mean;
        }
        out.scale.push_back(s);
        out.offset.push_back(-shift * s);
        out.constant.push_back(false);
    }
    return out;
}

inline TimeSeries normalize(const TimeSeries& ts, const Normalization& n) {
    TimeSeries out = ts;
    for (std::size_t c = 0; c < ts.data.cols; ++c) {
        const auto i = n.index_of(ts.names[c]);
        for (std::size_t t = 0; t < ts.length(); ++t) out.data(t, c) = n.scale[i] * ts.data(t, c) + n.offset[i];
    }
    return out;
}

inline TimeSeries denormalize(const TimeSeries& ts, const Normalization& n) {
    TimeSeries out = ts;
    for (std::size_t c = 0; c < ts.data.cols; ++c) {
        const auto i = n.index_of(ts.names[c]);
        for (std::size_t t = 0; t < ts.length(); ++t) out.data(t, c) = (ts.data(t, c) - n.offset[i]) / n.scale[i];
    }
    return out;
}

inline std::string save_normalization(const Normalization& n) {
    std::string out = "normalization 1\nmode ";
    out += n.mode == NormalizationMode::minmax ? "minmax" : "zscore";
    out += '\n';
    for (std::size_t i = 0; i < n.names.size(); ++i) {
        out += n.names[i] + ' ' + detail::format_double(n.scale[i]) + ' ' + detail::format_double(n.offset[i]) +
               (n.constant[i] ? " constant" : "") + '\n';
    }
    return out;
}

inline Normalization load_normalization(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    Normalization out;
    if (!std::getline(in, line) || detail::trim(line) != "normalization 1") throw DataError("not a normalisation file");
    if (!std::getline(in, line)) throw DataError("normalisation file lacks mode");
    auto mode = detail::split_ws(line);
    if (mode.size() != 2 || mode[0] != "mode" || (mode[1] != "minmax" && mode[1] != "zscore")) {
        throw DataError("malformed normalisation mode");
    }
    out.mode = mode[1] == "minmax" ? NormalizationMode::minmax : NormalizationMode::zscore;
    while (std::getline(in, line)) {
        auto tok = detail::split_ws(line);
        if (tok.empty()) continue;
        if (tok.size() < 3 || tok.size() > 4 || (tok.size() == 4 && tok[3] != "constant")) {
            throw DataError("malformed normalisation line '" + line + "'");
        }
        out.names.push_back(tok[0]);
        out.scale.push_back(detail::parse_double(tok[1]));
        out.offset.push_back(detail::parse_double(tok[2]));
        out.constant.push_back(tok.size() == 4);
    }
    return out;
}

}  // namespace greybox
