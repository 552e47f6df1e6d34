#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedinit/errors.hpp"

namespace fedinit {

/// Labeled samples stored row-major. `classes == 0` marks a regression target
/// (or, for quadratic problems, rows that are target points with no label).
struct Dataset {
    std::size_t features = 0;
    std::vector<double> x;
    std::vector<double> y;
    std::size_t classes = 0;

    std::size_t size() const noexcept { return y.size(); }
    std::span<const double> row(std::size_t i) const noexcept {
        return {x.data() + i * features, features};
    }
    std::span<double> row(std::size_t i) noexcept { return {x.data() + i * features, features}; }
    int label(std::size_t i) const noexcept { return static_cast<int>(y[i]); }

    void push_back(std::span<const double> features_row, double target) {
        if (features_row.size() != features)
            throw ConfigError("Dataset::push_back: expected " + std::to_string(features) +
                              " features, got " + std::to_string(features_row.size()));
        x.insert(x.end(), features_row.begin(), features_row.end());
        y.push_back(target);
    }

    Dataset subset(std::span<const std::size_t> rows) const {
        Dataset out;
        out.features = features;
        out.classes = classes;
        out.x.reserve(rows.size() * features);
        out.y.reserve(rows.size());
        for (std::size_t r : rows) out.push_back(row(r), y[r]);
        return out;
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// A mini-batch: a set of rows of one client's dataset.
struct Batch {
    const Dataset* data = nullptr;
    std::span<const std::size_t> rows;
    std::size_t client = 0;

    std::size_t size() const noexcept { return rows.size(); }
    std::span<const double> features(std::size_t j) const noexcept { return data->row(rows[j]); }
    double target(std::size_t j) const noexcept { return data->y[rows[j]]; }
};

/// Index list [0, n) used for full-batch views.
inline std::vector<std::size_t> all_rows(std::size_t n) {
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    return rows;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(trim(line.substr(start, pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

} // namespace detail

/// Reads a comma-separated file with a header row. The `label` column holds
/// integer class ids; every other column is parsed as a 64-bit float.
inline Dataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_csv: cannot open '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw IoError("load_csv: '" + path + "' is empty");
    const auto header = detail::split_commas(line);
    std::size_t label_col = header.size();
    for (std::size_t c = 0; c < header.size(); ++c)
        if (header[c] == "label") label_col = c;
    if (label_col == header.size())
        throw ConfigError("load_csv: '" + path + "' has no 'label' column");

    Dataset data;
    data.features = header.size() - 1;
    std::vector<double> feats(data.features);
    int max_label = -1;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        const auto cells = detail::split_commas(line);
        if (cells.size() != header.size())
            throw ConfigError("load_csv: " + path + ":" + std::to_string(line_no) + ": expected " +
                              std::to_string(header.size()) + " cells, got " +
                              std::to_string(cells.size()));
        std::size_t f = 0;
        double label = 0.0;
        for (std::size_t c = 0; c < cells.size(); ++c) {
            const auto cell = cells[c];
            if (c == label_col) {
                long long v = 0;
                const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
                if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size() || v < 0)
                    throw ConfigError("load_csv: " + path + ":" + std::to_string(line_no) +
                                      ": label '" + std::string(cell) +
                                      "' is not a non-negative integer");
                label = static_cast<double>(v);
                max_label = std::max(max_label, static_cast<int>(v));
            } else {
                double v = 0.0;
                const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
                if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size() || !std::isfinite(v))
                    throw ConfigError("load_csv: " + path + ":" + std::to_string(line_no) +
                                      ": cell '" + std::string(cell) + "' in column '" +
                                      std::string(header[c]) + "' is not a finite number");
                feats[f++] = v;
            }
        }
        data.push_back(feats, label);
    }
    if (data.size() == 0) throw ConfigError("load_csv: '" + path + "' has no data rows");
    data.classes = static_cast<std::size_t>(max_label + 1);
    return data;
}

/// Writes `data` in the format accepted by load_csv (shortest round-trip decimals).
inline void write_csv(const Dataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_csv: cannot open '" + path + "'");
    for (std::size_t f = 0; f < data.features; ++f) out << 'x' << f << ',';
    out << "label\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        for (double v : data.row(i)) out << detail::format_double(v) << ',';
        out << static_cast<long long>(data.y[i]) << '\n';
    }
    if (!out) throw IoError("write_csv: failed writing '" + path + "'");
}

} // namespace fedinit
