#pragma once

// JSON-Lines dataset format, one sample per line:
//   {"t": [f64...], "v": [[f64|null ...] ...], "split": f64}
// "v" is row-major L x C; null marks an unobserved cell.

#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "undercali/imts.hpp"

namespace undercali {

struct DatasetConfig {
    std::optional<std::size_t> n_vars;  // reject samples of another width when set
};

inline ImtsSample sample_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("t") || !j.contains("v") || !j.contains("split")) {
        throw ParseError("record needs keys t, v, split");
    }
    const auto& t = j.at("t");
    const auto& v = j.at("v");
    if (!t.is_array() || !v.is_array()) throw ParseError("t and v must be arrays");
    if (!j.at("split").is_number()) throw ParseError("split must be a number");
    if (t.size() != v.size()) {
        throw StructuralError("t has " + std::to_string(t.size()) + " entries, v has " +
                              std::to_string(v.size()) + " rows");
    }
    ImtsSample s;
    s.split_time = j.at("split").get<double>();
    const auto rows = static_cast<Eigen::Index>(t.size());
    const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(v.at(0).size());
    s.values = Matrix::Zero(rows, cols);
    s.mask = Matrix::Zero(rows, cols);
    for (Eigen::Index l = 0; l < rows; ++l) {
        const auto& tl = t.at(static_cast<std::size_t>(l));
        if (!tl.is_number()) throw ParseError("timestamp is not a number");
        s.timestamps.push_back(tl.get<double>());
        const auto& row = v.at(static_cast<std::size_t>(l));
        if (!row.is_array()) throw ParseError("v row is not an array");
        if (static_cast<Eigen::Index>(row.size()) != cols) {
            throw StructuralError("ragged value matrix");
        }
        for (Eigen::Index c = 0; c < cols; ++c) {
            const auto& cell = row.at(static_cast<std::size_t>(c));
            if (cell.is_null()) continue;
            if (!cell.is_number()) throw ParseError("value is neither number nor null");
            s.values(l, c) = cell.get<double>();
            s.mask(l, c) = 1.0;
        }
    }
    validate(s);
    return s;
}

inline nlohmann::json sample_to_json(const ImtsSample& s) {
    nlohmann::json v = nlohmann::json::array();
    for (Eigen::Index l = 0; l < s.values.rows(); ++l) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < s.values.cols(); ++c) {
            if (s.mask(l, c) == 0.0) {
                row.push_back(nullptr);
            } else {
                row.push_back(s.values(l, c));
            }
        }
        v.push_back(std::move(row));
    }
    nlohmann::json j;
    j["t"] = s.timestamps;
    j["v"] = std::move(v);
    j["split"] = s.split_time;
    return j;
}

inline void write_jsonl_line(std::ostream& os, const ImtsSample& s) {
    os << sample_to_json(s).dump() << '\n';
}

/// Single-consumer stream over a JSONL file; yields samples in file order.
class JsonlReader {
public:
    explicit JsonlReader(std::istream& in, DatasetConfig config = {})
        : in_(&in), config_(config) {}

    std::optional<ImtsSample> next() {
        std::string line;
        while (std::getline(*in_, line)) {
            ++line_no_;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error& e) {
                throw ParseError("line " + std::to_string(line_no_) + ": " + e.what());
            }
            try {
                ImtsSample s = sample_from_json(j);
                if (config_.n_vars && s.n_vars() != *config_.n_vars) {
                    throw StructuralError("expected " + std::to_string(*config_.n_vars) +
                                          " variables");
                }
                return s;
            } catch (const ParseError& e) {
                throw ParseError("line " + std::to_string(line_no_) + ": " + e.what());
            } catch (const StructuralError& e) {
                throw StructuralError("line " + std::to_string(line_no_) + ": " + e.what());
            }
        }
        return std::nullopt;
    }

    std::size_t line_number() const { return line_no_; }

private:
    std::istream* in_;
    DatasetConfig config_;
    std::size_t line_no_ = 0;
};

inline std::vector<ImtsSample> load_jsonl(std::istream& in, DatasetConfig config = {}) {
    JsonlReader reader(in, config);
    std::vector<ImtsSample> out;
    while (auto s = reader.next()) out.push_back(std::move(*s));
    return out;
}

inline std::vector<ImtsSample> load_jsonl(const std::string& path, DatasetConfig config = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open dataset " + path);
    return load_jsonl(in, config);
}

}  // namespace undercali
