#pragma once

// Parameter checkpoints as JSON:
//
//   {"format": "undercali-checkpoint", "version": 1,
//    "header": {...component metadata...},
//    "tensors": [{"name": "...", "shape": [rows, cols], "data": [row-major f64...]}]}
//
// Doubles are written in shortest round-trip form, so values reload
// bit-exactly.

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "undercali/diffkit.hpp"
#include "undercali/error.hpp"

namespace undercali {

inline constexpr const char* kCheckpointFormat = "undercali-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Matrix value;
};

struct Checkpoint {
    nlohmann::json header = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    void add(const std::string& name, const Matrix& value) { tensors.push_back({name, value}); }

    void add(const std::vector<const Param*>& params) {
        for (const Param* p : params) add(p->name, p->value);
    }

    const Matrix& get(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return t.value;
        }
        throw StructuralError("checkpoint has no tensor named " + name);
    }

    /// Copy stored values into `params` by name; shapes must agree.
    void restore(const ParamRefs& params) const {
        for (Param* p : params) {
            const Matrix& v = get(p->name);
            if (v.rows() != p->value.rows() || v.cols() != p->value.cols()) {
                throw ShapeError("checkpoint tensor " + p->name + " has the wrong shape");
            }
            p->value = v;
            p->reset_buffers();
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format"] = kCheckpointFormat;
        j["version"] = kCheckpointVersion;
        j["header"] = header;
        nlohmann::json ts = nlohmann::json::array();
        for (const auto& t : tensors) {
            std::vector<double> data;
            data.reserve(static_cast<std::size_t>(t.value.size()));
            for (Eigen::Index r = 0; r < t.value.rows(); ++r) {
                for (Eigen::Index c = 0; c < t.value.cols(); ++c) data.push_back(t.value(r, c));
            }
            ts.push_back({{"name", t.name}, {"shape", {t.value.rows(), t.value.cols()}},
                          {"data", std::move(data)}});
        }
        j["tensors"] = std::move(ts);
        return j;
    }

    static Checkpoint from_json(const nlohmann::json& j) {
        if (j.value("format", "") != kCheckpointFormat) {
            throw ParseError("not an undercali checkpoint");
        }
        if (j.value("version", 0) != kCheckpointVersion) {
            throw ParseError("unsupported checkpoint version");
        }
        Checkpoint ck;
        ck.header = j.at("header");
        for (const auto& t : j.at("tensors")) {
            const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
            const auto data = t.at("data").get<std::vector<double>>();
            if (shape.size() != 2 || shape[0] * shape[1] != static_cast<Eigen::Index>(data.size())) {
                throw StructuralError("tensor " + t.at("name").get<std::string>() +
                                      ": shape does not match data length");
            }
            Matrix m(shape[0], shape[1]);
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                for (Eigen::Index c = 0; c < m.cols(); ++c) {
                    m(r, c) = data[static_cast<std::size_t>(r * m.cols() + c)];
                }
            }
            ck.tensors.push_back({t.at("name").get<std::string>(), std::move(m)});
        }
        return ck;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw ConfigError("cannot write checkpoint " + path);
        out << to_json().dump() << '\n';
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open checkpoint " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("checkpoint " + path + ": " + e.what());
        }
        return from_json(j);
    }
};

}  // namespace undercali
