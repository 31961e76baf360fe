#pragma once

// Run configuration files. INI syntax: `[section]` headers and `key = value`
// lines, `;` or `#` comments. Unknown sections and keys are rejected.
//
//   [data]        path                       (JSONL dataset; omit to generate)
//   [scenario]    n_samples
//   [regime_K]    start_fraction, mean_offset (one value or one per variable),
//                 ar_coef, noise_scale, missing_rate; K = 0, 1, ...
//   [grid]        lookback_slots, forecast_slots, n_vars, lookback_span, forecast_span
//   [split]       train, valid
//   [forecaster]  kind (linear_grid | locf), checkpoint, max_epochs, patience,
//                 batch_size, lr
//   [ue]          checkpoint, hidden, max_epochs, patience, batch_size, lr
//   [engine]      mode, trigger_probability, inner_steps, batch_size,
//                 lr_reliable, lr_unreliable, lr_ue, alpha_alloc, kappa_alloc,
//                 alpha_trig, kappa_trig, loss_norm, input_cali, range_mode,
//                 ue_target, ue_noise_variance, noise_first_batch, noise_batches
//   [run]         seeds (comma separated), out
//
// Checkpoint paths may contain `{seed}`, replaced by the seed being run.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "undercali/engine.hpp"
#include "undercali/error.hpp"
#include "undercali/pipeline.hpp"
#include "undercali/shiftgen.hpp"

namespace undercali::cli {

struct RunConfig {
    std::string data_path;
    std::size_t n_samples = 600;
    std::vector<Regime> regimes;
    GridSpec grid{16, 4, 4, 16.0, 4.0};
    SplitRatios split;
    std::string forecaster_kind = "linear_grid";
    std::string forecaster_checkpoint;
    TrainConfig forecaster_train;
    std::string ue_checkpoint;
    std::vector<Eigen::Index> ue_hidden{64, 64};
    UeTrainConfig ue_train;
    EngineConfig engine;
    std::vector<std::uint64_t> seeds{1};
    std::string out_dir = "out";

    bool operator==(const RunConfig&) const = default;

    ShiftScenario scenario(std::uint64_t seed) const {
        ShiftScenario s;
        s.n_vars = grid.n_vars;
        s.n_samples = n_samples;
        s.grid = grid;
        s.regimes = regimes;
        s.seed = seed;
        return s;
    }

    void check() const {
        grid.check();
        if (data_path.empty()) scenario(0).check();
        if (forecaster_kind != "linear_grid" && forecaster_kind != "locf") {
            throw ConfigError("unknown forecaster kind '" + forecaster_kind + "'");
        }
        if (seeds.empty()) throw ConfigError("at least one seed is required");
        engine.check();
    }
};

inline std::string substitute_seed(std::string path, std::uint64_t seed) {
    const std::string key = "{seed}";
    for (auto pos = path.find(key); pos != std::string::npos; pos = path.find(key)) {
        path.replace(pos, key.size(), std::to_string(seed));
    }
    return path;
}

// ---------------------------------------------------------------------------
// Enum spellings

inline std::string to_string(LossNorm v) { return v == LossNorm::raw ? "raw" : "per_obs"; }
inline std::string to_string(InputCali v) { return v == InputCali::full_grad ? "full_grad" : "frozen"; }
inline std::string to_string(RangeMode v) { return v == RangeMode::frozen ? "frozen" : "expanding"; }
inline std::string to_string(UeTarget v) {
    return v == UeTarget::pre_update ? "pre_update" : "post_update";
}

template <typename E>
E enum_from_string(const std::string& s, std::initializer_list<E> options, const std::string& what) {
    for (E e : options) {
        if (to_string(e) == s) return e;
    }
    throw ConfigError("unknown " + what + " '" + s + "'");
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

using boost::property_tree::ptree;

class Section {
public:
    Section(const ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

    bool has(const std::string& key) {
        used_.insert(key);
        return tree_ && tree_->find(key) != tree_->not_found();
    }

    std::string str(const std::string& key, const std::string& fallback) {
        return has(key) ? tree_->get<std::string>(key) : fallback;
    }

    double real(const std::string& key, double fallback) {
        if (!has(key)) return fallback;
        const std::string raw = tree_->get<std::string>(key);
        try {
            std::size_t used = 0;
            const double v = std::stod(raw, &used);
            if (used != raw.size()) throw std::invalid_argument(raw);
            return v;
        } catch (const std::exception&) {
            throw ConfigError(where(key) + "expected a number, got '" + raw + "'");
        }
    }

    std::uint64_t integer(const std::string& key, std::uint64_t fallback) {
        if (!has(key)) return fallback;
        return parse_uint(tree_->get<std::string>(key), key);
    }

    std::vector<double> reals(const std::string& key, const std::vector<double>& fallback) {
        if (!has(key)) return fallback;
        std::vector<double> out;
        for (const auto& tok : split(tree_->get<std::string>(key))) {
            try {
                std::size_t used = 0;
                out.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw ConfigError(where(key) + "expected numbers, got '" + tok + "'");
            }
        }
        return out;
    }

    std::vector<std::uint64_t> integers(const std::string& key,
                                        const std::vector<std::uint64_t>& fallback) {
        if (!has(key)) return fallback;
        std::vector<std::uint64_t> out;
        for (const auto& tok : split(tree_->get<std::string>(key))) out.push_back(parse_uint(tok, key));
        return out;
    }

    void reject_unknown() const {
        if (!tree_) return;
        for (const auto& [key, _] : *tree_) {
            if (!used_.count(key)) throw ConfigError("[" + name_ + "] unknown key '" + key + "'");
        }
    }

    std::string where(const std::string& key) const { return "[" + name_ + "] " + key + ": "; }

private:
    static std::vector<std::string> split(const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            const auto b = tok.find_first_not_of(" \t");
            const auto e = tok.find_last_not_of(" \t");
            if (b != std::string::npos) out.push_back(tok.substr(b, e - b + 1));
        }
        return out;
    }

    std::uint64_t parse_uint(const std::string& raw, const std::string& key) const {
        if (raw.empty() || raw.find_first_not_of("0123456789") != std::string::npos) {
            throw ConfigError(where(key) + "expected a non-negative integer, got '" + raw + "'");
        }
        try {
            return std::stoull(raw);
        } catch (const std::exception&) {
            throw ConfigError(where(key) + "integer out of range: '" + raw + "'");
        }
    }

    const ptree* tree_;
    std::string name_;
    std::set<std::string> used_;
};

}  // namespace detail

inline RunConfig parse_config(std::istream& in) {
    using detail::ptree;
    ptree root;
    try {
        boost::property_tree::ini_parser::read_ini(in, root);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config syntax: ") + e.what());
    }

    std::set<std::string> known{"data", "scenario", "grid",  "split", "forecaster",
                                "ue",   "engine",   "run"};
    std::size_t n_regimes = 0;
    while (root.find("regime_" + std::to_string(n_regimes)) != root.not_found()) ++n_regimes;
    for (const auto& [name, tree] : root) {
        if (tree.empty() && !tree.data().empty()) {
            throw ConfigError("key '" + name + "' outside any section");
        }
        if (!known.count(name) && !(name.rfind("regime_", 0) == 0 &&
                                    name.find_first_not_of("0123456789", 7) == std::string::npos &&
                                    std::stoull(name.substr(7)) < n_regimes)) {
            throw ConfigError("unknown section [" + name + "]");
        }
    }
    auto section = [&](const std::string& name) {
        const auto it = root.find(name);
        return detail::Section(it == root.not_found() ? nullptr : &it->second, name);
    };

    RunConfig c;
    {
        auto s = section("data");
        c.data_path = s.str("path", "");
        s.reject_unknown();
    }
    {
        auto s = section("grid");
        c.grid.lookback_slots = s.integer("lookback_slots", c.grid.lookback_slots);
        c.grid.forecast_slots = s.integer("forecast_slots", c.grid.forecast_slots);
        c.grid.n_vars = s.integer("n_vars", c.grid.n_vars);
        c.grid.lookback_span = s.real("lookback_span", c.grid.lookback_span);
        c.grid.forecast_span = s.real("forecast_span", c.grid.forecast_span);
        s.reject_unknown();
    }
    {
        auto s = section("scenario");
        c.n_samples = s.integer("n_samples", c.n_samples);
        s.reject_unknown();
    }
    for (std::size_t k = 0; k < n_regimes; ++k) {
        auto s = section("regime_" + std::to_string(k));
        Regime g;
        g.start_fraction = s.real("start_fraction", g.start_fraction);
        g.mean_offset = s.reals("mean_offset", {0.0});
        g.ar_coef = s.real("ar_coef", g.ar_coef);
        g.noise_scale = s.real("noise_scale", g.noise_scale);
        g.missing_rate = s.real("missing_rate", g.missing_rate);
        s.reject_unknown();
        c.regimes.push_back(std::move(g));
    }
    {
        auto s = section("split");
        c.split.train = s.real("train", c.split.train);
        c.split.valid = s.real("valid", c.split.valid);
        s.reject_unknown();
    }
    {
        auto s = section("forecaster");
        c.forecaster_kind = s.str("kind", c.forecaster_kind);
        c.forecaster_checkpoint = s.str("checkpoint", "");
        auto& t = c.forecaster_train;
        t.max_epochs = s.integer("max_epochs", t.max_epochs);
        t.patience = s.integer("patience", t.patience);
        t.batch_size = s.integer("batch_size", t.batch_size);
        t.lr = s.real("lr", t.lr);
        s.reject_unknown();
    }
    {
        auto s = section("ue");
        c.ue_checkpoint = s.str("checkpoint", "");
        const auto hidden = s.integers("hidden", {64, 64});
        c.ue_hidden.assign(hidden.begin(), hidden.end());
        auto& t = c.ue_train;
        t.max_epochs = s.integer("max_epochs", t.max_epochs);
        t.patience = s.integer("patience", t.patience);
        t.batch_size = s.integer("batch_size", t.batch_size);
        t.lr = s.real("lr", t.lr);
        s.reject_unknown();
    }
    {
        auto s = section("engine");
        auto& e = c.engine;
        e.mode = mode_from_string(s.str("mode", undercali::to_string(e.mode)));
        e.trigger_probability = s.real("trigger_probability", e.trigger_probability);
        e.inner_steps = s.integer("inner_steps", e.inner_steps);
        e.batch_size = s.integer("batch_size", e.batch_size);
        e.lr_reliable = s.real("lr_reliable", e.lr_reliable);
        e.lr_unreliable = s.real("lr_unreliable", e.lr_unreliable);
        e.lr_ue = s.real("lr_ue", e.lr_ue);
        e.arm.alpha_alloc = s.real("alpha_alloc", e.arm.alpha_alloc);
        e.arm.kappa_alloc = s.real("kappa_alloc", e.arm.kappa_alloc);
        e.arm.alpha_trig = s.real("alpha_trig", e.arm.alpha_trig);
        e.arm.kappa_trig = s.real("kappa_trig", e.arm.kappa_trig);
        e.loss_norm = enum_from_string(s.str("loss_norm", to_string(e.loss_norm)),
                                       {LossNorm::raw, LossNorm::per_obs}, "loss_norm");
        e.input_cali = enum_from_string(s.str("input_cali", to_string(e.input_cali)),
                                        {InputCali::full_grad, InputCali::frozen}, "input_cali");
        e.range_mode = enum_from_string(s.str("range_mode", to_string(e.range_mode)),
                                        {RangeMode::frozen, RangeMode::expanding}, "range_mode");
        e.ue_target = enum_from_string(s.str("ue_target", to_string(e.ue_target)),
                                       {UeTarget::pre_update, UeTarget::post_update}, "ue_target");
        e.ue_noise_variance = s.real("ue_noise_variance", e.ue_noise_variance);
        e.noise_first_batch = s.integer("noise_first_batch", e.noise_first_batch);
        e.noise_batches = s.integer("noise_batches", e.noise_batches);
        s.reject_unknown();
    }
    {
        auto s = section("run");
        c.seeds = s.integers("seeds", c.seeds);
        c.out_dir = s.str("out", c.out_dir);
        s.reject_unknown();
    }
    if (c.regimes.empty()) {
        Regime g;
        g.mean_offset = {0.0};
        c.regimes.push_back(g);
    }
    c.check();
    return c;
}

inline RunConfig parse_config_string(const std::string& text) {
    std::istringstream in(text);
    return parse_config(in);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    return parse_config(in);
}

// ---------------------------------------------------------------------------
// Canonical serialization

inline std::string to_ini(const RunConfig& c) {
    std::ostringstream os;
    auto num = [](double v) { return format_double(v); };
    auto list = [](const auto& xs, auto fmt) {
        std::string s;
        for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + fmt(xs[i]);
        return s;
    };
    if (!c.data_path.empty()) os << "[data]\npath = " << c.data_path << "\n\n";
    os << "[scenario]\nn_samples = " << c.n_samples << "\n\n";
    for (std::size_t k = 0; k < c.regimes.size(); ++k) {
        const auto& g = c.regimes[k];
        os << "[regime_" << k << "]\n"
           << "start_fraction = " << num(g.start_fraction) << "\n"
           << "mean_offset = " << list(g.mean_offset, num) << "\n"
           << "ar_coef = " << num(g.ar_coef) << "\n"
           << "noise_scale = " << num(g.noise_scale) << "\n"
           << "missing_rate = " << num(g.missing_rate) << "\n\n";
    }
    os << "[grid]\nlookback_slots = " << c.grid.lookback_slots
       << "\nforecast_slots = " << c.grid.forecast_slots << "\nn_vars = " << c.grid.n_vars
       << "\nlookback_span = " << num(c.grid.lookback_span)
       << "\nforecast_span = " << num(c.grid.forecast_span) << "\n\n";
    os << "[split]\ntrain = " << num(c.split.train) << "\nvalid = " << num(c.split.valid) << "\n\n";
    os << "[forecaster]\nkind = " << c.forecaster_kind << "\n";
    if (!c.forecaster_checkpoint.empty()) os << "checkpoint = " << c.forecaster_checkpoint << "\n";
    os << "max_epochs = " << c.forecaster_train.max_epochs
       << "\npatience = " << c.forecaster_train.patience
       << "\nbatch_size = " << c.forecaster_train.batch_size
       << "\nlr = " << num(c.forecaster_train.lr) << "\n\n";
    os << "[ue]\n";
    if (!c.ue_checkpoint.empty()) os << "checkpoint = " << c.ue_checkpoint << "\n";
    os << "hidden = " << list(c.ue_hidden, [](Eigen::Index v) { return std::to_string(v); })
       << "\nmax_epochs = " << c.ue_train.max_epochs << "\npatience = " << c.ue_train.patience
       << "\nbatch_size = " << c.ue_train.batch_size << "\nlr = " << num(c.ue_train.lr) << "\n\n";
    const auto& e = c.engine;
    os << "[engine]\nmode = " << undercali::to_string(e.mode)
       << "\ntrigger_probability = " << num(e.trigger_probability)
       << "\ninner_steps = " << e.inner_steps << "\nbatch_size = " << e.batch_size
       << "\nlr_reliable = " << num(e.lr_reliable) << "\nlr_unreliable = " << num(e.lr_unreliable)
       << "\nlr_ue = " << num(e.lr_ue) << "\nalpha_alloc = " << num(e.arm.alpha_alloc)
       << "\nkappa_alloc = " << num(e.arm.kappa_alloc) << "\nalpha_trig = " << num(e.arm.alpha_trig)
       << "\nkappa_trig = " << num(e.arm.kappa_trig) << "\nloss_norm = " << to_string(e.loss_norm)
       << "\ninput_cali = " << to_string(e.input_cali) << "\nrange_mode = " << to_string(e.range_mode)
       << "\nue_target = " << to_string(e.ue_target)
       << "\nue_noise_variance = " << num(e.ue_noise_variance)
       << "\nnoise_first_batch = " << e.noise_first_batch << "\nnoise_batches = " << e.noise_batches
       << "\n\n";
    os << "[run]\nseeds = " << list(c.seeds, [](std::uint64_t v) { return std::to_string(v); })
       << "\nout = " << c.out_dir << "\n";
    return os.str();
}

}  // namespace undercali::cli
