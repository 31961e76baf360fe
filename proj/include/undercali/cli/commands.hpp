#pragma once

// Implementations of the command-line subcommands. Each writes its files
// under an output directory and logs a short summary to the given stream.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "undercali/cli/config.hpp"
#include "undercali/engine.hpp"
#include "undercali/gradcheck_suite.hpp"
#include "undercali/jsonl.hpp"
#include "undercali/pipeline.hpp"
#include "undercali/shiftgen.hpp"

namespace undercali::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitCheckFailed = 2;

inline const std::vector<double> kKappaSweep{0.25, 0.75, 2.0, 3.0};

/// --out flag, then UNDERCALI_OUT, then the config's [run] out.
inline fs::path resolve_out_dir(const std::optional<std::string>& flag, const RunConfig& cfg) {
    if (flag && !flag->empty()) return *flag;
    if (const char* env = std::getenv("UNDERCALI_OUT"); env && *env) return env;
    return cfg.out_dir;
}

inline void write_file(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << content;
    if (!out) throw ConfigError("failed writing " + path.string());
}

inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline std::vector<ImtsSample> load_samples(const RunConfig& cfg, std::uint64_t seed) {
    if (!cfg.data_path.empty()) return load_jsonl(cfg.data_path, DatasetConfig{cfg.grid.n_vars});
    return generate(cfg.scenario(seed));
}

inline fs::path default_checkpoint(const fs::path& out, const std::string& what, std::uint64_t seed) {
    return out / (what + "_seed" + std::to_string(seed) + ".json");
}

inline Checkpoint load_checkpoint_checked(const std::string& path, const GridSpec& grid,
                                          const std::string& what) {
    if (!fs::exists(path)) throw ConfigError(what + " checkpoint not found: " + path);
    Checkpoint ck = Checkpoint::load(path);
    if (!ck.header.contains("grid") || !(grid_from_json(ck.header.at("grid")) == grid)) {
        throw ConfigError(what + " checkpoint " + path + " was trained on a different grid");
    }
    return ck;
}

struct SeedSetup {
    DataSplit data;
    ForecasterPtr forecaster;
    std::shared_ptr<UncertaintyEstimator> ue;
    std::vector<MaskedBatch> stream;
};

/// Data, frozen forecaster and pretrained estimator for one seed. Checkpoints
/// named in the config are loaded, then those left by `pretrain` in the output
/// directory; anything still missing is trained here.
inline SeedSetup prepare_seed(const RunConfig& cfg, std::uint64_t seed, const fs::path& out,
                              std::ostream& log) {
    SeedSetup s;
    s.data = split_dataset(grid_all(load_samples(cfg, seed), cfg.grid), cfg.split, seed);
    auto locate = [&](const std::string& named, const std::string& what) -> std::string {
        if (!named.empty()) return substitute_seed(named, seed);
        const fs::path fallback = default_checkpoint(out, what, seed);
        return fs::exists(fallback) ? fallback.string() : std::string();
    };
    const std::string f_path = locate(cfg.forecaster_checkpoint, "forecaster");
    const std::string ue_path = locate(cfg.ue_checkpoint, "ue");

    if (!f_path.empty()) {
        s.forecaster = load_forecaster(load_checkpoint_checked(f_path, cfg.grid, "forecaster"));
        log << "seed " << seed << ": forecaster loaded from " << f_path << "\n";
    } else if (cfg.forecaster_kind == "locf") {
        s.forecaster = std::make_shared<LocfForecaster>(cfg.grid);
    } else {
        auto f = std::make_shared<LinearGridForecaster>(cfg.grid);
        TrainConfig t = cfg.forecaster_train;
        t.seed = seed;
        const auto rep = train_offline(*f, s.data.train, s.data.valid, t);
        log << "seed " << seed << ": forecaster trained for " << rep.epochs_run
            << " epochs, valid mse " << format_double(rep.best_valid_loss) << "\n";
        s.forecaster = f;
    }

    if (!ue_path.empty()) {
        s.ue = std::make_shared<UncertaintyEstimator>(
            UncertaintyEstimator::from_checkpoint(load_checkpoint_checked(ue_path, cfg.grid, "ue")));
        log << "seed " << seed << ": estimator loaded from " << ue_path << "\n";
    } else {
        Rng init = Rng(seed).fork(11);
        s.ue = std::make_shared<UncertaintyEstimator>(cfg.grid, init, cfg.ue_hidden);
        UeTrainConfig t = cfg.ue_train;
        t.seed = seed;
        const auto rep = s.ue->pretrain(*s.forecaster, s.data.train, s.data.valid, t);
        log << "seed " << seed << ": estimator trained for " << rep.epochs_run
            << " epochs, valid L1 " << format_double(rep.best_valid_l1) << "\n";
    }
    s.stream = make_online_batches(s.data.online, cfg.engine.batch_size);
    return s;
}

// ---------------------------------------------------------------------------

inline void cmd_gen_data(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
    for (std::uint64_t seed : cfg.seeds) {
        const ShiftScenario sc = cfg.scenario(seed);
        sc.check();
        std::ostringstream os;
        ShiftGenerator gen(sc);
        while (auto s = gen.next()) write_jsonl_line(os, *s);
        const fs::path path = out / ("data_seed" + std::to_string(seed) + ".jsonl");
        write_file(path, os.str());
        log << "wrote " << sc.n_samples << " samples to " << path.string() << "\n";
    }
}

inline void cmd_pretrain(const std::string& kind, const RunConfig& cfg, const fs::path& out,
                         std::ostream& log) {
    if (kind != "forecaster" && kind != "ue") {
        throw ConfigError("pretrain target must be 'forecaster' or 'ue', got '" + kind + "'");
    }
    for (std::uint64_t seed : cfg.seeds) {
        const DataSplit data =
            split_dataset(grid_all(load_samples(cfg, seed), cfg.grid), cfg.split, seed);
        if (kind == "forecaster") {
            const fs::path path = cfg.forecaster_checkpoint.empty()
                                      ? default_checkpoint(out, "forecaster", seed)
                                      : fs::path(substitute_seed(cfg.forecaster_checkpoint, seed));
            Checkpoint ck;
            if (cfg.forecaster_kind == "locf") {
                ck = LocfForecaster(cfg.grid).checkpoint();
                log << "seed " << seed << ": locf forecaster has no parameters to train\n";
            } else {
                LinearGridForecaster f(cfg.grid);
                TrainConfig t = cfg.forecaster_train;
                t.seed = seed;
                const auto rep = train_offline(f, data.train, data.valid, t);
                log << "seed " << seed << ": " << rep.epochs_run << " epochs (best "
                    << rep.best_epoch << "), valid mse " << format_double(rep.best_valid_loss)
                    << (rep.stopped_early ? ", stopped early" : "") << "\n";
                ck = f.checkpoint();
            }
            if (path.has_parent_path()) fs::create_directories(path.parent_path());
            ck.save(path.string());
            log << "wrote " << path.string() << "\n";
        } else {
            const std::string f_path = cfg.forecaster_checkpoint.empty()
                                           ? default_checkpoint(out, "forecaster", seed).string()
                                           : substitute_seed(cfg.forecaster_checkpoint, seed);
            if (!fs::exists(f_path)) {
                throw ConfigError("estimator pretraining needs a frozen forecaster checkpoint; " +
                                  f_path + " does not exist (run 'pretrain forecaster' first)");
            }
            const ForecasterPtr f = load_forecaster(load_checkpoint_checked(f_path, cfg.grid, "forecaster"));
            Rng init = Rng(seed).fork(11);
            UncertaintyEstimator ue(cfg.grid, init, cfg.ue_hidden);
            UeTrainConfig t = cfg.ue_train;
            t.seed = seed;
            const auto rep = ue.pretrain(*f, data.train, data.valid, t);
            log << "seed " << seed << ": " << rep.epochs_run << " epochs (best " << rep.best_epoch
                << "), valid L1 " << format_double(rep.best_valid_l1)
                << (rep.stopped_early ? ", stopped early" : "") << "\n";
            const fs::path path = cfg.ue_checkpoint.empty()
                                      ? default_checkpoint(out, "ue", seed)
                                      : fs::path(substitute_seed(cfg.ue_checkpoint, seed));
            if (path.has_parent_path()) fs::create_directories(path.parent_path());
            ue.checkpoint().save(path.string());
            log << "wrote " << path.string() << "\n";
        }
    }
}

struct SeedSummary {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation; 0 for a single seed
};

inline SeedSummary summarize(const std::vector<double>& xs) {
    SeedSummary s;
    if (xs.empty()) return s;
    for (double x : xs) s.mean += x;
    s.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return s;
}

inline nlohmann::json aggregate_json(const std::string& mode, const std::vector<RunReport>& runs) {
    std::vector<double> mse, mae, freq;
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto& r : runs) {
        mse.push_back(r.mse());
        mae.push_back(r.mae());
        freq.push_back(r.update_frequency());
        seeds.push_back(r.seed);
    }
    const auto m = summarize(mse), a = summarize(mae), f = summarize(freq);
    return {{"mode", mode},
            {"seeds", seeds},
            {"mse", m.mean},
            {"mse_std", m.std},
            {"mae", a.mean},
            {"mae_std", a.std},
            {"update_frequency", f.mean},
            {"n_batches", runs.empty() ? 0 : runs.front().batches.size()}};
}

/// Writes `<dir>/seed<s>.csv`, `<dir>/seed<s>.json` and `<dir>/aggregate.json`.
inline nlohmann::json write_runs(const fs::path& dir, const std::string& mode,
                                 const std::vector<RunReport>& runs) {
    for (const auto& r : runs) {
        std::ostringstream csv;
        write_batch_csv(csv, r);
        const std::string stem = "seed" + std::to_string(r.seed);
        write_file(dir / (stem + ".csv"), csv.str());
        write_file(dir / (stem + ".json"), dump_json(report_json(r)));
    }
    const nlohmann::json agg = aggregate_json(mode, runs);
    write_file(dir / "aggregate.json", dump_json(agg));
    return agg;
}

inline std::vector<RunReport> cmd_run_online(const RunConfig& cfg, const fs::path& out,
                                             std::ostream& log) {
    std::vector<RunReport> runs;
    for (std::uint64_t seed : cfg.seeds) {
        const SeedSetup s = prepare_seed(cfg, seed, out, log);
        EngineConfig e = cfg.engine;
        e.seed = seed;
        runs.push_back(run_stream(e, s.stream, s.forecaster, *s.ue));
        if (runs.back().forecaster_checksum_before != runs.back().forecaster_checksum_after) {
            throw NumericError("source forecaster parameters changed during the run");
        }
        log << "seed " << seed << ": mse " << format_double(runs.back().mse()) << ", update frequency "
            << format_double(runs.back().update_frequency()) << "\n";
    }
    const std::string mode = undercali::to_string(cfg.engine.mode);
    const auto agg = write_runs(out / mode, mode, runs);
    log << mode << ": mean mse " << format_double(agg.at("mse").get<double>()) << " over "
        << runs.size() << " seed(s); results in " << (out / mode).string() << "\n";
    return runs;
}

/// Order of the ablation table rows.
inline std::vector<Mode> ablation_modes() {
    return {Mode::frozen,
            Mode::full,
            Mode::single_expert_joint,
            Mode::single_expert_reliable,
            Mode::single_expert_unreliable,
            Mode::random_triggering,
            Mode::random_allocating,
            Mode::no_ue_single_joint};
}

inline std::map<std::string, nlohmann::json> cmd_ablate(const RunConfig& cfg, const fs::path& out,
                                                        std::ostream& log) {
    std::map<Mode, std::vector<RunReport>> runs;
    for (std::uint64_t seed : cfg.seeds) {
        const SeedSetup s = prepare_seed(cfg, seed, out, log);
        for (Mode m : ablation_modes()) {
            EngineConfig e = cfg.engine;
            e.mode = m;
            e.seed = seed;
            runs[m].push_back(run_stream(e, s.stream, s.forecaster, *s.ue));
        }
    }
    std::ostringstream table;
    table << "mode,mse,mse_std,mae,mae_std,update_frequency,n_seeds\n";
    std::map<std::string, nlohmann::json> aggs;
    for (Mode m : ablation_modes()) {
        const std::string name = undercali::to_string(m);
        const auto agg = write_runs(out / "ablation" / name, name, runs[m]);
        table << name << ',' << format_double(agg.at("mse").get<double>()) << ','
              << format_double(agg.at("mse_std").get<double>()) << ','
              << format_double(agg.at("mae").get<double>()) << ','
              << format_double(agg.at("mae_std").get<double>()) << ','
              << format_double(agg.at("update_frequency").get<double>()) << ',' << runs[m].size()
              << '\n';
        aggs[name] = agg;
    }
    write_file(out / "ablation.csv", table.str());
    log << table.str();
    return aggs;
}

/// Prints one line per check; returns kExitCheckFailed if any check fails.
inline int cmd_gradcheck(const std::vector<GradCheckCase>& cases, std::ostream& os) {
    bool ok = true;
    for (const auto& o : run_gradchecks(cases)) {
        ok = ok && o.passed;
        os << (o.passed ? "ok   " : "FAIL ") << o.name << ": max rel error "
           << format_double(o.report.max_rel_error) << " over " << o.report.n_coords
           << " coords; worst " << o.report.worst_param << "[" << o.report.worst_index
           << "] analytic " << format_double(o.report.worst_analytic) << " numeric "
           << format_double(o.report.worst_numeric) << "\n";
    }
    return ok ? kExitOk : kExitCheckFailed;
}

// ---------------------------------------------------------------------------
// Report

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw StructuralError("csv has no column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline CsvTable read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw StructuralError(path.string() + ": empty csv");
    t.header = split_csv_line(line);
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto row = split_csv_line(line);
        if (row.size() != t.header.size()) {
            throw StructuralError(path.string() + ": line " + std::to_string(lineno) +
                                  " has the wrong number of cells");
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

inline double parse_cell(const std::string& s) {
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw StructuralError("bad numeric cell '" + s + "'");
    return v;
}

struct ReportSummary {
    std::size_t n_inputs = 0;
    std::size_t n_rows = 0;
    std::vector<double> sweep_frequencies;
};

/// Merges the per-batch CSVs found directly inside each run directory into
/// `<out>/report_long.csv` (one mse row per input row) and replays their
/// recorded score moments through trigger statistics for each kappa_trig in
/// the sweep, written to `<out>/kappa_sweep.csv`.
inline ReportSummary cmd_report(const std::vector<std::string>& run_dirs, double alpha_trig,
                                const fs::path& out, std::ostream& log) {
    std::vector<std::pair<std::string, fs::path>> inputs;
    for (const auto& d : run_dirs) {
        if (!fs::is_directory(d)) throw ConfigError("not a directory: " + d);
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(d)) {
            if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        const std::string tag = fs::path(d).lexically_normal().filename().string().empty()
                                    ? fs::path(d).lexically_normal().parent_path().filename().string()
                                    : fs::path(d).lexically_normal().filename().string();
        for (const auto& f : files) {
            std::ifstream in(f);
            std::string first;
            std::getline(in, first);
            if (first.rfind("batch_index,n_samples,", 0) == 0) {
                inputs.emplace_back(tag + "/" + f.stem().string(), f);
            }
        }
    }
    if (inputs.empty()) throw ConfigError("no per-batch run CSVs found in the given directories");

    ReportSummary summary;
    std::ostringstream merged;
    merged << "batch_index,series,value\n";
    std::vector<std::vector<BatchMoments>> moments;
    for (const auto& [series, path] : inputs) {
        const CsvTable t = read_csv(path);
        const auto c_batch = t.column("batch_index");
        const auto c_mse = t.column("mse");
        const auto c_mean = t.column("mean_uncertainty");
        const auto c_var = t.column("var_uncertainty");
        std::vector<BatchMoments> ms;
        for (const auto& row : t.rows) {
            merged << row[c_batch] << ',' << series << ',' << row[c_mse] << '\n';
            const double m = parse_cell(row[c_mean]);
            const double v = parse_cell(row[c_var]);
            if (std::isfinite(m) && std::isfinite(v)) ms.push_back({m, v});
            ++summary.n_rows;
        }
        moments.push_back(std::move(ms));
    }
    summary.n_inputs = inputs.size();

    std::ostringstream sweep;
    sweep << "kappa_trig,update_frequency,n_batches\n";
    for (double kappa : kKappaSweep) {
        std::size_t fired = 0, total = 0;
        for (const auto& ms : moments) {
            for (bool b : replay_triggers(ms, alpha_trig, kappa)) fired += b ? 1 : 0;
            total += ms.size();
        }
        const double freq = total ? static_cast<double>(fired) / static_cast<double>(total) : 0.0;
        summary.sweep_frequencies.push_back(freq);
        sweep << format_double(kappa) << ',' << format_double(freq) << ',' << total << '\n';
    }
    write_file(out / "report_long.csv", merged.str());
    write_file(out / "kappa_sweep.csv", sweep.str());
    log << "merged " << summary.n_rows << " rows from " << summary.n_inputs << " run(s) into "
        << (out / "report_long.csv").string() << "\n"
        << sweep.str();
    return summary;
}

}  // namespace undercali::cli
