#pragma once

// Offline preparation shared by the command-line tool and the experiments:
// grid the samples, split them chronologically, pretrain the forecaster and
// the uncertainty estimator, and cut the online part into batches.

#include <memory>
#include <vector>

#include "undercali/engine.hpp"
#include "undercali/forecaster.hpp"
#include "undercali/imts.hpp"
#include "undercali/rng.hpp"
#include "undercali/shiftgen.hpp"
#include "undercali/uncertainty.hpp"

namespace undercali {

struct SplitRatios {
    double train = 0.20;
    double valid = 0.05;

    bool operator==(const SplitRatios&) const = default;
};

struct DataSplit {
    std::vector<GriddedSample> train;
    std::vector<GriddedSample> valid;
    std::vector<GriddedSample> online;
};

/// First `train` fraction for training, the next `valid` fraction for
/// validation, the rest for the online stream. Training and validation sets
/// are shuffled; the online stream keeps its order.
inline DataSplit split_dataset(const std::vector<GriddedSample>& samples, const SplitRatios& r,
                               std::uint64_t seed) {
    if (!(r.train > 0.0) || !(r.valid >= 0.0) || !(r.train + r.valid < 1.0)) {
        throw ConfigError("split ratios must satisfy train > 0, valid >= 0, train + valid < 1");
    }
    const auto n = samples.size();
    const auto n_train = static_cast<std::size_t>(static_cast<double>(n) * r.train);
    const auto n_valid = static_cast<std::size_t>(static_cast<double>(n) * r.valid);
    if (n_train == 0 || n_train + n_valid >= n) throw ConfigError("too few samples to split");
    DataSplit d;
    d.train.assign(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(n_train));
    d.valid.assign(samples.begin() + static_cast<std::ptrdiff_t>(n_train),
                   samples.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
    d.online.assign(samples.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), samples.end());
    Rng rng = Rng(seed).fork(7);
    shuffle(d.train, rng);
    shuffle(d.valid, rng);
    return d;
}

inline std::vector<GriddedSample> grid_all(const std::vector<ImtsSample>& samples, const GridSpec& grid) {
    std::vector<GriddedSample> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(to_grid(s, grid));
    return out;
}

/// Four variables, 16 lookback and 4 forecast slots, 600 samples. Halfway
/// through, every variable's mean jumps by twice its stationary standard
/// deviation and the missing rate rises from 0.3 to 0.5.
inline ShiftScenario reference_scenario(std::uint64_t seed) {
    ShiftScenario s;
    s.n_vars = 4;
    s.n_samples = 600;
    s.grid = GridSpec{16, 4, 4, 16.0, 4.0};
    s.seed = seed;
    Regime before;
    before.start_fraction = 0.0;
    before.mean_offset = {0.0};
    before.ar_coef = 0.8;
    before.noise_scale = 1.0;
    before.missing_rate = 0.3;
    Regime after = before;
    after.start_fraction = 0.5;
    after.mean_offset = {2.0 * before.stationary_std()};
    after.missing_rate = 0.5;
    s.regimes = {before, after};
    return s;
}

struct PretrainedModels {
    std::shared_ptr<LinearGridForecaster> forecaster;
    std::shared_ptr<UncertaintyEstimator> ue;
    TrainReport forecaster_report;
    UeTrainReport ue_report;
};

inline PretrainedModels pretrain_models(const DataSplit& data, const GridSpec& grid,
                                        TrainConfig fcfg, UeTrainConfig ucfg, std::uint64_t seed) {
    PretrainedModels m;
    fcfg.seed = seed;
    ucfg.seed = seed;
    m.forecaster = std::make_shared<LinearGridForecaster>(grid);
    m.forecaster_report = train_offline(*m.forecaster, data.train, data.valid, fcfg);
    Rng init = Rng(seed).fork(11);
    m.ue = std::make_shared<UncertaintyEstimator>(grid, init);
    m.ue_report = m.ue->pretrain(*m.forecaster, data.train, data.valid, ucfg);
    return m;
}

struct Experiment {
    GridSpec grid;
    DataSplit data;
    PretrainedModels models;
    std::vector<MaskedBatch> stream;
};

struct ExperimentConfig {
    SplitRatios split;
    TrainConfig forecaster;
    UeTrainConfig ue;
    std::size_t batch_size = 16;
};

inline Experiment prepare_experiment(const std::vector<ImtsSample>& samples, const GridSpec& grid,
                                     const ExperimentConfig& cfg, std::uint64_t seed) {
    Experiment e;
    e.grid = grid;
    e.data = split_dataset(grid_all(samples, grid), cfg.split, seed);
    e.models = pretrain_models(e.data, grid, cfg.forecaster, cfg.ue, seed);
    e.stream = make_online_batches(e.data.online, cfg.batch_size);
    return e;
}

inline Experiment prepare_reference_experiment(std::uint64_t seed, const ExperimentConfig& cfg = {}) {
    const ShiftScenario sc = reference_scenario(seed);
    return prepare_experiment(generate(sc), sc.grid, cfg, seed);
}

}  // namespace undercali
