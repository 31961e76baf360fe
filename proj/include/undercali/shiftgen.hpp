#pragma once

// Synthetic IMTS streams with controllable distribution shifts.
//
// Every sample is an independent AR(1) path per variable, one step per grid
// slot, started from the stationary distribution of the regime active at the
// sample's position in the stream. Each slot has one candidate timestamp,
// jittered uniformly inside the slot; each cell is then dropped independently
// with the regime's missing rate. Randomness comes from Rng (xoshiro256**).

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "undercali/error.hpp"
#include "undercali/imts.hpp"
#include "undercali/rng.hpp"

namespace undercali {

struct Regime {
    double start_fraction = 0.0;
    std::vector<double> mean_offset;  // one entry per variable, or a single broadcast entry
    double ar_coef = 0.8;
    double noise_scale = 1.0;
    double missing_rate = 0.0;

    double offset(std::size_t var) const {
        if (mean_offset.empty()) return 0.0;
        return mean_offset.size() == 1 ? mean_offset[0] : mean_offset[var];
    }

    // Standard deviation of the stationary AR(1) process.
    double stationary_std() const { return noise_scale / std::sqrt(1.0 - ar_coef * ar_coef); }

    bool operator==(const Regime&) const = default;
};

struct ShiftScenario {
    std::size_t n_vars = 1;
    std::size_t n_samples = 0;
    GridSpec grid;
    std::vector<Regime> regimes;
    std::uint64_t seed = 0;

    bool operator==(const ShiftScenario&) const = default;

    void check() const {
        grid.check();
        if (grid.n_vars != n_vars) throw ConfigError("scenario n_vars differs from grid n_vars");
        if (regimes.empty()) throw ConfigError("scenario needs at least one regime");
        if (regimes.front().start_fraction != 0.0) {
            throw ConfigError("first regime must start at fraction 0");
        }
        for (std::size_t r = 0; r < regimes.size(); ++r) {
            const auto& g = regimes[r];
            const std::string where = "regime " + std::to_string(r) + ": ";
            if (r > 0 && !(g.start_fraction > regimes[r - 1].start_fraction)) {
                throw ConfigError(where + "start fractions must be strictly increasing");
            }
            if (!(g.missing_rate >= 0.0 && g.missing_rate < 1.0)) {
                throw ConfigError(where + "missing rate must lie in [0, 1)");
            }
            if (!(std::abs(g.ar_coef) < 1.0)) throw ConfigError(where + "|ar_coef| must be < 1");
            if (!(g.noise_scale >= 0.0)) throw ConfigError(where + "noise scale must be >= 0");
            if (g.mean_offset.size() > 1 && g.mean_offset.size() != n_vars) {
                throw ConfigError(where + "mean_offset needs 1 or n_vars entries");
            }
        }
    }

    const Regime& regime_at(std::size_t index) const {
        const double frac = static_cast<double>(index) / static_cast<double>(n_samples);
        const Regime* active = &regimes.front();
        for (const auto& g : regimes) {
            if (g.start_fraction <= frac) active = &g;
        }
        return *active;
    }
};

class ShiftGenerator {
public:
    explicit ShiftGenerator(ShiftScenario scenario)
        : scenario_(std::move(scenario)), rng_(scenario_.seed) {
        scenario_.check();
    }

    std::optional<ImtsSample> next() {
        if (index_ >= scenario_.n_samples) return std::nullopt;
        return make(index_++);
    }

    std::size_t position() const { return index_; }

private:
    ImtsSample make(std::size_t index) {
        const GridSpec& g = scenario_.grid;
        const Regime& regime = scenario_.regime_at(index);
        const std::size_t n_slots = g.lookback_slots + g.forecast_slots;
        const auto c = static_cast<Eigen::Index>(scenario_.n_vars);
        const double start = static_cast<double>(index) * (g.lookback_span + g.forecast_span);
        const double split = start + g.lookback_span;

        std::vector<double> times(n_slots);
        for (std::size_t k = 0; k < n_slots; ++k) {
            const double u = rng_.uniform();
            if (k < g.lookback_slots) {
                times[k] = start + (static_cast<double>(k) + u) * g.lookback_width();
            } else {
                const auto j = static_cast<double>(k - g.lookback_slots);
                times[k] = split + (j + 1.0 - u) * g.forecast_width();
            }
        }

        Matrix path(static_cast<Eigen::Index>(n_slots), c);
        for (Eigen::Index v = 0; v < c; ++v) {
            const double mu = regime.offset(static_cast<std::size_t>(v));
            double x = mu + regime.stationary_std() * rng_.normal();
            for (std::size_t k = 0; k < n_slots; ++k) {
                if (k > 0) x = mu + regime.ar_coef * (x - mu) + regime.noise_scale * rng_.normal();
                path(static_cast<Eigen::Index>(k), v) = x;
            }
        }

        Matrix keep(static_cast<Eigen::Index>(n_slots), c);
        for (Eigen::Index k = 0; k < keep.rows(); ++k) {
            for (Eigen::Index v = 0; v < c; ++v) {
                keep(k, v) = rng_.bernoulli(regime.missing_rate) ? 0.0 : 1.0;
            }
        }
        // The split must stay inside the sample's time range, so neither side
        // may end up empty. At the rates used here this almost never fires.
        auto ensure_any = [&](std::size_t lo, std::size_t hi) {
            if (keep.middleRows(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(hi - lo))
                    .sum() > 0.0) {
                return;
            }
            const auto k = static_cast<Eigen::Index>(lo + rng_.below(hi - lo));
            keep(k, static_cast<Eigen::Index>(rng_.below(scenario_.n_vars))) = 1.0;
        };
        ensure_any(0, g.lookback_slots);
        ensure_any(g.lookback_slots, n_slots);

        ImtsSample s;
        s.split_time = split;
        std::vector<Eigen::Index> rows;
        for (Eigen::Index k = 0; k < keep.rows(); ++k) {
            if (keep.row(k).sum() > 0.0) rows.push_back(k);
        }
        s.values = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), c);
        s.mask = Matrix::Zero(s.values.rows(), c);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto k = rows[r];
            const auto row = static_cast<Eigen::Index>(r);
            s.timestamps.push_back(times[static_cast<std::size_t>(k)]);
            s.mask.row(row) = keep.row(k);
            for (Eigen::Index v = 0; v < c; ++v) {
                if (keep(k, v) != 0.0) s.values(row, v) = path(k, v);
            }
        }
        return s;
    }

    ShiftScenario scenario_;
    Rng rng_;
    std::size_t index_ = 0;
};

inline std::vector<ImtsSample> generate(const ShiftScenario& scenario) {
    ShiftGenerator gen(scenario);
    std::vector<ImtsSample> out;
    out.reserve(scenario.n_samples);
    while (auto s = gen.next()) out.push_back(std::move(*s));
    return out;
}

}  // namespace undercali
