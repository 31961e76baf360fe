#pragma once

// Irregular multivariate time series data model, canonical-grid conversion
// and masked error metrics.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "undercali/error.hpp"

namespace undercali {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// One irregular series. Rows are the union of the per-channel observation
/// times; an unobserved cell holds value 0 and mask 0.
struct ImtsSample {
    std::vector<double> timestamps;
    Matrix values;  // L x C
    Matrix mask;    // L x C, entries in {0, 1}
    double split_time = 0.0;

    std::size_t rows() const { return timestamps.size(); }
    std::size_t n_vars() const { return static_cast<std::size_t>(values.cols()); }
};

inline void validate(const ImtsSample& s) {
    const auto rows = static_cast<Eigen::Index>(s.timestamps.size());
    if (rows == 0) throw StructuralError("sample has no timestamps");
    if (s.values.rows() != rows || s.mask.rows() != rows) {
        throw StructuralError("timestamps/values/mask row counts differ");
    }
    if (s.values.cols() != s.mask.cols()) {
        throw StructuralError("values/mask column counts differ");
    }
    for (std::size_t i = 1; i < s.timestamps.size(); ++i) {
        if (!(s.timestamps[i] > s.timestamps[i - 1])) {
            throw StructuralError("timestamps not increasing");
        }
    }
    for (Eigen::Index l = 0; l < rows; ++l) {
        bool any = false;
        for (Eigen::Index c = 0; c < s.mask.cols(); ++c) {
            const double m = s.mask(l, c);
            if (m != 0.0 && m != 1.0) throw StructuralError("mask entries must be 0 or 1");
            if (m == 0.0 && s.values(l, c) != 0.0) {
                throw StructuralError("unobserved cell carries a value");
            }
            if (m == 1.0 && !std::isfinite(s.values(l, c))) {
                throw StructuralError("observed cell is not finite");
            }
            any = any || m == 1.0;
        }
        if (!any) throw StructuralError("row without any observed cell");
    }
    if (s.split_time < s.timestamps.front() || s.split_time > s.timestamps.back()) {
        throw StructuralError("split time outside the sample's time range");
    }
}

/// Lookback part of a sample plus the forecast query; targets stay empty
/// until ground truth is revealed.
struct WindowPair {
    ImtsSample lookback;
    std::vector<double> query_times;
    Matrix query_mask;
    std::optional<Matrix> targets;
};

inline WindowPair split_window(const ImtsSample& s) {
    const auto n_lb = static_cast<Eigen::Index>(
        std::upper_bound(s.timestamps.begin(), s.timestamps.end(), s.split_time) -
        s.timestamps.begin());
    const Eigen::Index n_fc = static_cast<Eigen::Index>(s.rows()) - n_lb;
    WindowPair w;
    w.lookback.timestamps.assign(s.timestamps.begin(), s.timestamps.begin() + n_lb);
    w.lookback.values = s.values.topRows(n_lb);
    w.lookback.mask = s.mask.topRows(n_lb);
    w.lookback.split_time = s.split_time;
    w.query_times.assign(s.timestamps.begin() + n_lb, s.timestamps.end());
    w.query_mask = s.mask.bottomRows(n_fc);
    w.targets = Matrix(s.values.bottomRows(n_fc));
    return w;
}

/// Fixed-shape grid on which every neural component operates. The lookback
/// window is [split - lookback_span, split] cut into lookback_slots slots;
/// the forecast window is (split, split + forecast_span] cut into
/// forecast_slots slots.
struct GridSpec {
    std::size_t lookback_slots = 0;
    std::size_t forecast_slots = 0;
    std::size_t n_vars = 0;
    double lookback_span = 0.0;
    double forecast_span = 0.0;

    double lookback_width() const { return lookback_span / static_cast<double>(lookback_slots); }
    double forecast_width() const { return forecast_span / static_cast<double>(forecast_slots); }

    void check() const {
        if (lookback_slots == 0 || forecast_slots == 0 || n_vars == 0) {
            throw ConfigError("grid dimensions must be positive");
        }
        if (!(lookback_span > 0.0) || !(forecast_span > 0.0)) {
            throw ConfigError("grid spans must be positive");
        }
    }

    bool operator==(const GridSpec&) const = default;
};

/// Zero-filled, masked L x C window on the canonical grid.
struct GriddedWindow {
    Matrix values;  // L x C, zero where mask is zero
    Matrix mask;    // L x C
    std::vector<double> slot_times;

    std::size_t grid_len() const { return static_cast<std::size_t>(values.rows()); }
    std::size_t n_vars() const { return static_cast<std::size_t>(values.cols()); }
    double observed() const { return mask.sum(); }
};

struct GriddedSample {
    GriddedWindow lookback;
    GriddedWindow query;   // values all zero; mask marks evaluated cells
    GriddedWindow target;  // ground truth under the query mask
};

/// Batch of gridded samples. Targets are optional so that the inference
/// stage can be handed a batch whose ground truth is still hidden.
struct MaskedBatch {
    std::vector<GriddedWindow> inputs;
    std::vector<GriddedWindow> queries;
    std::optional<std::vector<GriddedWindow>> targets;

    std::size_t size() const { return inputs.size(); }

    void check() const {
        if (inputs.size() != queries.size() ||
            (targets && targets->size() != inputs.size())) {
            throw ShapeError("batch lists differ in length");
        }
        for (std::size_t i = 1; i < inputs.size(); ++i) {
            if (inputs[i].values.rows() != inputs[0].values.rows() ||
                inputs[i].values.cols() != inputs[0].values.cols() ||
                queries[i].mask.rows() != queries[0].mask.rows()) {
                throw ShapeError("heterogeneous shapes within a batch");
            }
        }
    }
};

namespace detail {

inline GriddedWindow empty_window(std::size_t len, std::size_t vars, double start, double width) {
    GriddedWindow w;
    w.values = Matrix::Zero(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(vars));
    w.mask = Matrix::Zero(w.values.rows(), w.values.cols());
    w.slot_times.resize(len);
    for (std::size_t k = 0; k < len; ++k) {
        w.slot_times[k] = start + (static_cast<double>(k) + 0.5) * width;
    }
    return w;
}

}  // namespace detail

/// Bucketize a sample onto the grid. Several observations of one variable in
/// the same slot are averaged.
inline GriddedSample to_grid(const ImtsSample& s, const GridSpec& grid) {
    grid.check();
    if (s.n_vars() != grid.n_vars) {
        throw StructuralError("sample has " + std::to_string(s.n_vars()) +
                              " variables, grid expects " + std::to_string(grid.n_vars));
    }
    const double lb_start = s.split_time - grid.lookback_span;
    const double fc_end = s.split_time + grid.forecast_span;
    const double lb_w = grid.lookback_width();
    const double fc_w = grid.forecast_width();

    GriddedSample out;
    out.lookback = detail::empty_window(grid.lookback_slots, grid.n_vars, lb_start, lb_w);
    out.target = detail::empty_window(grid.forecast_slots, grid.n_vars, s.split_time, fc_w);
    Matrix lb_count = Matrix::Zero(out.lookback.values.rows(), out.lookback.values.cols());
    Matrix fc_count = Matrix::Zero(out.target.values.rows(), out.target.values.cols());

    const auto n_lb = static_cast<long>(grid.lookback_slots);
    const auto n_fc = static_cast<long>(grid.forecast_slots);
    for (std::size_t i = 0; i < s.rows(); ++i) {
        const double t = s.timestamps[i];
        const auto row = static_cast<Eigen::Index>(i);
        GriddedWindow* win = nullptr;
        Matrix* count = nullptr;
        long slot = 0;
        if (t <= s.split_time) {
            if (t < lb_start) throw ConfigError("observation before the lookback window");
            slot = std::min(static_cast<long>(std::floor((t - lb_start) / lb_w)), n_lb - 1);
            win = &out.lookback;
            count = &lb_count;
        } else {
            if (t > fc_end) throw ConfigError("observation after the forecast window");
            slot = std::clamp(static_cast<long>(std::ceil((t - s.split_time) / fc_w)) - 1, 0L,
                              n_fc - 1);
            win = &out.target;
            count = &fc_count;
        }
        for (Eigen::Index c = 0; c < s.values.cols(); ++c) {
            if (s.mask(row, c) == 0.0) continue;
            win->values(slot, c) += s.values(row, c);
            (*count)(slot, c) += 1.0;
        }
    }
    auto finish = [](GriddedWindow& w, const Matrix& count) {
        for (Eigen::Index l = 0; l < w.values.rows(); ++l) {
            for (Eigen::Index c = 0; c < w.values.cols(); ++c) {
                if (count(l, c) > 0.0) {
                    w.values(l, c) /= count(l, c);
                    w.mask(l, c) = 1.0;
                }
            }
        }
    };
    finish(out.lookback, lb_count);
    finish(out.target, fc_count);

    out.query.values = Matrix::Zero(out.target.values.rows(), out.target.values.cols());
    out.query.mask = out.target.mask;
    out.query.slot_times = out.target.slot_times;
    return out;
}

inline MaskedBatch make_batch(const std::vector<GriddedSample>& samples, std::size_t begin,
                              std::size_t end, bool with_targets = true) {
    MaskedBatch b;
    std::vector<GriddedWindow> targets;
    for (std::size_t i = begin; i < end; ++i) {
        b.inputs.push_back(samples[i].lookback);
        b.queries.push_back(samples[i].query);
        if (with_targets) targets.push_back(samples[i].target);
    }
    if (with_targets) b.targets = std::move(targets);
    return b;
}

// ---------------------------------------------------------------------------
// Masked metrics

namespace detail {

inline void check_same_shape(const Matrix& pred, const GriddedWindow& target) {
    if (pred.rows() != target.values.rows() || pred.cols() != target.values.cols() ||
        target.mask.rows() != target.values.rows() || target.mask.cols() != target.values.cols()) {
        throw ShapeError("prediction and target shapes differ");
    }
}

}  // namespace detail

/// Pooled error sums, so batch- and stream-level metrics weight each observed
/// cell equally.
struct MaskedErrorSums {
    double sq = 0.0;
    double abs = 0.0;
    double count = 0.0;

    void add(const Matrix& pred, const GriddedWindow& target) {
        detail::check_same_shape(pred, target);
        const Matrix diff = (pred - target.values).cwiseProduct(target.mask);
        sq += diff.squaredNorm();
        abs += diff.cwiseAbs().sum();
        count += target.mask.sum();
    }

    MaskedErrorSums& operator+=(const MaskedErrorSums& o) {
        sq += o.sq;
        abs += o.abs;
        count += o.count;
        return *this;
    }

    double mse() const {
        if (count <= 0.0) throw StructuralError("empty target");
        return sq / count;
    }
    double mae() const {
        if (count <= 0.0) throw StructuralError("empty target");
        return abs / count;
    }
};

/// Sum of squared errors over observed cells, ||(pred - target) * mask||^2.
/// An all-zero mask gives 0.
inline double masked_sq_norm(const Matrix& pred, const GriddedWindow& target) {
    detail::check_same_shape(pred, target);
    return (pred - target.values).cwiseProduct(target.mask).squaredNorm();
}

inline double masked_mse(const Matrix& pred, const GriddedWindow& target) {
    MaskedErrorSums s;
    s.add(pred, target);
    return s.mse();
}

inline double masked_mae(const Matrix& pred, const GriddedWindow& target) {
    MaskedErrorSums s;
    s.add(pred, target);
    return s.mae();
}

}  // namespace undercali
