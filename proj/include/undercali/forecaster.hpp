#pragma once

// Source forecasters: the frozen model wrapped by the calibrators. Two
// built-ins, last-observation-carried-forward and a per-variable affine map
// on the gridded lookback, plus offline training for the latter.

#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "undercali/checkpoint.hpp"
#include "undercali/diffkit.hpp"
#include "undercali/imts.hpp"
#include "undercali/rng.hpp"

namespace undercali {

inline nlohmann::json grid_to_json(const GridSpec& g) {
    return {{"lookback_slots", g.lookback_slots}, {"forecast_slots", g.forecast_slots},
            {"n_vars", g.n_vars}, {"lookback_span", g.lookback_span},
            {"forecast_span", g.forecast_span}};
}

inline GridSpec grid_from_json(const nlohmann::json& j) {
    GridSpec g;
    g.lookback_slots = j.at("lookback_slots").get<std::size_t>();
    g.forecast_slots = j.at("forecast_slots").get<std::size_t>();
    g.n_vars = j.at("n_vars").get<std::size_t>();
    g.lookback_span = j.at("lookback_span").get<double>();
    g.forecast_span = j.at("forecast_span").get<double>();
    return g;
}

/// Behavioural contract of a source forecaster. Once handed out as const it
/// is frozen: predict is deterministic and parameters never change.
class SourceForecaster {
public:
    virtual ~SourceForecaster() = default;

    virtual std::string kind() const = 0;
    virtual const GridSpec& grid() const = 0;

    /// Forecast on the query grid. `values` stands in for lookback.values
    /// (it may be a calibrated version of them); timestamps and mask are
    /// taken from `lookback` unchanged.
    virtual Matrix predict(const Matrix& values, const GriddedWindow& lookback,
                           const GriddedWindow& query) const = 0;

    Matrix predict(const GriddedWindow& lookback, const GriddedWindow& query) const {
        return predict(lookback.values, lookback, query);
    }

    /// Whether gradients can be propagated back to the lookback values.
    virtual bool differentiable() const { return false; }

    /// d(loss)/d(values) given d(loss)/d(prediction). The forecaster's own
    /// parameters receive nothing.
    virtual Matrix backward_input(const Matrix& values, const GriddedWindow& lookback,
                                  const GriddedWindow& query, const Matrix& upstream) const {
        (void)values, (void)lookback, (void)query, (void)upstream;
        throw UsageError(kind() + " forecaster is not differentiable");
    }

    virtual std::uint64_t parameter_checksum() const = 0;
    virtual Checkpoint checkpoint() const = 0;

protected:
    void check_shapes(const Matrix& values, const GriddedWindow& lookback,
                      const GriddedWindow& query) const {
        const auto& g = grid();
        const auto l_in = static_cast<Eigen::Index>(g.lookback_slots);
        const auto l_out = static_cast<Eigen::Index>(g.forecast_slots);
        const auto c = static_cast<Eigen::Index>(g.n_vars);
        if (values.rows() != l_in || values.cols() != c || lookback.mask.rows() != l_in ||
            lookback.mask.cols() != c) {
            throw ShapeError(kind() + ": lookback shape does not match the grid");
        }
        if (query.mask.rows() != l_out || query.mask.cols() != c) {
            throw ShapeError(kind() + ": query shape does not match the grid");
        }
    }
};

using ForecasterPtr = std::shared_ptr<const SourceForecaster>;

// ---------------------------------------------------------------------------

/// Predicts the last observed lookback value of each variable at every query
/// slot; 0 for a variable with no lookback observation.
class LocfForecaster final : public SourceForecaster {
public:
    using SourceForecaster::predict;

    explicit LocfForecaster(GridSpec grid) : grid_(grid) { grid_.check(); }

    std::string kind() const override { return "locf"; }
    const GridSpec& grid() const override { return grid_; }

    Matrix predict(const Matrix& values, const GriddedWindow& lookback,
                   const GriddedWindow& query) const override {
        check_shapes(values, lookback, query);
        Matrix out = Matrix::Zero(query.mask.rows(), query.mask.cols());
        for (Eigen::Index c = 0; c < values.cols(); ++c) {
            const Eigen::Index l = last_observed(lookback, c);
            if (l >= 0) out.col(c).setConstant(values(l, c));
        }
        return out;
    }

    bool differentiable() const override { return true; }

    Matrix backward_input(const Matrix& values, const GriddedWindow& lookback,
                          const GriddedWindow& query, const Matrix& upstream) const override {
        check_shapes(values, lookback, query);
        Matrix grad = Matrix::Zero(values.rows(), values.cols());
        for (Eigen::Index c = 0; c < values.cols(); ++c) {
            const Eigen::Index l = last_observed(lookback, c);
            if (l >= 0) grad(l, c) = upstream.col(c).sum();
        }
        return grad;
    }

    std::uint64_t parameter_checksum() const override { return 0; }

    Checkpoint checkpoint() const override {
        Checkpoint ck;
        ck.header = {{"component", "forecaster"}, {"kind", kind()}, {"grid", grid_to_json(grid_)}};
        return ck;
    }

private:
    static Eigen::Index last_observed(const GriddedWindow& lookback, Eigen::Index c) {
        for (Eigen::Index l = lookback.mask.rows(); l-- > 0;) {
            if (lookback.mask(l, c) != 0.0) return l;
        }
        return -1;
    }

    GridSpec grid_;
};

// ---------------------------------------------------------------------------

/// Per variable c: y_c = A_c [v_c * m_c ; m_c] + d_c, an affine map from the
/// masked lookback column and its mask (2 L_in) to the forecast column (L_out).
class LinearGridForecaster final : public SourceForecaster {
public:
    using SourceForecaster::predict;

    explicit LinearGridForecaster(GridSpec grid) : grid_(grid) {
        grid_.check();
        const auto l_in = static_cast<Eigen::Index>(grid_.lookback_slots);
        const auto l_out = static_cast<Eigen::Index>(grid_.forecast_slots);
        for (std::size_t c = 0; c < grid_.n_vars; ++c) {
            weights_.emplace_back("A." + std::to_string(c), Matrix::Zero(l_out, 2 * l_in));
            biases_.emplace_back("d." + std::to_string(c), Matrix::Zero(l_out, 1));
        }
    }

    std::string kind() const override { return "linear_grid"; }
    const GridSpec& grid() const override { return grid_; }

    Matrix predict(const Matrix& values, const GriddedWindow& lookback,
                   const GriddedWindow& query) const override {
        check_shapes(values, lookback, query);
        const Eigen::Index l_in = values.rows();
        Matrix out(query.mask.rows(), query.mask.cols());
        for (Eigen::Index c = 0; c < values.cols(); ++c) {
            const Matrix& a = weights_[static_cast<std::size_t>(c)].value;
            out.col(c) = a.leftCols(l_in) * values.col(c).cwiseProduct(lookback.mask.col(c)) +
                         a.rightCols(l_in) * lookback.mask.col(c) +
                         biases_[static_cast<std::size_t>(c)].value.col(0);
        }
        return out;
    }

    bool differentiable() const override { return true; }

    Matrix backward_input(const Matrix& values, const GriddedWindow& lookback,
                          const GriddedWindow& query, const Matrix& upstream) const override {
        check_shapes(values, lookback, query);
        const Eigen::Index l_in = values.rows();
        Matrix grad(values.rows(), values.cols());
        for (Eigen::Index c = 0; c < values.cols(); ++c) {
            const Matrix& a = weights_[static_cast<std::size_t>(c)].value;
            grad.col(c) =
                (a.leftCols(l_in).transpose() * upstream.col(c)).cwiseProduct(lookback.mask.col(c));
        }
        return grad;
    }

    std::uint64_t parameter_checksum() const override { return checksum(const_params()); }

    Checkpoint checkpoint() const override {
        Checkpoint ck;
        ck.header = {{"component", "forecaster"}, {"kind", kind()}, {"grid", grid_to_json(grid_)}};
        ck.add(const_params());
        return ck;
    }

    // Mutable access, for offline training before the model is frozen.
    ParamRefs params() {
        ParamRefs out;
        for (auto& w : weights_) out.push_back(&w);
        for (auto& b : biases_) out.push_back(&b);
        return out;
    }

    std::vector<const Param*> const_params() const {
        std::vector<const Param*> out;
        for (const auto& w : weights_) out.push_back(&w);
        for (const auto& b : biases_) out.push_back(&b);
        return out;
    }

    /// Accumulate d(loss)/dA and d(loss)/dd for one sample.
    void accumulate_param_grads(const GriddedWindow& lookback, const Matrix& upstream) {
        const Eigen::Index l_in = lookback.values.rows();
        for (Eigen::Index c = 0; c < upstream.cols(); ++c) {
            auto& a = weights_[static_cast<std::size_t>(c)];
            const Vector x_val = lookback.values.col(c).cwiseProduct(lookback.mask.col(c));
            a.grad.leftCols(l_in).noalias() += upstream.col(c) * x_val.transpose();
            a.grad.rightCols(l_in).noalias() += upstream.col(c) * lookback.mask.col(c).transpose();
            biases_[static_cast<std::size_t>(c)].grad.col(0) += upstream.col(c);
        }
    }

private:
    GridSpec grid_;
    std::vector<Param> weights_;
    std::vector<Param> biases_;
};

inline ForecasterPtr load_forecaster(const Checkpoint& ck) {
    if (ck.header.value("component", "") != "forecaster") {
        throw StructuralError("checkpoint is not a forecaster");
    }
    const GridSpec grid = grid_from_json(ck.header.at("grid"));
    const std::string kind = ck.header.at("kind").get<std::string>();
    if (kind == "locf") return std::make_shared<LocfForecaster>(grid);
    if (kind == "linear_grid") {
        auto f = std::make_shared<LinearGridForecaster>(grid);
        ck.restore(f->params());
        return f;
    }
    throw StructuralError("unknown forecaster kind " + kind);
}

// ---------------------------------------------------------------------------
// Offline training

struct TrainConfig {
    std::size_t max_epochs = 300;
    std::size_t patience = 5;
    std::size_t batch_size = 32;
    double lr = 1e-2;
    std::uint64_t seed = 0;

    bool operator==(const TrainConfig&) const = default;
};

struct TrainReport {
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    double best_valid_loss = std::numeric_limits<double>::infinity();
    bool stopped_early = false;
};

/// Pooled masked MSE of a forecaster over a set of gridded samples.
inline double dataset_mse(const SourceForecaster& f, const std::vector<GriddedSample>& data) {
    MaskedErrorSums sums;
    for (const auto& s : data) sums.add(f.predict(s.lookback, s.query), s.target);
    return sums.mse();
}

/// Adam on the pooled masked MSE with shuffled mini-batches; stops once the
/// validation loss has not improved for `patience` epochs and restores the
/// best-validation parameters. Validation falls back to the training set
/// when `valid` is empty.
inline TrainReport train_offline(LinearGridForecaster& f, const std::vector<GriddedSample>& train,
                                 const std::vector<GriddedSample>& valid, const TrainConfig& cfg) {
    if (train.empty()) throw ConfigError("empty training set");
    Rng rng(cfg.seed);
    const ParamRefs params = f.params();
    const AdamConfig adam{.lr = cfg.lr};
    const auto& monitor = valid.empty() ? train : valid;

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainReport report;
    report.best_valid_loss = dataset_mse(f, monitor);
    ParamSnapshot best(params);
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        shuffle(order, rng);
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t e = std::min(order.size(), b + cfg.batch_size);
            double n_obs = 0.0;
            for (std::size_t i = b; i < e; ++i) n_obs += train[order[i]].target.observed();
            if (n_obs <= 0.0) continue;
            zero_grads(params);
            for (std::size_t i = b; i < e; ++i) {
                const auto& s = train[order[i]];
                const Matrix pred = f.predict(s.lookback, s.query);
                const Matrix g = 2.0 * (pred - s.target.values).cwiseProduct(s.target.mask) / n_obs;
                f.accumulate_param_grads(s.lookback, g);
            }
            adam_step(params, adam);
        }
        report.epochs_run = epoch;
        const double loss = dataset_mse(f, monitor);
        if (loss < report.best_valid_loss) {
            report.best_valid_loss = loss;
            report.best_epoch = epoch;
            best = ParamSnapshot(params);
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            report.stopped_early = true;
            break;
        }
    }
    best.restore();
    for (Param* p : params) p->reset_buffers();
    return report;
}

}  // namespace undercali
