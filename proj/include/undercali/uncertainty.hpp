#pragma once

// Uncertainty estimator: a small MLP scoring how large the masked squared
// prediction error of a sample is likely to be, relative to the running
// range of errors seen so far.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "undercali/checkpoint.hpp"
#include "undercali/diffkit.hpp"
#include "undercali/forecaster.hpp"
#include "undercali/imts.hpp"

namespace undercali {

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

enum class RangeMode { frozen, expanding };

/// Expanding min/max of the masked squared error Delta.
struct RunningRange {
    double delta_min = std::numeric_limits<double>::infinity();
    double delta_max = -std::numeric_limits<double>::infinity();
    bool initialized = false;

    void expand(double delta) {
        delta_min = std::min(delta_min, delta);
        delta_max = std::max(delta_max, delta);
        initialized = true;
    }

    /// (Delta - min) / (max - min), clamped to [0, 1]; 0 for a degenerate or
    /// empty range.
    double normalize(double delta) const {
        if (!initialized || !(delta_max > delta_min)) return 0.0;
        return std::clamp((delta - delta_min) / (delta_max - delta_min), 0.0, 1.0);
    }
};

/// Normalized error target u for one sample. In expanding mode the range
/// absorbs Delta before normalizing.
inline double uncertainty_target(RunningRange& range, const Matrix& pred,
                                 const GriddedWindow& target, RangeMode mode = RangeMode::expanding) {
    const double delta = masked_sq_norm(pred, target);
    if (mode == RangeMode::expanding) range.expand(delta);
    return range.normalize(delta);
}

struct UeTrainConfig {
    std::size_t max_epochs = 300;
    std::size_t patience = 10;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;

    bool operator==(const UeTrainConfig&) const = default;
};

struct UeTrainReport {
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    double best_valid_l1 = std::numeric_limits<double>::infinity();
    bool stopped_early = false;
};

class UncertaintyEstimator {
public:
    UncertaintyEstimator(const GridSpec& grid, Rng& rng, std::vector<Eigen::Index> hidden = {64, 64})
        : grid_(grid) {
        std::vector<Eigen::Index> widths{feature_width(grid)};
        widths.insert(widths.end(), hidden.begin(), hidden.end());
        widths.push_back(1);
        mlp_ = Mlp(widths, Activation::tanh, rng, "ue");
    }

    static Eigen::Index feature_width(const GridSpec& g) {
        return static_cast<Eigen::Index>(2 * g.lookback_slots * g.n_vars +
                                         2 * g.forecast_slots * g.n_vars);
    }

    const GridSpec& grid() const { return grid_; }
    RunningRange& range() { return range_; }
    const RunningRange& range() const { return range_; }
    Mlp& mlp() { return mlp_; }
    const Mlp& mlp() const { return mlp_; }

    /// [masked lookback values, lookback mask, prediction, query mask], each
    /// flattened row-major.
    Vector featurize(const GriddedWindow& lookback, const Matrix& prediction,
                     const Matrix& query_mask) const {
        const auto l_in = static_cast<Eigen::Index>(grid_.lookback_slots);
        const auto l_out = static_cast<Eigen::Index>(grid_.forecast_slots);
        const auto c = static_cast<Eigen::Index>(grid_.n_vars);
        if (lookback.values.rows() != l_in || lookback.values.cols() != c ||
            lookback.mask.rows() != l_in || lookback.mask.cols() != c ||
            prediction.rows() != l_out || prediction.cols() != c || query_mask.rows() != l_out ||
            query_mask.cols() != c) {
            throw ShapeError("uncertainty features: shapes do not match the grid");
        }
        Vector x(feature_width(grid_));
        Eigen::Index k = 0;
        auto put = [&](const Matrix& m) {
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                for (Eigen::Index j = 0; j < m.cols(); ++j) x(k++) = m(r, j);
            }
        };
        put(lookback.values.cwiseProduct(lookback.mask));
        put(lookback.mask);
        put(prediction);
        put(query_mask);
        return x;
    }

    double estimate(const GriddedWindow& lookback, const Matrix& prediction,
                    const Matrix& query_mask) const {
        const Vector x = featurize(lookback, prediction, query_mask);
        return estimate_batch(x.transpose())(0);
    }

    /// Scores for a feature matrix with one sample per row.
    Vector estimate_batch(const Matrix& features) const {
        const Matrix z = mlp_.forward(features);
        return z.col(0).unaryExpr([](double v) { return sigmoid(v); });
    }

    /// Mean |u_hat - u|; accumulates gradients when `with_grad`.
    double l1_loss(const Matrix& features, const Vector& targets, bool with_grad) {
        if (features.rows() != targets.size()) throw ShapeError("feature/target count mismatch");
        if (features.rows() == 0) return 0.0;
        MlpCache cache;
        const Matrix z = mlp_.forward(features, with_grad ? &cache : nullptr);
        const auto n = static_cast<double>(features.rows());
        double total = 0.0;
        Matrix dz(z.rows(), 1);
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            const double s = sigmoid(z(i, 0));
            const double r = s - targets(i);
            total += std::abs(r);
            const double sign = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
            dz(i, 0) = sign * s * (1.0 - s) / n;
        }
        if (with_grad) mlp_.backward(cache, dz);
        return total / n;
    }

    /// n_steps Adam steps on the L1 objective. Empty input is a no-op; a
    /// non-finite loss or gradient leaves the parameters as they were.
    bool update_online(const Matrix& features, const Vector& targets, std::size_t n_steps,
                       double lr) {
        if (features.rows() == 0 || n_steps == 0) return false;
        const ParamRefs ps = mlp_.params();
        ParamSnapshot before(ps);
        const AdamConfig adam{.lr = lr};
        for (std::size_t step = 0; step < n_steps; ++step) {
            zero_grads(ps);
            const double l = l1_loss(features, targets, true);
            if (!std::isfinite(l)) {
                before.restore();
                return false;
            }
            try {
                adam_step(ps, adam);
            } catch (const NumericError&) {
                before.restore();
                return false;
            }
        }
        return true;
    }

    /// Offline pretraining on the raw predictions of the frozen source
    /// forecaster. The running range is reset and seeded from every training
    /// Delta; validation targets are normalized with that range.
    UeTrainReport pretrain(const SourceForecaster& f, const std::vector<GriddedSample>& train,
                           const std::vector<GriddedSample>& valid, const UeTrainConfig& cfg) {
        if (train.empty()) throw ConfigError("empty training set");
        range_ = RunningRange{};
        auto build = [&](const std::vector<GriddedSample>& data, Matrix& x, Vector& deltas) {
            x.resize(static_cast<Eigen::Index>(data.size()), feature_width(grid_));
            deltas.resize(static_cast<Eigen::Index>(data.size()));
            for (std::size_t i = 0; i < data.size(); ++i) {
                const auto& s = data[i];
                const Matrix pred = f.predict(s.lookback, s.query);
                x.row(static_cast<Eigen::Index>(i)) = featurize(s.lookback, pred, s.query.mask);
                deltas(static_cast<Eigen::Index>(i)) = masked_sq_norm(pred, s.target);
            }
        };
        Matrix x_train, x_valid;
        Vector d_train, d_valid;
        build(train, x_train, d_train);
        build(valid, x_valid, d_valid);
        for (Eigen::Index i = 0; i < d_train.size(); ++i) range_.expand(d_train(i));
        const Vector u_train = d_train.unaryExpr([this](double d) { return range_.normalize(d); });
        const Vector u_valid = d_valid.unaryExpr([this](double d) { return range_.normalize(d); });
        const Matrix& x_mon = valid.empty() ? x_train : x_valid;
        const Vector& u_mon = valid.empty() ? u_train : u_valid;

        Rng rng(cfg.seed);
        const ParamRefs ps = mlp_.params();
        const AdamConfig adam{.lr = cfg.lr};
        std::vector<Eigen::Index> order(static_cast<std::size_t>(x_train.rows()));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);

        UeTrainReport report;
        report.best_valid_l1 = l1_loss(x_mon, u_mon, false);
        ParamSnapshot best(ps);
        std::size_t since_best = 0;
        for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
            shuffle(order, rng);
            for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
                const std::size_t e = std::min(order.size(), b + cfg.batch_size);
                Matrix xb(static_cast<Eigen::Index>(e - b), x_train.cols());
                Vector ub(static_cast<Eigen::Index>(e - b));
                for (std::size_t i = b; i < e; ++i) {
                    xb.row(static_cast<Eigen::Index>(i - b)) = x_train.row(order[i]);
                    ub(static_cast<Eigen::Index>(i - b)) = u_train(order[i]);
                }
                zero_grads(ps);
                l1_loss(xb, ub, true);
                adam_step(ps, adam);
            }
            report.epochs_run = epoch;
            const double l = l1_loss(x_mon, u_mon, false);
            if (l < report.best_valid_l1) {
                report.best_valid_l1 = l;
                report.best_epoch = epoch;
                best = ParamSnapshot(ps);
                since_best = 0;
            } else if (++since_best >= cfg.patience) {
                report.stopped_early = true;
                break;
            }
        }
        best.restore();
        for (Param* p : ps) p->reset_buffers();
        return report;
    }

    ParamRefs params() { return mlp_.params(); }
    std::vector<const Param*> params() const { return mlp_.params(); }
    std::uint64_t parameter_checksum() const { return checksum(params()); }

    Checkpoint checkpoint() const {
        Checkpoint ck;
        nlohmann::json hidden = nlohmann::json::array();
        for (std::size_t i = 0; i + 1 < mlp_.layers().size(); ++i) {
            hidden.push_back(mlp_.layers()[i].out_dim());
        }
        ck.header = {{"component", "uncertainty_estimator"},
                     {"grid", grid_to_json(grid_)},
                     {"hidden", hidden},
                     {"range",
                      {{"initialized", range_.initialized},
                       {"delta_min", range_.initialized ? range_.delta_min : 0.0},
                       {"delta_max", range_.initialized ? range_.delta_max : 0.0}}}};
        ck.add(params());
        return ck;
    }

    static UncertaintyEstimator from_checkpoint(const Checkpoint& ck) {
        if (ck.header.value("component", "") != "uncertainty_estimator") {
            throw StructuralError("checkpoint is not an uncertainty estimator");
        }
        Rng rng(0);
        UncertaintyEstimator ue(grid_from_json(ck.header.at("grid")), rng,
                                ck.header.at("hidden").get<std::vector<Eigen::Index>>());
        ck.restore(ue.params());
        const auto& r = ck.header.at("range");
        if (r.at("initialized").get<bool>()) {
            ue.range_.initialized = true;
            ue.range_.delta_min = r.at("delta_min").get<double>();
            ue.range_.delta_max = r.at("delta_max").get<double>();
        }
        return ue;
    }

private:
    GridSpec grid_;
    Mlp mlp_;
    RunningRange range_;
};

}  // namespace undercali
