#pragma once

// Gated distribution calibrator blocks and the two-stage calibration expert
// that wraps a frozen source forecaster.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "undercali/checkpoint.hpp"
#include "undercali/diffkit.hpp"
#include "undercali/forecaster.hpp"
#include "undercali/imts.hpp"

namespace undercali {

inline constexpr double kGateInit = 0.01;

struct CalibratorCache {
    Matrix input;     // V, L x C
    Matrix mixed;     // per-variable temporal mixing W_c V[:,c] + b_c, L x C
    MlpCache mlp;
    Matrix mlp_out;   // L x C
};

/// Residual, variable-gated temporal calibration of an L x C window:
///   out = V + tanh(gate) (broadcast over rows) * MLP([W_c V[:,c] + b_c]_c)
/// The MLP maps each time slot's C-vector to a C-vector (hidden width 2C,
/// tanh). W_c, b_c and the MLP output layer start at zero, so a fresh block
/// is exactly the identity.
class CalibratorBlock {
public:
    CalibratorBlock() = default;

    CalibratorBlock(Eigen::Index window_len, Eigen::Index n_vars, Rng& rng,
                    const std::string& prefix = "cal")
        : mlp_({n_vars, 2 * n_vars, n_vars}, Activation::tanh, rng, prefix + ".mlp") {
        for (Eigen::Index c = 0; c < n_vars; ++c) {
            const std::string tag = prefix + ".var" + std::to_string(c);
            weights_.emplace_back(tag + ".W", Matrix::Zero(window_len, window_len));
            biases_.emplace_back(tag + ".b", Matrix::Zero(window_len, 1));
        }
        mlp_.zero_output_layer();
        gate_ = Param(prefix + ".gate", Matrix::Constant(n_vars, 1, kGateInit));
    }

    Eigen::Index window_len() const { return weights_.empty() ? 0 : weights_.front().value.rows(); }
    Eigen::Index n_vars() const { return static_cast<Eigen::Index>(weights_.size()); }

    Matrix forward(const Matrix& v, CalibratorCache* cache = nullptr) const {
        if (v.rows() != window_len() || v.cols() != n_vars()) {
            throw ShapeError("calibrator expects a " + std::to_string(window_len()) + "x" +
                             std::to_string(n_vars()) + " window");
        }
        Matrix mixed(v.rows(), v.cols());
        for (Eigen::Index c = 0; c < v.cols(); ++c) {
            const auto k = static_cast<std::size_t>(c);
            mixed.col(c) = weights_[k].value * v.col(c) + biases_[k].value.col(0);
        }
        MlpCache mc;
        Matrix h = mlp_.forward(mixed, cache ? &mc : nullptr);
        const Vector gate = gate_.value.col(0).unaryExpr([](double u) { return std::tanh(u); });
        Matrix out = v;
        for (Eigen::Index c = 0; c < v.cols(); ++c) out.col(c) += gate(c) * h.col(c);
        if (cache) {
            cache->input = v;
            cache->mixed = std::move(mixed);
            cache->mlp = std::move(mc);
            cache->mlp_out = std::move(h);
        }
        return out;
    }

    /// Accumulates parameter gradients; returns d(loss)/dV.
    Matrix backward(const CalibratorCache& cache, const Matrix& upstream) {
        if (!cache.mlp.valid()) throw UsageError("calibrator backward without forward cache");
        Matrix d_h(upstream.rows(), upstream.cols());
        for (Eigen::Index c = 0; c < upstream.cols(); ++c) {
            const double t = std::tanh(gate_.value(c, 0));
            d_h.col(c) = t * upstream.col(c);
            gate_.grad(c, 0) += (1.0 - t * t) * upstream.col(c).dot(cache.mlp_out.col(c));
        }
        const Matrix d_mixed = mlp_.backward(cache.mlp, d_h);
        Matrix d_v = upstream;
        for (Eigen::Index c = 0; c < upstream.cols(); ++c) {
            const auto k = static_cast<std::size_t>(c);
            weights_[k].grad.noalias() += d_mixed.col(c) * cache.input.col(c).transpose();
            biases_[k].grad.col(0) += d_mixed.col(c);
            d_v.col(c).noalias() += weights_[k].value.transpose() * d_mixed.col(c);
        }
        return d_v;
    }

    ParamRefs params() {
        ParamRefs out;
        for (auto& w : weights_) out.push_back(&w);
        for (auto& b : biases_) out.push_back(&b);
        for (Param* p : mlp_.params()) out.push_back(p);
        out.push_back(&gate_);
        return out;
    }

    std::vector<const Param*> params() const {
        std::vector<const Param*> out;
        for (const auto& w : weights_) out.push_back(&w);
        for (const auto& b : biases_) out.push_back(&b);
        for (const Param* p : mlp_.params()) out.push_back(p);
        out.push_back(&gate_);
        return out;
    }

    Mlp& mlp() { return mlp_; }
    Param& gate() { return gate_; }
    Param& temporal_weight(std::size_t c) { return weights_.at(c); }
    Param& temporal_bias(std::size_t c) { return biases_.at(c); }
    const Mlp& mlp() const { return mlp_; }
    const Param& gate() const { return gate_; }
    const Param& temporal_weight(std::size_t c) const { return weights_.at(c); }
    const Param& temporal_bias(std::size_t c) const { return biases_.at(c); }

private:
    std::vector<Param> weights_;
    std::vector<Param> biases_;
    Mlp mlp_;
    Param gate_;
};

// ---------------------------------------------------------------------------

enum class ExpertRole { reliable, unreliable };

inline std::string to_string(ExpertRole r) {
    return r == ExpertRole::reliable ? "reliable" : "unreliable";
}

// raw: mean over samples of the masked squared-error sum.
// per_obs: mean over samples of the masked squared-error mean; samples with
// no observed target cell are left out.
enum class LossNorm { raw, per_obs };

// full_grad: gradients flow through the forecaster into the input
// calibrator. frozen: only the output calibrator adapts (for forecasters
// that cannot back-propagate).
enum class InputCali { full_grad, frozen };

struct AdaptOptions {
    std::size_t n_steps = 5;
    LossNorm loss_norm = LossNorm::per_obs;
    InputCali input_cali = InputCali::full_grad;
};

struct AdaptReport {
    std::vector<double> losses;  // loss before each step, then after the last
    bool aborted = false;

    double final_loss() const {
        return losses.empty() ? std::numeric_limits<double>::quiet_NaN() : losses.back();
    }
};

struct ExpertCache {
    CalibratorCache in;
    CalibratorCache out;
    Matrix calibrated_input;
};

/// Input calibrator in front of the forecaster, output calibrator behind it.
class Expert {
public:
    Expert(const GridSpec& grid, ExpertRole role, double lr, Rng& rng)
        : role_(role),
          lr_(lr),
          in_(static_cast<Eigen::Index>(grid.lookback_slots), static_cast<Eigen::Index>(grid.n_vars),
              rng, to_string(role) + ".in"),
          out_(static_cast<Eigen::Index>(grid.forecast_slots),
               static_cast<Eigen::Index>(grid.n_vars), rng, to_string(role) + ".out") {}

    ExpertRole role() const { return role_; }
    double learning_rate() const { return lr_; }
    CalibratorBlock& input_calibrator() { return in_; }
    CalibratorBlock& output_calibrator() { return out_; }
    const CalibratorBlock& input_calibrator() const { return in_; }
    const CalibratorBlock& output_calibrator() const { return out_; }

    /// out(f(T_x, in(V_x), M_x; Q)).
    Matrix forward(const SourceForecaster& f, const GriddedWindow& lookback,
                   const GriddedWindow& query, ExpertCache* cache = nullptr) const {
        Matrix v_in = in_.forward(lookback.values, cache ? &cache->in : nullptr);
        const Matrix raw = f.predict(v_in, lookback, query);
        if (cache) cache->calibrated_input = std::move(v_in);
        return out_.forward(raw, cache ? &cache->out : nullptr);
    }

    /// Mean loss over `indices` of the batch; accumulates gradients into the
    /// expert's parameters when `with_grad`.
    double loss(const SourceForecaster& f, const MaskedBatch& batch,
                std::span<const std::size_t> indices, LossNorm norm, bool with_grad,
                InputCali input_cali = InputCali::full_grad) {
        if (!batch.targets) throw UsageError("expert loss needs revealed targets");
        std::size_t counted = 0;
        for (std::size_t i : indices) {
            if (norm == LossNorm::raw || (*batch.targets)[i].observed() > 0.0) ++counted;
        }
        if (counted == 0) return 0.0;
        const double inv_count = 1.0 / static_cast<double>(counted);
        double total = 0.0;
        for (std::size_t i : indices) {
            const auto& target = (*batch.targets)[i];
            const double n_obs = target.observed();
            if (norm == LossNorm::per_obs && n_obs <= 0.0) continue;
            const double scale = (norm == LossNorm::per_obs ? 1.0 / n_obs : 1.0) * inv_count;
            ExpertCache cache;
            const Matrix pred = forward(f, batch.inputs[i], batch.queries[i], &cache);
            const Matrix err = (pred - target.values).cwiseProduct(target.mask);
            total += scale * err.squaredNorm();
            if (!with_grad) continue;
            const Matrix d_raw = out_.backward(cache.out, 2.0 * scale * err);
            if (input_cali == InputCali::full_grad && f.differentiable()) {
                const Matrix d_vin = f.backward_input(cache.calibrated_input, batch.inputs[i],
                                                      batch.queries[i], d_raw);
                in_.backward(cache.in, d_vin);
            }
        }
        return total;
    }

    /// A few full-batch Adam steps on the subset. A non-finite loss or
    /// gradient rolls every parameter back to its state before the call.
    AdaptReport adapt(const SourceForecaster& f, const MaskedBatch& batch,
                      std::span<const std::size_t> indices, const AdaptOptions& opt) {
        AdaptReport report;
        if (opt.n_steps == 0) return report;
        if (indices.empty()) throw UsageError("expert adaptation on an empty subset");
        const bool full = opt.input_cali == InputCali::full_grad && f.differentiable();
        ParamRefs trainable = full ? params() : out_.params();
        ParamSnapshot before(params());
        const AdamConfig adam{.lr = lr_};
        for (std::size_t step = 0; step < opt.n_steps; ++step) {
            zero_grads(params());
            const double l = loss(f, batch, indices, opt.loss_norm, true, opt.input_cali);
            if (!std::isfinite(l)) {
                before.restore();
                report.aborted = true;
                return report;
            }
            report.losses.push_back(l);
            try {
                adam_step(trainable, adam);
            } catch (const NumericError&) {
                before.restore();
                report.aborted = true;
                return report;
            }
        }
        zero_grads(params());
        report.losses.push_back(loss(f, batch, indices, opt.loss_norm, false));
        return report;
    }

    ParamRefs params() {
        ParamRefs out = in_.params();
        for (Param* p : out_.params()) out.push_back(p);
        return out;
    }

    std::vector<const Param*> params() const {
        std::vector<const Param*> out = in_.params();
        for (const Param* p : out_.params()) out.push_back(p);
        return out;
    }

    std::uint64_t parameter_checksum() const { return checksum(params()); }

    Checkpoint checkpoint(const GridSpec& grid) const {
        Checkpoint ck;
        ck.header = {{"component", "expert"}, {"role", to_string(role_)},
                     {"learning_rate", lr_}, {"grid", grid_to_json(grid)}};
        ck.add(params());
        return ck;
    }

    static Expert from_checkpoint(const Checkpoint& ck) {
        if (ck.header.value("component", "") != "expert") {
            throw StructuralError("checkpoint is not an expert");
        }
        const auto role_name = ck.header.at("role").get<std::string>();
        const ExpertRole role = role_name == "reliable" ? ExpertRole::reliable : ExpertRole::unreliable;
        Rng rng(0);
        Expert e(grid_from_json(ck.header.at("grid")), role,
                 ck.header.at("learning_rate").get<double>(), rng);
        ck.restore(e.params());
        return e;
    }

private:
    ExpertRole role_;
    double lr_;
    CalibratorBlock in_;
    CalibratorBlock out_;
};

}  // namespace undercali
