#pragma once

// Minimal differentiable kernel: parameters with gradient and Adam buffers,
// dense layers, a row-batched MLP with exact hand-written backward, Adam and
// a central-difference gradient checker. Everything is f64.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "undercali/error.hpp"
#include "undercali/rng.hpp"

namespace undercali {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Param {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix adam_m;
    Matrix adam_v;
    std::int64_t step_count = 0;

    Param() = default;
    Param(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) { reset_buffers(); }

    void reset_buffers() {
        grad = Matrix::Zero(value.rows(), value.cols());
        adam_m = Matrix::Zero(value.rows(), value.cols());
        adam_v = Matrix::Zero(value.rows(), value.cols());
        step_count = 0;
    }

    void zero_grad() { grad.setZero(); }
    Eigen::Index size() const { return value.size(); }
};

using ParamRefs = std::vector<Param*>;

/// FNV-1a over the raw bytes of every parameter value, in order.
inline std::uint64_t checksum(std::span<const Param* const> params) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (const Param* p : params) {
        mix(p->value.data(), static_cast<std::size_t>(p->value.size()) * sizeof(double));
    }
    return h;
}

inline std::uint64_t checksum(const ParamRefs& params) {
    std::vector<const Param*> c(params.begin(), params.end());
    return checksum(std::span<const Param* const>(c));
}

enum class Activation { linear, tanh, relu };

// ---------------------------------------------------------------------------
// MLP over row batches: input N x in, output N x out.

struct DenseLayer {
    Param weight;  // out x in
    Param bias;    // out x 1
    Activation act = Activation::linear;

    Eigen::Index in_dim() const { return weight.value.cols(); }
    Eigen::Index out_dim() const { return weight.value.rows(); }
};

struct MlpCache {
    std::vector<Matrix> inputs;   // input to each layer
    std::vector<Matrix> outputs;  // post-activation output of each layer
    bool valid() const { return !inputs.empty(); }
};

class Mlp {
public:
    Mlp() = default;

    /// widths = {in, hidden..., out}. Hidden layers use `hidden`, the last
    /// layer is linear. Weights are Glorot-uniform from `rng`, biases zero.
    Mlp(const std::vector<Eigen::Index>& widths, Activation hidden, Rng& rng,
        const std::string& prefix = "mlp") {
        if (widths.size() < 2) throw ShapeError("an MLP needs at least input and output widths");
        for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
            const Eigen::Index fan_in = widths[i];
            const Eigen::Index fan_out = widths[i + 1];
            const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            Matrix w(fan_out, fan_in);
            for (Eigen::Index r = 0; r < w.rows(); ++r) {
                for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-limit, limit);
            }
            DenseLayer layer;
            const std::string tag = prefix + ".l" + std::to_string(i);
            layer.weight = Param(tag + ".weight", std::move(w));
            layer.bias = Param(tag + ".bias", Matrix::Zero(fan_out, 1));
            layer.act = (i + 2 == widths.size()) ? Activation::linear : hidden;
            layers_.push_back(std::move(layer));
        }
    }

    std::vector<DenseLayer>& layers() { return layers_; }
    const std::vector<DenseLayer>& layers() const { return layers_; }

    Eigen::Index in_dim() const { return layers_.front().in_dim(); }
    Eigen::Index out_dim() const { return layers_.back().out_dim(); }

    void zero_output_layer() {
        layers_.back().weight.value.setZero();
        layers_.back().bias.value.setZero();
    }

    ParamRefs params() {
        ParamRefs out;
        for (auto& l : layers_) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
        return out;
    }

    std::vector<const Param*> params() const {
        std::vector<const Param*> out;
        for (const auto& l : layers_) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
        return out;
    }

    Matrix forward(const Matrix& x, MlpCache* cache = nullptr) const {
        if (x.cols() != in_dim()) {
            throw ShapeError("MLP input width " + std::to_string(x.cols()) + ", expected " +
                             std::to_string(in_dim()));
        }
        if (cache) {
            cache->inputs.clear();
            cache->outputs.clear();
        }
        Matrix h = x;
        for (const auto& l : layers_) {
            Matrix z = h * l.weight.value.transpose();
            z.rowwise() += l.bias.value.col(0).transpose();
            apply(l.act, z);
            if (cache) {
                cache->inputs.push_back(std::move(h));
                cache->outputs.push_back(z);
            }
            h = std::move(z);
        }
        return h;
    }

    /// Accumulates parameter gradients and returns d(loss)/d(input).
    Matrix backward(const MlpCache& cache, const Matrix& upstream) {
        if (!cache.valid() || cache.inputs.size() != layers_.size()) {
            throw UsageError("MLP backward called without a matching forward cache");
        }
        Matrix g = upstream;
        for (std::size_t i = layers_.size(); i-- > 0;) {
            auto& l = layers_[i];
            const Matrix& out = cache.outputs[i];
            if (g.rows() != out.rows() || g.cols() != out.cols()) {
                throw ShapeError("upstream gradient shape mismatch");
            }
            switch (l.act) {
                case Activation::linear:
                    break;
                case Activation::tanh:
                    g.array() *= 1.0 - out.array().square();
                    break;
                case Activation::relu:
                    g.array() *= (out.array() > 0.0).cast<double>();
                    break;
            }
            l.weight.grad.noalias() += g.transpose() * cache.inputs[i];
            l.bias.grad.col(0) += g.colwise().sum().transpose();
            g = g * l.weight.value;
        }
        return g;
    }

private:
    static void apply(Activation act, Matrix& z) {
        switch (act) {
            case Activation::linear:
                break;
            case Activation::tanh:
                z = z.unaryExpr([](double v) { return std::tanh(v); });
                break;
            case Activation::relu:
                z = z.cwiseMax(0.0);
                break;
        }
    }

    std::vector<DenseLayer> layers_;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One Adam step with bias correction over every parameter; gradients are
/// zeroed afterwards. Throws NumericError naming the first parameter with a
/// non-finite gradient, before any parameter is touched.
inline void adam_step(const ParamRefs& params, const AdamConfig& cfg) {
    for (const Param* p : params) {
        if (!p->grad.allFinite()) throw NumericError("non-finite gradient in " + p->name);
    }
    for (Param* p : params) {
        ++p->step_count;
        const auto t = static_cast<double>(p->step_count);
        p->adam_m = cfg.beta1 * p->adam_m + (1.0 - cfg.beta1) * p->grad;
        p->adam_v = cfg.beta2 * p->adam_v + (1.0 - cfg.beta2) * p->grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(cfg.beta1, t);
        const double c2 = 1.0 - std::pow(cfg.beta2, t);
        p->value.array() -= cfg.lr * (p->adam_m.array() / c1) /
                            ((p->adam_v.array() / c2).sqrt() + cfg.eps);
        p->zero_grad();
    }
}

inline void zero_grads(const ParamRefs& params) {
    for (Param* p : params) p->zero_grad();
}

/// Full copy of parameter values and optimizer state, for roll-back.
class ParamSnapshot {
public:
    explicit ParamSnapshot(const ParamRefs& params) : params_(params) {
        for (const Param* p : params) saved_.push_back(*p);
    }
    void restore() const {
        for (std::size_t i = 0; i < params_.size(); ++i) *params_[i] = saved_[i];
    }

private:
    ParamRefs params_;
    std::vector<Param> saved_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    Eigen::Index worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t n_coords = 0;
};

// Relative error is |a - n| / max(|a|, |n|, floor). The floor is the larger
// of an absolute minimum and a fraction of the largest analytic gradient in
// the check, so coordinates many orders below the gradient scale are judged
// on absolute error rather than on finite-difference round-off.
inline constexpr double kGradCheckFloor = 1e-6;
inline constexpr double kGradCheckScaleFloor = 1e-3;

/// Central differences with step h on every coordinate of `params`.
/// `loss` evaluates the scalar objective at the current values;
/// `accumulate` adds the analytic gradient into the params' grad buffers.
inline GradCheckReport grad_check(const std::function<double()>& loss,
                                  const std::function<void()>& accumulate, const ParamRefs& params,
                                  double h = 1e-5) {
    zero_grads(params);
    accumulate();
    std::vector<Matrix> analytic;
    double scale = 0.0;
    for (const Param* p : params) {
        analytic.push_back(p->grad);
        if (p->grad.size() > 0) scale = std::max(scale, p->grad.cwiseAbs().maxCoeff());
    }
    zero_grads(params);
    const double floor = std::max(kGradCheckFloor, kGradCheckScaleFloor * scale);

    GradCheckReport report;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Param* p = params[k];
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            double& x = p->value.data()[i];
            const double saved = x;
            x = saved + h;
            const double up = loss();
            x = saved - h;
            const double down = loss();
            x = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[k].data()[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            const double rel = std::abs(a - numeric) / denom;
            ++report.n_coords;
            if (rel > report.max_rel_error || report.worst_index < 0) {
                report.max_rel_error = rel;
                report.worst_param = p->name;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace undercali
