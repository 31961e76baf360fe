#pragma once

// The online loop. Each batch goes through an inference stage that only sees
// lookback windows and queries, then an adaptation stage that sees the
// revealed targets and updates experts and the uncertainty estimator for
// later batches.

#include <algorithm>
#include <charconv>
#include <cstring>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "undercali/arm.hpp"
#include "undercali/forecaster.hpp"
#include "undercali/gdc.hpp"
#include "undercali/imts.hpp"
#include "undercali/rng.hpp"
#include "undercali/uncertainty.hpp"

namespace undercali {

enum class Mode {
    full,
    frozen,
    single_expert_joint,
    single_expert_reliable,
    single_expert_unreliable,
    random_triggering,
    random_allocating,
    no_ue_single_joint,
};

inline const std::vector<Mode>& all_modes() {
    static const std::vector<Mode> modes{
        Mode::full,
        Mode::frozen,
        Mode::single_expert_joint,
        Mode::single_expert_reliable,
        Mode::single_expert_unreliable,
        Mode::random_triggering,
        Mode::random_allocating,
        Mode::no_ue_single_joint,
    };
    return modes;
}

inline std::string to_string(Mode m) {
    switch (m) {
        case Mode::full: return "full";
        case Mode::frozen: return "frozen";
        case Mode::single_expert_joint: return "single_expert_joint";
        case Mode::single_expert_reliable: return "single_expert_reliable";
        case Mode::single_expert_unreliable: return "single_expert_unreliable";
        case Mode::random_triggering: return "random_triggering";
        case Mode::random_allocating: return "random_allocating";
        case Mode::no_ue_single_joint: return "no_ue_single_joint";
    }
    return "unknown";
}

inline Mode mode_from_string(const std::string& s) {
    for (Mode m : all_modes()) {
        if (to_string(m) == s) return m;
    }
    throw ConfigError("unknown mode '" + s + "'");
}

// Which predictions the online uncertainty update scores and regresses on:
// the inference-stage ones, or the reliable path re-run after this batch's
// expert update.
enum class UeTarget { pre_update, post_update };

struct EngineConfig {
    Mode mode = Mode::full;
    double trigger_probability = 0.85;  // random_triggering only
    std::size_t inner_steps = 5;
    std::size_t batch_size = 16;
    double lr_reliable = 0.2;
    double lr_unreliable = 0.1;
    double lr_ue = 1e-3;
    ArmConfig arm;
    std::uint64_t seed = 0;
    LossNorm loss_norm = LossNorm::per_obs;
    InputCali input_cali = InputCali::full_grad;
    RangeMode range_mode = RangeMode::expanding;
    UeTarget ue_target = UeTarget::post_update;

    // Gaussian noise on uncertainty scores for batches
    // [noise_first_batch, noise_first_batch + noise_batches).
    double ue_noise_variance = 0.0;
    std::size_t noise_first_batch = 0;
    std::size_t noise_batches = 0;

    // Replaces the computed allocation threshold when set.
    std::optional<double> alloc_threshold_override;

    bool operator==(const EngineConfig&) const = default;

    void check() const {
        if (!(trigger_probability >= 0.0 && trigger_probability <= 1.0)) {
            throw ConfigError("trigger probability must lie in [0, 1]");
        }
        if (batch_size == 0) throw ConfigError("batch size must be positive");
        if (!(lr_reliable >= 0.0) || !(lr_unreliable >= 0.0) || !(lr_ue >= 0.0)) {
            throw ConfigError("learning rates must be non-negative");
        }
        if (!(arm.alpha_alloc > 0.0 && arm.alpha_alloc <= 1.0) ||
            !(arm.alpha_trig > 0.0 && arm.alpha_trig <= 1.0)) {
            throw ConfigError("EMA smoothing factors must lie in (0, 1]");
        }
        if (!(ue_noise_variance >= 0.0)) throw ConfigError("noise variance must be >= 0");
    }
};

struct ArmTelemetry {
    double mu_alloc = std::numeric_limits<double>::quiet_NaN();
    double sigma_alloc = std::numeric_limits<double>::quiet_NaN();
    double tau_alloc = std::numeric_limits<double>::quiet_NaN();
    double mu_trig = std::numeric_limits<double>::quiet_NaN();  // statistics of batches < t
    double sigma_trig = std::numeric_limits<double>::quiet_NaN();
    double tau_trig = std::numeric_limits<double>::quiet_NaN();
};

struct InferenceResult {
    std::vector<Matrix> predictions;  // final, after routing
    std::vector<Matrix> preliminary;  // reliable path for every sample
    std::vector<double> scores;       // empty when the mode has no estimator
    Partition routing;
    double tau_alloc = std::numeric_limits<double>::quiet_NaN();
};

struct BatchOutcome {
    std::size_t batch_index = 0;
    std::vector<Matrix> predictions;
    std::vector<double> scores;
    Partition routing;
    bool triggered = false;
    bool adaptation_skipped = false;
    MaskedErrorSums errors;
    BatchMoments score_moments{std::numeric_limits<double>::quiet_NaN(),
                               std::numeric_limits<double>::quiet_NaN()};
    ArmTelemetry arm;

    double mse() const {
        return errors.count > 0.0 ? errors.mse() : std::numeric_limits<double>::quiet_NaN();
    }
    double mae() const {
        return errors.count > 0.0 ? errors.mae() : std::numeric_limits<double>::quiet_NaN();
    }
};

/// Anything that consumes a stream batch by batch under the online protocol.
class OnlineAdapter {
public:
    virtual ~OnlineAdapter() = default;
    virtual BatchOutcome process_batch(const MaskedBatch& batch) = 0;
    virtual void set_adaptation_enabled(bool enabled) = 0;
};

class Engine final : public OnlineAdapter {
public:
    Engine(EngineConfig cfg, ForecasterPtr forecaster, UncertaintyEstimator ue)
        : cfg_(std::move(cfg)),
          f_(std::move(forecaster)),
          ue_(std::move(ue)),
          arm_(cfg_.arm),
          rng_(cfg_.seed),
          noise_rng_(cfg_.seed ^ 0x6E6F697365ULL),
          reliable_(make_expert(ExpertRole::reliable)),
          unreliable_(make_expert(ExpertRole::unreliable)) {
        cfg_.check();
        if (!f_) throw ConfigError("engine needs a source forecaster");
        if (!(ue_.grid() == f_->grid())) {
            throw ConfigError("uncertainty estimator and forecaster grids differ");
        }
    }

    const EngineConfig& config() const { return cfg_; }
    const SourceForecaster& forecaster() const { return *f_; }
    const UncertaintyEstimator& estimator() const { return ue_; }
    const Expert& reliable_expert() const { return reliable_; }
    const Expert& unreliable_expert() const { return unreliable_; }
    const ArmState& arm() const { return arm_; }
    std::size_t batches_seen() const { return batch_index_; }

    void set_adaptation_enabled(bool enabled) override { adaptation_enabled_ = enabled; }

    /// Inference stage. Only lookback windows and queries are visible here.
    InferenceResult infer(const std::vector<GriddedWindow>& inputs,
                          const std::vector<GriddedWindow>& queries) {
        if (inputs.size() != queries.size() || inputs.empty()) {
            throw ShapeError("inference needs equally many, and at least one, inputs and queries");
        }
        const std::size_t n = inputs.size();
        InferenceResult r;
        r.preliminary.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            r.preliminary.push_back(reliable_path(inputs[i], queries[i]));
        }
        r.predictions = r.preliminary;

        if (!uses_estimator()) {
            for (std::size_t i = 0; i < n; ++i) r.routing.reliable.push_back(i);
            return r;
        }

        r.scores.reserve(n);
        const bool noisy = cfg_.ue_noise_variance > 0.0 && batch_index_ >= cfg_.noise_first_batch &&
                           batch_index_ < cfg_.noise_first_batch + cfg_.noise_batches;
        const double noise_sd = std::sqrt(cfg_.ue_noise_variance);
        for (std::size_t i = 0; i < n; ++i) {
            double u = ue_.estimate(inputs[i], r.preliminary[i], queries[i].mask);
            if (noisy) u = std::clamp(u + noise_sd * noise_rng_.normal(), 0.0, 1.0);
            r.scores.push_back(u);
        }

        r.tau_alloc = arm_.allocation_threshold(r.scores);
        if (cfg_.alloc_threshold_override) r.tau_alloc = *cfg_.alloc_threshold_override;
        if (cfg_.mode == Mode::random_allocating) {
            for (std::size_t i = 0; i < n; ++i) {
                (rng_.bernoulli(0.5) ? r.routing.unreliable : r.routing.reliable).push_back(i);
            }
        } else {
            r.routing = route(r.scores, r.tau_alloc);
        }

        for (std::size_t i : r.routing.unreliable) {
            if (auto p = unreliable_path(inputs[i], queries[i])) r.predictions[i] = std::move(*p);
        }
        return r;
    }

    /// Adaptation stage, after the batch's predictions have been emitted.
    /// Returns whether adaptation fired.
    bool adapt(const MaskedBatch& batch, const InferenceResult& inf, bool* skipped = nullptr) {
        if (!batch.targets) throw UsageError("adaptation needs revealed targets");
        const auto& targets = *batch.targets;
        double observed = 0.0;
        for (const auto& t : targets) observed += t.observed();

        bool fire = false;
        if (uses_estimator()) {
            fire = trigger_now(inf.scores);
        } else {
            fire = cfg_.mode == Mode::no_ue_single_joint;
        }
        if (cfg_.mode == Mode::frozen || !adaptation_enabled_) fire = false;
        if (observed <= 0.0) {
            fire = false;
            if (skipped) *skipped = true;
        }

        if (fire) {
            auto evaluable = [&](const std::vector<std::size_t>& idx) {
                std::vector<std::size_t> out;
                for (std::size_t i : idx) {
                    if (targets[i].observed() > 0.0) out.push_back(i);
                }
                return out;
            };
            std::vector<std::size_t> all(batch.size());
            for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
            const auto b_r = evaluable(inf.routing.reliable);
            const auto b_ur = evaluable(inf.routing.unreliable);
            const auto b_all = evaluable(all);
            const AdaptOptions opt{cfg_.inner_steps, cfg_.loss_norm, cfg_.input_cali};

            switch (cfg_.mode) {
                case Mode::full:
                case Mode::random_triggering:
                case Mode::random_allocating:
                    if (!b_r.empty()) reliable_.adapt(*f_, batch, b_r, opt);
                    if (!b_ur.empty()) unreliable_.adapt(*f_, batch, b_ur, opt);
                    break;
                case Mode::single_expert_joint:
                case Mode::no_ue_single_joint:
                    if (!b_all.empty()) reliable_.adapt(*f_, batch, b_all, opt);
                    break;
                case Mode::single_expert_reliable:
                    if (!b_r.empty()) reliable_.adapt(*f_, batch, b_r, opt);
                    break;
                case Mode::single_expert_unreliable:
                    if (!b_ur.empty()) unreliable_.adapt(*f_, batch, b_ur, opt);
                    break;
                case Mode::frozen:
                    break;
            }
            if (uses_estimator()) update_estimator(batch, inf, b_r);
        }
        if (uses_estimator()) arm_.commit_trigger_stats(inf.scores);
        return fire;
    }

    BatchOutcome process_batch(const MaskedBatch& batch) override {
        batch.check();
        if (!batch.targets) throw UsageError("stream batches must carry (deferred) targets");
        BatchOutcome out;
        out.batch_index = batch_index_;

        const ArmTelemetry trig_before = trigger_telemetry();
        InferenceResult inf = infer(batch.inputs, batch.queries);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            out.errors.add(inf.predictions[i], (*batch.targets)[i]);
        }

        out.arm = trig_before;
        if (uses_estimator()) {
            out.score_moments = batch_moments(inf.scores);
            out.arm.mu_alloc = arm_.alloc_stats().mu;
            out.arm.sigma_alloc = arm_.alloc_stats().sigma();
            out.arm.tau_alloc = inf.tau_alloc;
        }
        out.triggered = adapt(batch, inf, &out.adaptation_skipped);

        out.predictions = std::move(inf.predictions);
        out.scores = std::move(inf.scores);
        out.routing = std::move(inf.routing);
        ++batch_index_;
        return out;
    }

private:
    Expert make_expert(ExpertRole role) {
        Rng init = Rng(cfg_.seed).fork(role == ExpertRole::reliable ? 1 : 2);
        return Expert(f_->grid(), role,
                      role == ExpertRole::reliable ? cfg_.lr_reliable : cfg_.lr_unreliable, init);
    }

    bool uses_estimator() const { return cfg_.mode != Mode::no_ue_single_joint; }

    Matrix reliable_path(const GriddedWindow& in, const GriddedWindow& q) const {
        if (cfg_.mode == Mode::single_expert_unreliable) return f_->predict(in, q);
        return reliable_.forward(*f_, in, q);
    }

    // Nothing when the unreliable path coincides with the reliable one.
    std::optional<Matrix> unreliable_path(const GriddedWindow& in, const GriddedWindow& q) const {
        switch (cfg_.mode) {
            case Mode::single_expert_joint:
            case Mode::no_ue_single_joint:
                return std::nullopt;
            case Mode::single_expert_reliable:
                return f_->predict(in, q);
            default:
                return unreliable_.forward(*f_, in, q);
        }
    }

    bool trigger_now(const std::vector<double>& scores) {
        if (cfg_.mode == Mode::random_triggering) return rng_.bernoulli(cfg_.trigger_probability);
        return arm_.trigger_decision(scores);
    }

    ArmTelemetry trigger_telemetry() const {
        ArmTelemetry t;
        if (arm_.trig_stats().seen_first) {
            t.mu_trig = arm_.trig_stats().mu;
            t.sigma_trig = arm_.trig_stats().sigma();
            t.tau_trig = arm_.trigger_threshold();
        }
        return t;
    }

    void update_estimator(const MaskedBatch& batch, const InferenceResult& inf,
                          const std::vector<std::size_t>& b_r) {
        if (b_r.empty()) return;
        const auto& targets = *batch.targets;
        Matrix features(static_cast<Eigen::Index>(b_r.size()), UncertaintyEstimator::feature_width(ue_.grid()));
        Vector u(static_cast<Eigen::Index>(b_r.size()));
        for (std::size_t k = 0; k < b_r.size(); ++k) {
            const std::size_t i = b_r[k];
            const Matrix pred = cfg_.ue_target == UeTarget::post_update
                                    ? reliable_path(batch.inputs[i], batch.queries[i])
                                    : inf.preliminary[i];
            const auto row = static_cast<Eigen::Index>(k);
            features.row(row) = ue_.featurize(batch.inputs[i], pred, batch.queries[i].mask);
            u(row) = uncertainty_target(ue_.range(), pred, targets[i], cfg_.range_mode);
        }
        ue_.update_online(features, u, cfg_.inner_steps, cfg_.lr_ue);
    }

    EngineConfig cfg_;
    ForecasterPtr f_;
    UncertaintyEstimator ue_;
    ArmState arm_;
    Rng rng_;
    Rng noise_rng_;
    Expert reliable_;
    Expert unreliable_;
    std::size_t batch_index_ = 0;
    bool adaptation_enabled_ = true;
};

// ---------------------------------------------------------------------------
// Streams and reports

/// Consecutive batches of `batch_size` samples in stream order; the last
/// batch may be shorter.
inline std::vector<MaskedBatch> make_online_batches(const std::vector<GriddedSample>& samples,
                                                    std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    std::vector<MaskedBatch> out;
    for (std::size_t b = 0; b < samples.size(); b += batch_size) {
        out.push_back(make_batch(samples, b, std::min(samples.size(), b + batch_size)));
    }
    return out;
}

struct RunReport {
    std::string mode;
    std::uint64_t seed = 0;
    std::vector<BatchOutcome> batches;
    MaskedErrorSums errors;
    std::size_t n_triggered = 0;
    std::uint64_t forecaster_checksum_before = 0;
    std::uint64_t forecaster_checksum_after = 0;

    double mse() const { return errors.mse(); }
    double mae() const { return errors.mae(); }
    double update_frequency() const {
        return batches.empty() ? 0.0
                               : static_cast<double>(n_triggered) / static_cast<double>(batches.size());
    }
};

inline RunReport run_stream(const EngineConfig& cfg, const std::vector<MaskedBatch>& stream,
                            const ForecasterPtr& f, const UncertaintyEstimator& ue) {
    RunReport report;
    report.mode = to_string(cfg.mode);
    report.seed = cfg.seed;
    report.forecaster_checksum_before = f->parameter_checksum();
    Engine engine(cfg, f, ue);
    for (const auto& batch : stream) {
        BatchOutcome o = engine.process_batch(batch);
        report.errors += o.errors;
        report.n_triggered += o.triggered ? 1 : 0;
        report.batches.push_back(std::move(o));
    }
    report.forecaster_checksum_after = f->parameter_checksum();
    return report;
}

inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline constexpr const char* kBatchCsvHeader =
    "batch_index,n_samples,mse,mae,mean_uncertainty,triggered,n_reliable,n_unreliable,"
    "var_uncertainty,n_obs,mu_alloc,sigma_alloc,tau_alloc,mu_trig,sigma_trig,tau_trig";

inline void write_batch_csv(std::ostream& os, const RunReport& r) {
    os << kBatchCsvHeader << '\n';
    for (const auto& b : r.batches) {
        os << b.batch_index << ',' << b.predictions.size() << ',' << format_double(b.mse()) << ','
           << format_double(b.mae()) << ',' << format_double(b.score_moments.mean) << ','
           << (b.triggered ? 1 : 0) << ',' << b.routing.reliable.size() << ','
           << b.routing.unreliable.size() << ',' << format_double(b.score_moments.var) << ','
           << format_double(b.errors.count) << ',' << format_double(b.arm.mu_alloc) << ','
           << format_double(b.arm.sigma_alloc) << ',' << format_double(b.arm.tau_alloc) << ','
           << format_double(b.arm.mu_trig) << ',' << format_double(b.arm.sigma_trig) << ','
           << format_double(b.arm.tau_trig) << '\n';
    }
}

inline nlohmann::json report_json(const RunReport& r) {
    return {{"mode", r.mode},
            {"seeds", {r.seed}},
            {"mse", r.mse()},
            {"mae", r.mae()},
            {"update_frequency", r.update_frequency()},
            {"n_batches", r.batches.size()}};
}

// ---------------------------------------------------------------------------
// Protocol checks

using AdapterFactory = std::function<std::unique_ptr<OnlineAdapter>()>;

struct CausalityReport {
    bool prefix_identical = true;     // truncated stream reproduces the prefix
    bool metrics_before_update = true;  // batch t unaffected by its own adaptation
    std::string detail;
    bool passed() const { return prefix_identical && metrics_before_update; }
};

inline bool same_predictions(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols()) return false;
        if (std::memcmp(a[i].data(), b[i].data(), sizeof(double) * static_cast<std::size_t>(a[i].size())) != 0) {
            return false;
        }
    }
    return true;
}

/// Runs the stream three ways: in full; truncated after batch t; and with
/// adaptation switched off for batch t only. Predictions for batches <= t
/// must agree bit for bit across all three.
inline CausalityReport causality_audit(const AdapterFactory& make,
                                       const std::vector<MaskedBatch>& stream, std::size_t t) {
    if (t >= stream.size()) throw ConfigError("audit batch index beyond the stream");
    CausalityReport rep;

    std::vector<std::vector<Matrix>> full;
    {
        auto a = make();
        for (const auto& b : stream) full.push_back(a->process_batch(b).predictions);
    }
    {
        auto a = make();
        for (std::size_t k = 0; k <= t; ++k) {
            if (!same_predictions(a->process_batch(stream[k]).predictions, full[k])) {
                rep.prefix_identical = false;
                rep.detail += "truncated run differs at batch " + std::to_string(k) + "; ";
            }
        }
    }
    {
        auto a = make();
        for (std::size_t k = 0; k < t; ++k) a->process_batch(stream[k]);
        a->set_adaptation_enabled(false);
        if (!same_predictions(a->process_batch(stream[t]).predictions, full[t])) {
            rep.metrics_before_update = false;
            rep.detail += "batch " + std::to_string(t) + " predictions depend on its own targets; ";
        }
    }
    return rep;
}

struct NoiseProbeReport {
    std::vector<double> clean_mse;
    std::vector<double> noisy_mse;
    std::vector<double> rel_delta;  // (noisy - clean) / clean per batch
    double min_score = 1.0;
    double max_score = 0.0;
};

/// Clean run against a run whose uncertainty scores get N(0, variance) noise
/// (clamped to [0, 1]) for `noise_batches` batches starting at `first_batch`.
inline NoiseProbeReport ue_noise_probe(EngineConfig cfg, const std::vector<MaskedBatch>& stream,
                                       const ForecasterPtr& f, const UncertaintyEstimator& ue,
                                       double variance, std::size_t first_batch,
                                       std::size_t noise_batches = 1) {
    cfg.ue_noise_variance = 0.0;
    const RunReport clean = run_stream(cfg, stream, f, ue);
    cfg.ue_noise_variance = variance;
    cfg.noise_first_batch = first_batch;
    cfg.noise_batches = noise_batches;
    const RunReport noisy = run_stream(cfg, stream, f, ue);

    NoiseProbeReport rep;
    for (std::size_t k = 0; k < stream.size(); ++k) {
        const double c = clean.batches[k].mse();
        const double n = noisy.batches[k].mse();
        rep.clean_mse.push_back(c);
        rep.noisy_mse.push_back(n);
        rep.rel_delta.push_back((n - c) / c);
        for (double s : noisy.batches[k].scores) {
            rep.min_score = std::min(rep.min_score, s);
            rep.max_score = std::max(rep.max_score, s);
        }
    }
    return rep;
}

}  // namespace undercali
