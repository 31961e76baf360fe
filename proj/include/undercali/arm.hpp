#pragma once

// Adaptive routing: EMA statistics of uncertainty scores, the allocation
// threshold that splits a batch between the two experts, and the trigger
// threshold that decides whether a batch adapts anything at all.

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "undercali/error.hpp"

namespace undercali {

struct BatchMoments {
    double mean = 0.0;
    double var = 0.0;  // population variance; 0 for a single score
};

inline BatchMoments batch_moments(std::span<const double> scores) {
    if (scores.empty()) throw UsageError("empty score batch");
    double sum = 0.0;
    for (double s : scores) sum += s;
    const double mean = sum / static_cast<double>(scores.size());
    double ss = 0.0;
    for (double s : scores) ss += (s - mean) * (s - mean);
    return {mean, ss / static_cast<double>(scores.size())};
}

struct EmaStats {
    double alpha = 1.0;
    double mu = 0.0;
    double var = 0.0;
    bool seen_first = false;

    explicit EmaStats(double a = 1.0) : alpha(a) {}

    void update(double batch_mean, double batch_var) {
        if (!std::isfinite(batch_mean) || !std::isfinite(batch_var)) {
            throw NumericError("non-finite batch statistics");
        }
        if (!seen_first) {
            mu = batch_mean;
            var = batch_var;
            seen_first = true;
            return;
        }
        mu = (1.0 - alpha) * mu + alpha * batch_mean;
        var = (1.0 - alpha) * var + alpha * batch_var;
    }

    double sigma() const { return std::sqrt(var); }
    double threshold(double kappa) const { return mu + kappa * sigma(); }
};

struct ArmConfig {
    double alpha_alloc = 0.75;
    double kappa_alloc = 0.25;
    double alpha_trig = 0.25;
    double kappa_trig = 0.75;

    bool operator==(const ArmConfig&) const = default;
};

struct Partition {
    std::vector<std::size_t> reliable;
    std::vector<std::size_t> unreliable;
};

/// Scores strictly below the threshold are reliable; ties go unreliable.
inline Partition route(std::span<const double> scores, double tau_alloc) {
    Partition p;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        (scores[i] < tau_alloc ? p.reliable : p.unreliable).push_back(i);
    }
    return p;
}

class ArmState {
public:
    explicit ArmState(const ArmConfig& cfg = {})
        : alloc_(cfg.alpha_alloc), trig_(cfg.alpha_trig), cfg_(cfg) {}

    /// Folds the current batch into the allocation statistics first, then
    /// returns mu_alloc + kappa_alloc * sigma_alloc.
    double allocation_threshold(std::span<const double> scores) {
        const auto m = batch_moments(scores);
        alloc_.update(m.mean, m.var);
        last_alloc_threshold_ = alloc_.threshold(cfg_.kappa_alloc);
        return last_alloc_threshold_;
    }

    /// Threshold from the statistics of batches up to t-1. Undefined (NaN)
    /// before the first commit.
    double trigger_threshold() const {
        return trig_.seen_first ? trig_.threshold(cfg_.kappa_trig)
                                : std::numeric_limits<double>::quiet_NaN();
    }

    /// Whether the batch mean exceeds the trigger threshold. Does not touch
    /// the statistics; the first batch always triggers.
    bool trigger_decision(std::span<const double> scores) const {
        const auto m = batch_moments(scores);
        if (!trig_.seen_first) return true;
        return m.mean > trigger_threshold();
    }

    /// Fold the batch into the trigger statistics; call after adaptation,
    /// whether or not it fired.
    void commit_trigger_stats(std::span<const double> scores) {
        const auto m = batch_moments(scores);
        trig_.update(m.mean, m.var);
    }

    const EmaStats& alloc_stats() const { return alloc_; }
    const EmaStats& trig_stats() const { return trig_; }
    const ArmConfig& config() const { return cfg_; }
    double last_alloc_threshold() const { return last_alloc_threshold_; }

private:
    EmaStats alloc_;
    EmaStats trig_;
    ArmConfig cfg_;
    double last_alloc_threshold_ = std::numeric_limits<double>::quiet_NaN();
};

/// Trigger decisions obtained by replaying recorded per-batch score moments
/// through fresh trigger statistics.
inline std::vector<bool> replay_triggers(std::span<const BatchMoments> batches, double alpha_trig,
                                         double kappa_trig) {
    EmaStats trig(alpha_trig);
    std::vector<bool> fired;
    fired.reserve(batches.size());
    for (const auto& m : batches) {
        fired.push_back(!trig.seen_first || m.mean > trig.threshold(kappa_trig));
        trig.update(m.mean, m.var);
    }
    return fired;
}

}  // namespace undercali
