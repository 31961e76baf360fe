#pragma once

// Finite-difference checks of every hand-written backward pass: a single
// calibrator block, the expert loss through the linear forecaster, and the
// estimator's L1 loss.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "undercali/diffkit.hpp"
#include "undercali/forecaster.hpp"
#include "undercali/gdc.hpp"
#include "undercali/imts.hpp"
#include "undercali/rng.hpp"
#include "undercali/uncertainty.hpp"

namespace undercali {

inline constexpr double kGradCheckTolerance = 1e-5;

struct GradCheckCase {
    std::string name;
    std::function<GradCheckReport()> run;
};

struct GradCheckOutcome {
    std::string name;
    GradCheckReport report;
    bool passed = false;
};

inline void randomize(const ParamRefs& ps, Rng& rng, double scale) {
    for (Param* p : ps) {
        p->value = p->value.unaryExpr([&](double) { return scale * rng.normal(); });
    }
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = scale * rng.normal();
    return m;
}

inline Matrix random_mask(Eigen::Index r, Eigen::Index c, Rng& rng, double keep = 0.7) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.bernoulli(keep) ? 1.0 : 0.0;
    m(0) = 1.0;
    return m;
}

inline GriddedWindow random_window(Eigen::Index len, Eigen::Index vars, Rng& rng) {
    GriddedWindow w;
    w.mask = random_mask(len, vars, rng);
    w.values = random_matrix(len, vars, rng).cwiseProduct(w.mask);
    for (Eigen::Index k = 0; k < len; ++k) w.slot_times.push_back(static_cast<double>(k));
    return w;
}

inline std::vector<GriddedSample> random_gridded_samples(const GridSpec& g, std::size_t n, Rng& rng) {
    std::vector<GriddedSample> out;
    const auto l_in = static_cast<Eigen::Index>(g.lookback_slots);
    const auto l_out = static_cast<Eigen::Index>(g.forecast_slots);
    const auto c = static_cast<Eigen::Index>(g.n_vars);
    for (std::size_t i = 0; i < n; ++i) {
        GriddedSample s;
        s.lookback = random_window(l_in, c, rng);
        s.target = random_window(l_out, c, rng);
        s.query = s.target;
        s.query.values.setZero();
        out.push_back(std::move(s));
    }
    return out;
}

inline GradCheckCase calibrator_gradcheck_case(std::uint64_t seed) {
    return {"calibrator", [seed] {
                Rng rng(seed);
                auto block = std::make_shared<CalibratorBlock>(5, 3, rng);
                randomize(block->params(), rng, 0.5);
                const Matrix v = random_matrix(5, 3, rng);
                const Matrix w = random_matrix(5, 3, rng);
                return grad_check([=] { return block->forward(v).cwiseProduct(w).sum(); },
                                  [=] {
                                      CalibratorCache cache;
                                      block->forward(v, &cache);
                                      block->backward(cache, w);
                                  },
                                  block->params());
            }};
}

inline GradCheckCase expert_gradcheck_case(std::uint64_t seed) {
    return {"expert_through_forecaster", [seed] {
                Rng rng(seed);
                const GridSpec g{6, 3, 2, 6.0, 3.0};
                auto f = std::make_shared<LinearGridForecaster>(g);
                randomize(f->params(), rng, 0.3);
                auto expert = std::make_shared<Expert>(g, ExpertRole::reliable, 1e-3, rng);
                randomize(expert->params(), rng, 0.3);
                auto batch = std::make_shared<MaskedBatch>(make_batch(random_gridded_samples(g, 4, rng), 0, 4));
                const std::vector<std::size_t> idx{0, 1, 2, 3};
                return grad_check(
                    [=] { return expert->loss(*f, *batch, idx, LossNorm::per_obs, false); },
                    [=] { expert->loss(*f, *batch, idx, LossNorm::per_obs, true); }, expert->params());
            }};
}

inline GradCheckCase ue_gradcheck_case(std::uint64_t seed) {
    return {"uncertainty_estimator", [seed] {
                Rng rng(seed);
                const GridSpec g{4, 2, 2, 4.0, 2.0};
                auto ue = std::make_shared<UncertaintyEstimator>(g, rng);
                const auto f_width = UncertaintyEstimator::feature_width(g);
                auto x = std::make_shared<Matrix>(random_matrix(6, f_width, rng));
                const Vector s = ue->estimate_batch(*x);
                // Targets kept a quarter away from the prediction, clear of the |.| kink.
                auto u = std::make_shared<Vector>(
                    s.unaryExpr([](double v) { return v > 0.5 ? v - 0.25 : v + 0.25; }));
                return grad_check([=] { return ue->l1_loss(*x, *u, false); },
                                  [=] { ue->l1_loss(*x, *u, true); }, ue->params());
            }};
}

inline std::vector<GradCheckCase> standard_gradcheck_cases(std::uint64_t seed = 7) {
    return {calibrator_gradcheck_case(seed), expert_gradcheck_case(seed + 1),
            ue_gradcheck_case(seed + 2)};
}

inline std::vector<GradCheckOutcome> run_gradchecks(const std::vector<GradCheckCase>& cases,
                                                    double tolerance = kGradCheckTolerance) {
    std::vector<GradCheckOutcome> out;
    for (const auto& c : cases) {
        GradCheckOutcome o{c.name, c.run(), false};
        o.passed = o.report.max_rel_error < tolerance;
        out.push_back(std::move(o));
    }
    return out;
}

}  // namespace undercali
