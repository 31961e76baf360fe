// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// hard check fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "undercali/arm.hpp"
#include "undercali/engine.hpp"
#include "undercali/gdc.hpp"
#include "undercali/gradcheck_suite.hpp"
#include "undercali/pipeline.hpp"

using namespace undercali;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = true;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    return buf;
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

double g_setup_seconds = 0.0;

const std::vector<Experiment>& experiments() {
    static const std::vector<Experiment> ex = [] {
        const auto t0 = Clock::now();
        std::vector<Experiment> out;
        for (auto s : kSeeds) out.push_back(prepare_reference_experiment(s));
        g_setup_seconds = seconds_since(t0);
        return out;
    }();
    return ex;
}

RunReport run_mode(const Experiment& e, Mode m, std::uint64_t seed) {
    EngineConfig c;
    c.mode = m;
    c.seed = seed;
    return run_stream(c, e.stream, e.models.forecaster, *e.models.ue);
}

// ---------------------------------------------------------------------------

Verdict identity_at_init() {
    const auto t0 = Clock::now();
    Rng rng(101);
    double worst = 0.0;
    for (int shape = 0; shape < 10; ++shape) {
        const auto L = static_cast<Eigen::Index>(1 + rng.below(24));
        const auto C = static_cast<Eigen::Index>(1 + rng.below(8));
        CalibratorBlock b(L, C, rng);
        for (int i = 0; i < 100; ++i) {
            const Matrix v = random_matrix(L, C, rng, 10.0);
            worst = std::max(worst, (b.forward(v) - v).cwiseAbs().maxCoeff());
        }
    }
    const double secs = seconds_since(t0);
    return {worst == 0.0 && secs < 5.0,
            "max |out - in| = " + fmt(worst) + " over 1000 inputs, " + fmt(secs, 2) + " s"};
}

Verdict gradient_exactness() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::string where;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        for (const auto& o : run_gradchecks(standard_gradcheck_cases(seed * 3))) {
            if (o.report.max_rel_error > worst) {
                worst = o.report.max_rel_error;
                where = o.name + "/" + o.report.worst_param;
            }
        }
    }
    const double secs = seconds_since(t0);
    return {worst < kGradCheckTolerance && secs < 30.0,
            "max rel error " + fmt(worst) + " (" + where + "), " + fmt(secs, 2) + " s"};
}

Verdict ema_oracle() {
    Rng rng(303);
    double worst = 0.0;
    for (int seq = 0; seq < 100; ++seq) {
        const ArmConfig cfg{.alpha_alloc = rng.uniform(0.05, 1.0), .kappa_alloc = rng.uniform(0.0, 3.0),
                            .alpha_trig = rng.uniform(0.05, 1.0), .kappa_trig = rng.uniform(0.0, 3.0)};
        ArmState arm(cfg);
        double mu_a = 0, var_a = 0, mu_t = 0, var_t = 0;
        const int len = 1 + static_cast<int>(rng.below(40));
        for (int t = 0; t < len; ++t) {
            std::vector<double> s(1 + rng.below(32));
            for (auto& x : s) x = rng.uniform();
            long double sum = 0;
            for (double x : s) sum += x;
            const double m = static_cast<double>(sum / s.size());
            long double ss = 0;
            for (double x : s) ss += (x - m) * (x - m);
            const double v = static_cast<double>(ss / s.size());

            if (t > 0) {
                const double tau_t = mu_t + cfg.kappa_trig * std::sqrt(var_t);
                worst = std::max(worst, std::abs(arm.trigger_threshold() - tau_t));
            }
            mu_a = t == 0 ? m : (1 - cfg.alpha_alloc) * mu_a + cfg.alpha_alloc * m;
            var_a = t == 0 ? v : (1 - cfg.alpha_alloc) * var_a + cfg.alpha_alloc * v;
            const double tau_a = arm.allocation_threshold(s);
            worst = std::max(worst, std::abs(tau_a - (mu_a + cfg.kappa_alloc * std::sqrt(var_a))));
            worst = std::max(worst, std::abs(arm.alloc_stats().mu - mu_a));
            worst = std::max(worst, std::abs(arm.alloc_stats().var - var_a));
            arm.commit_trigger_stats(s);
            mu_t = t == 0 ? m : (1 - cfg.alpha_trig) * mu_t + cfg.alpha_trig * m;
            var_t = t == 0 ? v : (1 - cfg.alpha_trig) * var_t + cfg.alpha_trig * v;
            worst = std::max(worst, std::abs(arm.trig_stats().mu - mu_t));
            worst = std::max(worst, std::abs(arm.trig_stats().var - var_t));
        }
    }
    return {worst <= 1e-12, "max deviation " + fmt(worst) + " over 100 sequences"};
}

Verdict routing_partition() {
    Rng rng(404);
    std::size_t bad_partition = 0, bad_boundary = 0, bad_trigger = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<double> s(1 + rng.below(32));
        for (auto& x : s) x = rng.uniform();
        const double tau = rng.bernoulli(0.3) ? s[rng.below(s.size())] : rng.uniform();
        const auto p = route(s, tau);
        std::vector<int> seen(s.size(), 0);
        for (auto i : p.reliable) {
            ++seen[i];
            if (!(s[i] < tau)) ++bad_boundary;
        }
        for (auto i : p.unreliable) {
            ++seen[i];
            if (s[i] < tau) ++bad_boundary;
        }
        for (int c : seen) bad_partition += c != 1;

        ArmState arm;
        arm.commit_trigger_stats(s);
        const double tt = arm.trigger_threshold();
        if (arm.trigger_decision(std::vector<double>(4, tt))) ++bad_trigger;
        if (!arm.trigger_decision(std::vector<double>(4, std::nextafter(tt, 2.0)))) ++bad_trigger;
    }
    const bool ok = bad_partition == 0 && bad_boundary == 0 && bad_trigger == 0;
    return {ok, "10000 pairs: " + std::to_string(bad_partition) + " partition, " +
                    std::to_string(bad_boundary) + " boundary, " + std::to_string(bad_trigger) +
                    " trigger violations"};
}

class LeakyAdapter final : public OnlineAdapter {
public:
    BatchOutcome process_batch(const MaskedBatch& batch) override {
        if (enabled_) {
            double s = 0.0, n = 0.0;
            for (const auto& t : *batch.targets) {
                s += t.values.sum();
                n += t.observed();
            }
            if (n > 0.0) level_ = s / n;
        }
        BatchOutcome o;
        for (const auto& q : batch.queries) o.predictions.push_back(Matrix::Constant(q.mask.rows(), q.mask.cols(), level_));
        return o;
    }
    void set_adaptation_enabled(bool e) override { enabled_ = e; }

private:
    double level_ = 0.0;
    bool enabled_ = true;
};

Verdict protocol_causality() {
    bool ok = true;
    std::string detail;
    const auto& e = experiments().front();
    for (Mode m : all_modes()) {
        for (std::size_t t : {std::size_t{0}, std::size_t{9}, e.stream.size() - 1}) {
            const auto rep = causality_audit(
                [&] {
                    EngineConfig c;
                    c.mode = m;
                    c.seed = 1;
                    return std::unique_ptr<OnlineAdapter>(std::make_unique<Engine>(c, e.models.forecaster, *e.models.ue));
                },
                e.stream, t);
            if (!rep.passed()) {
                ok = false;
                detail += to_string(m) + "@" + std::to_string(t) + ": " + rep.detail;
            }
        }
    }
    const auto leak = causality_audit([] { return std::make_unique<LeakyAdapter>(); }, e.stream, 9);
    if (leak.passed()) {
        ok = false;
        detail += "leaky control not detected; ";
    }
    std::size_t checksum_changes = 0;
    for (std::size_t k = 0; k < experiments().size(); ++k) {
        for (Mode m : all_modes()) {
            const auto r = run_mode(experiments()[k], m, kSeeds[k]);
            checksum_changes += r.forecaster_checksum_before != r.forecaster_checksum_after;
        }
    }
    if (checksum_changes) ok = false;
    return {ok, detail.empty() ? "all modes causal at t in {0, 9, last}; leak detected; forecaster checksum changed in " +
                                     std::to_string(checksum_changes) + " of " +
                                     std::to_string(experiments().size() * all_modes().size()) + " runs"
                               : detail};
}

Verdict normalization() {
    bool ok = true;
    double lo = 1.0, hi = 0.0;
    std::size_t range_violations = 0;
    for (std::size_t k = 0; k < experiments().size(); ++k) {
        const auto& e = experiments()[k];
        EngineConfig c;
        c.seed = kSeeds[k];
        Engine engine(c, e.models.forecaster, *e.models.ue);
        double prev_min = engine.estimator().range().delta_min;
        double prev_max = engine.estimator().range().delta_max;
        for (const auto& b : e.stream) {
            const auto o = engine.process_batch(b);
            for (double s : o.scores) {
                lo = std::min(lo, s);
                hi = std::max(hi, s);
            }
            const auto& r = engine.estimator().range();
            if (r.delta_min > prev_min || r.delta_max < prev_max) ++range_violations;
            prev_min = r.delta_min;
            prev_max = r.delta_max;
        }
    }
    RunningRange degenerate;
    degenerate.expand(1.5);
    const bool degenerate_zero = degenerate.normalize(1.5) == 0.0 && RunningRange{}.normalize(2.0) == 0.0;
    ok = lo >= 0.0 && hi <= 1.0 && range_violations == 0 && degenerate_zero;
    return {ok, "scores in [" + fmt(lo) + ", " + fmt(hi) + "], " + std::to_string(range_violations) +
                    " range contractions, degenerate range gives " + (degenerate_zero ? "0" : "nonzero")};
}

std::map<Mode, std::vector<RunReport>>& mode_runs() {
    static std::map<Mode, std::vector<RunReport>> runs;
    return runs;
}

const std::vector<RunReport>& runs_for(Mode m) {
    auto& all = mode_runs();
    if (!all.count(m)) {
        for (std::size_t k = 0; k < experiments().size(); ++k) all[m].push_back(run_mode(experiments()[k], m, kSeeds[k]));
    }
    return all[m];
}

double mean_mse(Mode m) {
    double s = 0.0;
    for (const auto& r : runs_for(m)) s += r.mse();
    return s / static_cast<double>(runs_for(m).size());
}

Verdict shift_improvement() {
    const auto t0 = Clock::now();
    experiments();
    const double full = mean_mse(Mode::full);
    const double frozen = mean_mse(Mode::frozen);
    const double gain = (frozen - full) / frozen;
    std::string per_seed;
    for (std::size_t k = 0; k < kSeeds.size(); ++k) {
        const double f = runs_for(Mode::frozen)[k].mse();
        per_seed += (k ? ", " : "") + fmt(100.0 * (f - runs_for(Mode::full)[k].mse()) / f, 3) + "%";
    }
    const double secs = seconds_since(t0) + g_setup_seconds;
    return {gain >= 0.05 && secs < 120.0,
            "full " + fmt(full) + " vs frozen " + fmt(frozen) + ": " + fmt(100.0 * gain, 3) +
                "% lower (per seed " + per_seed + "), " + fmt(secs, 2) + " s including pretraining"};
}

Verdict ablation_direction() {
    const double full = mean_mse(Mode::full);
    std::ostringstream rows;
    rows << "\n";
    for (Mode m : all_modes()) {
        double f = 0.0;
        for (const auto& r : runs_for(m)) f += r.update_frequency();
        rows << "    " << to_string(m) << ": mse " << fmt(mean_mse(m)) << ", update frequency "
             << fmt(f / static_cast<double>(kSeeds.size()), 3) << "\n";
    }
    std::string order;
    for (Mode m : {Mode::random_allocating, Mode::random_triggering, Mode::single_expert_unreliable}) {
        order += "    full <= " + to_string(m) + ": " + (full <= mean_mse(m) ? "yes" : "no") + "\n";
    }
    const bool hard = full <= mean_mse(Mode::frozen);
    return {hard, "hard check full <= frozen; ordering (reported)" + rows.str() + order};
}

Verdict trigger_frequency_trend() {
    std::vector<double> freq;
    for (double kappa : {0.25, 0.75, 2.0, 3.0}) {
        std::size_t fired = 0, total = 0;
        for (const auto& r : runs_for(Mode::full)) {
            std::vector<BatchMoments> ms;
            for (const auto& b : r.batches) ms.push_back(b.score_moments);
            for (bool f : replay_triggers(ms, ArmConfig{}.alpha_trig, kappa)) fired += f;
            total += ms.size();
        }
        freq.push_back(static_cast<double>(fired) / static_cast<double>(total));
    }
    bool ok = true;
    for (std::size_t i = 1; i < freq.size(); ++i) ok = ok && freq[i] <= freq[i - 1];
    return {ok, "kappa_trig 0.25/0.75/2/3 -> frequency " + fmt(freq[0], 3) + " / " + fmt(freq[1], 3) +
                    " / " + fmt(freq[2], 3) + " / " + fmt(freq[3], 3)};
}

Verdict noise_recovery() {
    const std::size_t noisy_batch = 5;
    const std::size_t horizon = 5;
    std::vector<double> mean_delta(horizon + 1, 0.0);
    for (std::size_t k = 0; k < experiments().size(); ++k) {
        const auto& e = experiments()[k];
        EngineConfig c;
        c.seed = kSeeds[k];
        const auto rep = ue_noise_probe(c, e.stream, e.models.forecaster, *e.models.ue, 0.5, noisy_batch);
        for (std::size_t j = 0; j <= horizon; ++j) mean_delta[j] += rep.rel_delta[noisy_batch + j] / kSeeds.size();
    }
    std::size_t recovered_at = 0;
    for (std::size_t j = 1; j <= horizon; ++j) {
        if (std::abs(mean_delta[j]) <= 0.01) {
            recovered_at = j;
            break;
        }
    }
    std::string trace;
    for (std::size_t j = 0; j <= horizon; ++j) trace += (j ? ", " : "") + fmt(100.0 * mean_delta[j], 3) + "%";
    return {recovered_at > 0,
            "noise at batch " + std::to_string(noisy_batch) + "; mean delta for the following batches: " + trace +
                (recovered_at ? "; within 1% after " + std::to_string(recovered_at) + " batch(es)" : "; no recovery")};
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(UNDERCALI_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        std::ifstream in(entry.path(), std::ios::binary);
        std::ostringstream os;
        os << in.rdbuf();
        files[fs::relative(entry.path(), root).string()] = os.str();
    }
    return files;
}

Verdict determinism() {
    const fs::path base = fs::temp_directory_path() / "undercali_acceptance_determinism";
    fs::remove_all(base);
    const std::string cfg = UNDERCALI_REFERENCE_CONFIG;
    std::vector<std::map<std::string, std::string>> outputs;
    for (int pass = 0; pass < 2; ++pass) {
        const fs::path out = base / ("pass" + std::to_string(pass));
        const std::string common = " --config " + cfg + " --seed 1,2 --out " + out.string();
        const std::vector<std::string> cmds{
            "gen-data" + common,
            "pretrain forecaster" + common,
            "pretrain ue" + common,
            "run-online" + common,
            "run-online --mode random_triggering" + common,
            "ablate" + common,
            "report " + (out / "full").string() + " " + (out / "random_triggering").string() +
                " --config " + cfg + " --out " + (out / "report").string(),
        };
        for (const auto& c : cmds) {
            if (run_cli(c) != 0) return {false, "command failed: " + c};
        }
        outputs.push_back(snapshot(out));
    }
    std::size_t differing = 0;
    for (const auto& [name, content] : outputs[0]) {
        auto it = outputs[1].find(name);
        if (it == outputs[1].end() || it->second != content) ++differing;
    }
    const bool ok = differing == 0 && outputs[0].size() == outputs[1].size() && !outputs[0].empty();
    fs::remove_all(base);
    return {ok, std::to_string(outputs[0].size()) + " output files compared, " + std::to_string(differing) +
                    " differ"};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"identity at init", identity_at_init},
        {"gradient exactness", gradient_exactness},
        {"EMA oracle", ema_oracle},
        {"routing partition and boundary", routing_partition},
        {"protocol causality", protocol_causality},
        {"normalization", normalization},
        {"synthetic shift improvement", shift_improvement},
        {"ablation direction", ablation_direction},
        {"trigger frequency trend", trigger_frequency_trend},
        {"uncertainty noise recovery", noise_recovery},
        {"determinism", determinism},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        failures += !v.pass;
        std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << (i + 1) << " (" << criteria[i].first
                  << "): " << v.detail << std::endl;
    }
    std::cout << (failures ? std::to_string(failures) + " criterion(s) failed" : "all criteria passed") << "\n";
    return failures ? 1 : 0;
}
