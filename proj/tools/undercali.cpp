// undercali: online calibration of frozen IMTS forecasters.
//
//   undercali gen-data    --config run.ini [--seed 1,2] [--out dir]
//   undercali pretrain    forecaster|ue --config run.ini [--seed ...] [--out dir]
//   undercali run-online  --config run.ini [--seed ...] [--mode full] [--out dir]
//   undercali ablate      --config run.ini [--seed ...] [--out dir]
//   undercali gradcheck
//   undercali report      RUN_DIR... [--config run.ini] [--out dir]
//
// Exit status: 0 success, 1 usage or configuration error, 2 failed check.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "undercali/cli/commands.hpp"
#include "undercali/cli/config.hpp"

namespace uc = undercali;
namespace ucli = undercali::cli;

namespace {

struct CommonFlags {
    std::string config;
    std::string seeds;
    std::string mode;
    std::string out;
};

void add_common(CLI::App* sub, CommonFlags& f, bool with_mode, bool config_required) {
    auto* opt = sub->add_option("--config", f.config, "run configuration file");
    if (config_required) opt->required();
    sub->add_option("--seed", f.seeds, "comma-separated seeds, overriding [run] seeds");
    if (with_mode) sub->add_option("--mode", f.mode, "engine mode, overriding [engine] mode");
    sub->add_option("--out", f.out, "output directory (overrides UNDERCALI_OUT and [run] out)");
}

ucli::RunConfig resolve_config(const CommonFlags& f) {
    ucli::RunConfig cfg = f.config.empty() ? ucli::parse_config_string("") : ucli::load_config(f.config);
    if (!f.seeds.empty()) {
        cfg.seeds.clear();
        std::stringstream ss(f.seeds);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
                throw uc::ConfigError("--seed expects comma-separated non-negative integers");
            }
            cfg.seeds.push_back(std::stoull(tok));
        }
        if (cfg.seeds.empty()) throw uc::ConfigError("--seed needs at least one seed");
    }
    if (!f.mode.empty()) cfg.engine.mode = uc::mode_from_string(f.mode);
    return cfg;
}

std::optional<std::string> out_flag(const CommonFlags& f) {
    return f.out.empty() ? std::nullopt : std::optional<std::string>(f.out);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Online calibration of frozen irregular multivariate time series forecasters"};
    app.require_subcommand(1);

    CommonFlags gen_f, pre_f, run_f, abl_f, rep_f;
    std::string pretrain_kind;
    std::vector<std::string> report_dirs;

    auto* gen = app.add_subcommand("gen-data", "write synthetic JSONL streams, one per seed");
    add_common(gen, gen_f, false, true);

    auto* pre = app.add_subcommand("pretrain", "offline training of the forecaster or the estimator");
    pre->add_option("kind", pretrain_kind, "forecaster or ue")->required();
    add_common(pre, pre_f, false, true);

    auto* run = app.add_subcommand("run-online", "run the online stream for every seed");
    add_common(run, run_f, true, true);

    auto* abl = app.add_subcommand("ablate", "run every ablation mode on the same streams and seeds");
    add_common(abl, abl_f, false, true);

    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of all backward passes");

    auto* rep = app.add_subcommand("report", "merge run CSVs and emit the kappa_trig sweep");
    rep->add_option("run_dirs", report_dirs, "directories holding per-batch CSVs")->required();
    add_common(rep, rep_f, false, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ucli::kExitOk : ucli::kExitUsage;
    }

    try {
        if (gen->parsed()) {
            const auto cfg = resolve_config(gen_f);
            ucli::cmd_gen_data(cfg, ucli::resolve_out_dir(out_flag(gen_f), cfg), std::cout);
        } else if (pre->parsed()) {
            const auto cfg = resolve_config(pre_f);
            ucli::cmd_pretrain(pretrain_kind, cfg, ucli::resolve_out_dir(out_flag(pre_f), cfg), std::cout);
        } else if (run->parsed()) {
            const auto cfg = resolve_config(run_f);
            ucli::cmd_run_online(cfg, ucli::resolve_out_dir(out_flag(run_f), cfg), std::cout);
        } else if (abl->parsed()) {
            const auto cfg = resolve_config(abl_f);
            ucli::cmd_ablate(cfg, ucli::resolve_out_dir(out_flag(abl_f), cfg), std::cout);
        } else if (grad->parsed()) {
            return ucli::cmd_gradcheck(uc::standard_gradcheck_cases(), std::cout);
        } else if (rep->parsed()) {
            const auto cfg = resolve_config(rep_f);
            ucli::cmd_report(report_dirs, cfg.engine.arm.alpha_trig,
                             ucli::resolve_out_dir(out_flag(rep_f), cfg), std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return ucli::kExitUsage;
    }
    return ucli::kExitOk;
}
