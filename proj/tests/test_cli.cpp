#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "undercali/cli/commands.hpp"
#include "undercali/cli/config.hpp"

using namespace undercali;
using namespace undercali::cli;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"([scenario]
n_samples = 200

[regime_0]
mean_offset = 0
ar_coef = 0.7
missing_rate = 0.3

[regime_1]
start_fraction = 0.5
mean_offset = 2.5
missing_rate = 0.5

[grid]
lookback_slots = 8
forecast_slots = 2
n_vars = 2
lookback_span = 8
forecast_span = 2

[forecaster]
max_epochs = 30

[ue]
hidden = 16,16
max_epochs = 20

[engine]
batch_size = 10

[run]
seeds = 1,2
)";

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("undercali_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

std::size_t count_lines(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line)) n += !line.empty();
    return n;
}

RunConfig small() { return parse_config_string(kSmallConfig); }

int run_cli(const std::string& args) {
    const std::string cmd = std::string(UNDERCALI_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, CanonicalRoundTrip) {
    const RunConfig a = small();
    const RunConfig b = parse_config_string(to_ini(a));
    EXPECT_EQ(a, b);
    EXPECT_EQ(to_ini(a), to_ini(b));
    EXPECT_EQ(a.regimes.size(), 2u);
    EXPECT_EQ(a.seeds, (std::vector<std::uint64_t>{1, 2}));
    EXPECT_EQ(a.ue_hidden, (std::vector<Eigen::Index>{16, 16}));
}

TEST(Config, DefaultsRoundTrip) {
    const RunConfig a = parse_config_string("");
    EXPECT_EQ(a, parse_config_string(to_ini(a)));
    EXPECT_EQ(a.engine.arm, ArmConfig{});
    EXPECT_EQ(a.regimes.size(), 1u);
}

TEST(Config, UnknownKeysAndSectionsRejected) {
    EXPECT_THROW(parse_config_string("[engine]\nlearning_rate = 1\n"), ConfigError);
    EXPECT_THROW(parse_config_string("[enigne]\nmode = full\n"), ConfigError);
    EXPECT_THROW(parse_config_string("[regime_1]\nmissing_rate = 0.1\n"), ConfigError);
    EXPECT_THROW(parse_config_string("[engine]\nmode = turbo\n"), ConfigError);
    EXPECT_THROW(parse_config_string("[engine]\ninner_steps = two\n"), ConfigError);
    EXPECT_THROW(parse_config_string("[engine]\nloss_norm = l3\n"), ConfigError);
}

TEST(Config, SeedPlaceholder) {
    EXPECT_EQ(substitute_seed("ck/f_{seed}.json", 7), "ck/f_7.json");
    EXPECT_EQ(substitute_seed("plain.json", 7), "plain.json");
}

TEST(Config, OutputDirectoryPrecedence) {
    RunConfig c = small();
    c.out_dir = "from_config";
    ::unsetenv("UNDERCALI_OUT");
    EXPECT_EQ(resolve_out_dir(std::nullopt, c), fs::path("from_config"));
    ::setenv("UNDERCALI_OUT", "from_env", 1);
    EXPECT_EQ(resolve_out_dir(std::nullopt, c), fs::path("from_env"));
    EXPECT_EQ(resolve_out_dir(std::string("from_flag"), c), fs::path("from_flag"));
    ::unsetenv("UNDERCALI_OUT");
}

TEST(GenData, WritesOneLinePerSampleAndIsReproducible) {
    RunConfig c = small();
    c.n_samples = 100;
    c.seeds = {4};
    const auto d = fresh_dir("gen");
    std::ostringstream log;
    cmd_gen_data(c, d / "a", log);
    cmd_gen_data(c, d / "b", log);
    EXPECT_EQ(count_lines(d / "a" / "data_seed4.jsonl"), 100u);
    EXPECT_EQ(slurp(d / "a" / "data_seed4.jsonl"), slurp(d / "b" / "data_seed4.jsonl"));
}

TEST(GenData, DataFileIsReadBack) {
    RunConfig c = small();
    c.seeds = {5};
    const auto d = fresh_dir("readback");
    std::ostringstream log;
    cmd_gen_data(c, d, log);
    RunConfig from_file = c;
    from_file.data_path = (d / "data_seed5.jsonl").string();
    const auto a = load_samples(c, 5);
    const auto b = load_samples(from_file, 5);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].values, b[i].values);
        EXPECT_EQ(a[i].timestamps, b[i].timestamps);
    }
}

TEST(Pretrain, EstimatorNeedsForecasterCheckpoint) {
    const auto d = fresh_dir("pretrain_missing");
    std::ostringstream log;
    EXPECT_THROW(cmd_pretrain("ue", small(), d, log), ConfigError);
    EXPECT_THROW(cmd_pretrain("everything", small(), d, log), ConfigError);
}

TEST(Pretrain, CheckpointsFeedRunOnline) {
    const auto d = fresh_dir("pretrain");
    RunConfig c = small();
    c.seeds = {1};
    std::ostringstream log;
    cmd_pretrain("forecaster", c, d, log);
    cmd_pretrain("ue", c, d, log);
    ASSERT_TRUE(fs::exists(d / "forecaster_seed1.json"));
    ASSERT_TRUE(fs::exists(d / "ue_seed1.json"));

    // Named checkpoints must reproduce the in-process training bit for bit.
    RunConfig named = c;
    named.forecaster_checkpoint = (d / "forecaster_seed{seed}.json").string();
    named.ue_checkpoint = (d / "ue_seed{seed}.json").string();
    cmd_run_online(c, d / "inproc", log);
    cmd_run_online(named, d / "loaded", log);
    EXPECT_EQ(slurp(d / "inproc" / "full" / "seed1.csv"), slurp(d / "loaded" / "full" / "seed1.csv"));

    RunConfig other_grid = named;
    other_grid.grid.lookback_slots = 9;
    EXPECT_THROW(cmd_run_online(other_grid, d / "bad", log), ConfigError);
}

TEST(RunOnline, AggregateIsMeanOfSeeds) {
    const auto d = fresh_dir("run");
    RunConfig c = small();
    c.engine.mode = Mode::frozen;
    std::ostringstream log;
    cmd_run_online(c, d, log);
    const auto agg = read_json(d / "frozen" / "aggregate.json");
    const auto s1 = read_json(d / "frozen" / "seed1.json");
    const auto s2 = read_json(d / "frozen" / "seed2.json");
    EXPECT_EQ(agg.at("seeds"), nlohmann::json::array({1, 2}));
    EXPECT_NEAR(agg.at("mse").get<double>(), (s1.at("mse").get<double>() + s2.at("mse").get<double>()) / 2, 1e-12);
    EXPECT_EQ(agg.at("update_frequency").get<double>(), 0.0);
    EXPECT_EQ(agg.at("n_batches").get<std::size_t>(), 15u);  // 150 online samples, batches of 10
}

TEST(Ablate, OneRowPerModeAndFrozenMatchesRunOnline) {
    const auto d = fresh_dir("ablate");
    RunConfig c = small();
    std::ostringstream log;
    cmd_ablate(c, d, log);
    std::ifstream in(d / "ablation.csv");
    std::string header, line;
    std::getline(in, header);
    EXPECT_EQ(header, "mode,mse,mse_std,mae,mae_std,update_frequency,n_seeds");
    std::vector<std::string> modes;
    while (std::getline(in, line)) modes.push_back(line.substr(0, line.find(',')));
    std::vector<std::string> expected;
    for (Mode m : ablation_modes()) expected.push_back(undercali::to_string(m));
    EXPECT_EQ(modes, expected);

    c.engine.mode = Mode::frozen;
    cmd_run_online(c, d / "single", log);
    EXPECT_EQ(slurp(d / "ablation" / "frozen" / "seed1.csv"), slurp(d / "single" / "frozen" / "seed1.csv"));
    EXPECT_EQ(slurp(d / "ablation" / "frozen" / "aggregate.json"), slurp(d / "single" / "frozen" / "aggregate.json"));
}

TEST(Gradcheck, CorruptedCaseFails) {
    std::ostringstream os;
    EXPECT_EQ(cmd_gradcheck(standard_gradcheck_cases(), os), kExitOk);
    auto cases = standard_gradcheck_cases();
    cases.push_back({"corrupted", [] {
                         auto p = std::make_shared<Param>("w", Matrix::Constant(2, 2, 0.3));
                         return grad_check([p] { return p->value.squaredNorm(); },
                                           [p] { p->grad += p->value; }, ParamRefs{p.get()});
                     }});
    std::ostringstream bad;
    EXPECT_EQ(cmd_gradcheck(cases, bad), kExitCheckFailed);
    EXPECT_NE(bad.str().find("FAIL corrupted"), std::string::npos);
}

TEST(Report, MergesRowsAndSweepsKappa) {
    const auto d = fresh_dir("report");
    RunConfig c = small();
    std::ostringstream log;
    cmd_run_online(c, d, log);
    const auto sum = cmd_report({(d / "full").string()}, c.engine.arm.alpha_trig, d / "rep", log);
    EXPECT_EQ(sum.n_inputs, 2u);
    const std::size_t rows = count_lines(d / "full" / "seed1.csv") - 1 + count_lines(d / "full" / "seed2.csv") - 1;
    EXPECT_EQ(sum.n_rows, rows);
    EXPECT_EQ(count_lines(d / "rep" / "report_long.csv"), rows + 1);
    EXPECT_EQ(count_lines(d / "rep" / "kappa_sweep.csv"), kKappaSweep.size() + 1);
    for (std::size_t i = 1; i < sum.sweep_frequencies.size(); ++i) {
        EXPECT_LE(sum.sweep_frequencies[i], sum.sweep_frequencies[i - 1]);
    }
    // Replaying the default kappa reproduces the live trigger rate.
    const auto agg = read_json(d / "full" / "aggregate.json");
    EXPECT_NEAR(sum.sweep_frequencies[1], agg.at("update_frequency").get<double>(), 1e-12);

    const auto empty = fresh_dir("report_empty");
    EXPECT_THROW(cmd_report({empty.string()}, 0.25, d / "rep2", log), ConfigError);
}

TEST(Binary, ExitCodes) {
    const auto d = fresh_dir("binary");
    const fs::path cfg = d / "small.ini";
    {
        std::ofstream(cfg) << kSmallConfig;
    }
    EXPECT_EQ(run_cli("--help"), 0);
    EXPECT_EQ(run_cli(""), 1);
    EXPECT_EQ(run_cli("frobnicate"), 1);
    EXPECT_EQ(run_cli("gen-data"), 1);  // --config missing
    EXPECT_EQ(run_cli("gen-data --config " + cfg.string() + " --seed 3 --out " + (d / "o").string()), 0);
    EXPECT_TRUE(fs::exists(d / "o" / "data_seed3.jsonl"));
    EXPECT_EQ(run_cli("run-online --config " + cfg.string() + " --mode nonsense --out " + d.string()), 1);
    EXPECT_EQ(run_cli("gradcheck"), 0);

    const fs::path bad = d / "bad.ini";
    {
        std::ofstream(bad) << "[regime_0]\nmean_offset = 0\n[regime_1]\nstart_fraction = 0.6\n"
                              "mean_offset = 1\n[regime_2]\nstart_fraction = 0.3\nmean_offset = 1\n";
    }
    EXPECT_EQ(run_cli("gen-data --config " + bad.string() + " --out " + (d / "bad").string()), 1);
    EXPECT_FALSE(fs::exists(d / "bad" / "data_seed1.jsonl"));
}

TEST(Binary, EnvironmentOutputDirectory) {
    const auto d = fresh_dir("env");
    const fs::path cfg = d / "small.ini";
    {
        std::ofstream(cfg) << kSmallConfig;
    }
    const std::string cmd = "UNDERCALI_OUT=" + (d / "envout").string() + " " + UNDERCALI_CLI_PATH +
                            " gen-data --config " + cfg.string() + " --seed 9 > /dev/null 2>&1";
    ASSERT_EQ(std::system(cmd.c_str()), 0);
    EXPECT_TRUE(fs::exists(d / "envout" / "data_seed9.jsonl"));
}
