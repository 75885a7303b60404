#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "run_config.hpp"
#include "viti/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using viti::cli::RunConfig;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run cli(std::vector<std::string> args) {
    args.insert(args.begin(), "viti");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = viti::cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream(p, std::ios::binary) << text;
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir = fs::temp_directory_path() /
              ("viti_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir);
        fs::create_directories(dir);
        unsetenv(std::string(viti::cli::kOutDirEnv).c_str());
    }
    void TearDown() override { fs::remove_all(dir); }

    std::string path(const std::string& name) const { return (dir / name).string(); }

    // A tiny model, dataset and bank that train in well under a second.
    void tiny_pipeline() {
        ASSERT_EQ(cli({"gen-data", "--seed", "3", "--size", "60", "--out", path("data.jsonl")}).code, 0);
        ASSERT_EQ(cli({"train-model", "--seed", "3", "--dataset", path("data.jsonl"), "--layers", "1", "--heads", "2",
                       "--head-dim", "4", "--epochs", "1", "--out", path("model.bin")})
                      .code,
                  0);
        ASSERT_EQ(cli({"train-probes", "--seed", "3", "--dataset", path("data.jsonl"), "--model", path("model.bin"),
                       "--probe-prompts", "20", "--probe-epochs", "20", "--out", path("probes.bin")})
                      .code,
                  0);
    }

    fs::path dir;
};

} // namespace

TEST_F(CliTest, PrecedenceFlagOverFileOverDefault) {
    write_file(path("run.cfg"), "size = 40\nmix_color = 0.5\n");
    struct Case {
        bool file;
        bool flag;
        int want;
    };
    for (const Case c : {Case{false, false, 2000}, Case{true, false, 40}, Case{false, true, 30}, Case{true, true, 30}}) {
        std::vector<std::string> args{"gen-data", "--seed", "1", "--out", path("d.jsonl")};
        if (c.file) args.insert(args.end(), {"--config", path("run.cfg")});
        if (c.flag) args.insert(args.end(), {"--size", "30"});
        const auto r = cli(args);
        ASSERT_EQ(r.code, 0) << r.err;
        const auto rep = read_json(path("d.jsonl.run.json"));
        EXPECT_EQ(rep["result"]["samples"].get<int>(), c.want);
        EXPECT_EQ(rep["config"]["size"].get<std::string>(), std::to_string(c.want));
        EXPECT_EQ(rep["config"]["mix_color"].get<std::string>(), c.file ? "0.5" : "0.2");
    }
}

TEST_F(CliTest, UnderscoreAndDashedFlagsAreEquivalent) {
    ASSERT_EQ(cli({"gen-data", "--seed", "1", "--size", "5", "--mix_color", "0.4", "--out", path("a.jsonl")}).code, 0);
    ASSERT_EQ(cli({"gen-data", "--seed", "1", "--size", "5", "--mix-color", "0.4", "--out", path("b.jsonl")}).code, 0);
    EXPECT_EQ(read_file(path("a.jsonl")), read_file(path("b.jsonl")));
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
    auto r = cli({"eval", "--seed", "1", "--dataset", path("none.jsonl")});
    EXPECT_EQ(r.code, viti::cli::kExitConfig);
    EXPECT_NE(r.err.find("model"), std::string::npos);

    r = cli({"gen-data", "--size", "5"});
    EXPECT_EQ(r.code, viti::cli::kExitConfig);
    EXPECT_NE(r.err.find("seed"), std::string::npos);

    r = cli({"gen-data", "--seed", "1", "--bogus", "3"});
    EXPECT_EQ(r.code, viti::cli::kExitConfig);

    write_file(path("bad.cfg"), "size = twelve\n");
    r = cli({"gen-data", "--seed", "1", "--config", path("bad.cfg")});
    EXPECT_EQ(r.code, viti::cli::kExitConfig);
    EXPECT_NE(r.err.find("size"), std::string::npos);

    write_file(path("unknown.cfg"), "colour = red\n");
    EXPECT_EQ(cli({"gen-data", "--seed", "1", "--config", path("unknown.cfg")}).code, viti::cli::kExitConfig);

    EXPECT_EQ(cli({}).code, viti::cli::kExitConfig);
}

TEST_F(CliTest, HelpExitsZero) {
    const auto r = cli({"--help"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("gen-data"), std::string::npos);
}

TEST_F(CliTest, VersionMismatchExitsThree) {
    ASSERT_EQ(cli({"gen-data", "--seed", "1", "--size", "5", "--out", path("d.jsonl")}).code, 0);
    auto text = read_file(path("d.jsonl"));
    const auto at = text.find("\"version\":1");
    ASSERT_NE(at, std::string::npos);
    text.replace(at, 11, "\"version\":9");
    write_file(path("d.jsonl"), text);
    write_file(path("model.bin"), "not a model");
    auto r = cli({"eval", "--seed", "1", "--dataset", path("d.jsonl"), "--model", path("model.bin")});
    EXPECT_NE(r.code, 0);

    tiny_pipeline();
    auto bytes = read_file(path("model.bin"));
    bytes[4] = static_cast<char>(bytes[4] + 7);
    write_file(path("model_v.bin"), bytes);
    r = cli({"eval", "--seed", "1", "--dataset", path("data.jsonl"), "--model", path("model_v.bin")});
    EXPECT_EQ(r.code, viti::cli::kExitIncompatible) << r.err;

    r = cli({"eval", "--seed", "1", "--dataset", path("d.jsonl"), "--model", path("model.bin")});
    EXPECT_EQ(r.code, viti::cli::kExitIncompatible) << r.err;
}

TEST_F(CliTest, ReportsAreDeterministicApartFromTimestamp) {
    tiny_pipeline();
    auto strip = [](json j) {
        j.erase("created_at");
        return j;
    };
    const std::vector<std::string> eval{"eval",      "--seed",          "5", "--dataset", path("data.jsonl"),
                                        "--model",   path("model.bin"), "--probes", path("probes.bin"),
                                        "--intervene", "--perturb-steps", "600", "--curve", "--out", path("e.json")};
    ASSERT_EQ(cli(eval).code, 0);
    const auto first = read_json(path("e.json"));
    ASSERT_EQ(cli(eval).code, 0);
    EXPECT_EQ(strip(first), strip(read_json(path("e.json"))));
    EXPECT_EQ(first["format"], "viti-report");
    EXPECT_EQ(first["command"], "eval");
    EXPECT_TRUE(first["result"].contains("curve"));

    const auto model = read_file(path("model.bin"));
    ASSERT_EQ(cli({"train-model", "--seed", "3", "--dataset", path("data.jsonl"), "--layers", "1", "--heads", "2",
                   "--head-dim", "4", "--epochs", "1", "--out", path("model2.bin")})
                  .code,
              0);
    EXPECT_EQ(model, read_file(path("model2.bin")));
}

TEST_F(CliTest, PipelineCommandsRun) {
    tiny_pipeline();
    const std::vector<std::string> common{"--seed", "2", "--model", path("model.bin"), "--probes", path("probes.bin"),
                                          "--dataset", path("data.jsonl"), "--out-dir", dir.string()};
    auto with = [&](std::vector<std::string> head) {
        head.insert(head.end(), common.begin(), common.end());
        return cli(head);
    };
    EXPECT_EQ(with({"generate", "--prompt", "<bos> <img> [red circle] <empty> </img> is there a red circle ?",
                    "--intervene", "--max-new", "3"})
                  .code,
              0);
    EXPECT_TRUE(fs::exists(dir / "generate.json"));
    EXPECT_EQ(with({"generate", "--prompt", "<bos> is there a red circle ?"}).code, viti::cli::kExitConfig);
    EXPECT_EQ(with({"sweep", "--alphas", "0,0.5", "--betas", "0.5,1", "--perturb-steps", "500"}).code, 0);
    EXPECT_EQ(with({"ablate", "--perturb-steps", "500"}).code, 0);
    EXPECT_EQ(with({"ablate"}).code, viti::cli::kExitConfig);
    EXPECT_EQ(with({"bench", "--context", "32", "--new-tokens", "4", "--repeats", "5"}).code, 0);
    EXPECT_EQ(with({"bench", "--context", "32", "--repeats", "2"}).code, viti::cli::kExitConfig);

    const auto sweep = read_json(dir / "sweep.csv.run.json");
    EXPECT_EQ(sweep["result"]["scores"][0][0], sweep["result"]["baseline"]);
    EXPECT_EQ(sweep["result"]["scores"][0][1], sweep["result"]["baseline"]);

    const auto r = cli({"report", "--seed", "2", "--in", (dir / "sweep.csv").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "alpha0,beta=0.5,beta=1");
    EXPECT_EQ(read_file(dir / "sweep_pivot.csv"), r.out);
}

TEST_F(CliTest, ReportPivotsHandWrittenCsv) {
    write_file(path("s.csv"), "alpha0,beta,score\n0,0.1,0.5\n0,0.2,0.5\n0.3,0.1,0.7\n0.3,0.2,0.25\n");
    const auto r = cli({"report", "--seed", "0", "--in", path("s.csv"), "--out", path("p.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_file(path("p.csv")), "alpha0,beta=0.1,beta=0.2\n0,0.5,0.5\n0.3,0.7,0.25\n");

    write_file(path("broken.csv"), "alpha0,score\n0,1\n");
    EXPECT_EQ(cli({"report", "--seed", "0", "--in", path("broken.csv")}).code, viti::cli::kExitFailure);
}

TEST_F(CliTest, OutDirFromEnvironment) {
    const auto env_dir = dir / "from_env";
    setenv(std::string(viti::cli::kOutDirEnv).c_str(), env_dir.c_str(), 1);
    ASSERT_EQ(cli({"gen-data", "--seed", "1", "--size", "4"}).code, 0);
    EXPECT_TRUE(fs::exists(env_dir / "dataset.jsonl"));
    ASSERT_EQ(cli({"gen-data", "--seed", "1", "--size", "4", "--out-dir", (dir / "flag").string()}).code, 0);
    EXPECT_TRUE(fs::exists(dir / "flag" / "dataset.jsonl"));
    unsetenv(std::string(viti::cli::kOutDirEnv).c_str());
}

TEST(RunConfig, TextRoundTrip) {
    auto cfg = RunConfig::defaults();
    cfg.set("seed", "17");
    cfg.set("alphas", "0,0.3");
    cfg.set("intervene", "true");
    auto back = RunConfig::defaults();
    back.merge_text(cfg.to_text());
    EXPECT_EQ(back, cfg);
    EXPECT_EQ(back.to_text(), cfg.to_text());
    EXPECT_EQ(back.reals("alphas"), (std::vector<double>{0.0, 0.3}));
    EXPECT_TRUE(back.boolean("intervene"));
}

TEST(RunConfig, TypedAccessorsValidate) {
    auto cfg = RunConfig::defaults();
    EXPECT_THROW(cfg.seed(), viti::ConfigError);
    cfg.set("seed", "4");
    EXPECT_THROW(cfg.set("nonsense", "1"), viti::ConfigError);
    cfg.set("alpha0", "1.5");
    EXPECT_THROW(cfg.intervention(), viti::ConfigError);
    cfg.set("alpha0", "0.2");
    cfg.set("target", "sideways");
    EXPECT_THROW(cfg.target(), viti::ConfigError);
    cfg.set("target", "probe_direction");
    EXPECT_EQ(cfg.target(), viti::RecallTarget::probe_direction);
    EXPECT_FALSE(cfg.eval_perturbation().has_value());
    cfg.set("perturb_steps", "250");
    ASSERT_TRUE(cfg.eval_perturbation().has_value());
    EXPECT_EQ(cfg.eval_perturbation()->options.noise_step, 250u);
    try {
        cfg.merge_text("layers = -1\n", "f.cfg");
        cfg.model_config();
        FAIL();
    } catch (const viti::ConfigError& e) {
        EXPECT_EQ(std::string(e.what()).rfind("layers", 0), 0u) << e.what();
    }
}
