#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <sys/wait.h>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#ifndef DRPOINT_CLI
#error "DRPOINT_CLI must name the CLI binary"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
    int code;
    std::string out;
};

CliResult cli(const std::string& args) {
    const std::string cmd = std::string(DRPOINT_CLI) + " " + args + " 2>/dev/null";
    FILE* p = popen(cmd.c_str(), "r");
    std::string out;
    std::array<char, 4096> buf;
    while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) out.append(buf.data(), n);
    const int status = pclose(p);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

fs::path scratch(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / "drpoint_test_cli" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

const char* kTinyConfig = R"({
  "profile": "desk", "epochs": 1, "kmeans_iters": 5,
  "encoder": {"layers": 2, "dim": 16, "heads": 2, "ffn_ratio": 2},
  "model": {"num_groups": 8, "group_size": 16, "embed_hidden": 8, "codebook_size": 8, "image_size": 16, "image_width": 2},
  "render": {"grid_depth": 8, "image_width": 8, "image_height": 8},
  "moco": {"K": 8}
})";

double norm(const json& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST(Cli, UsageCodes) {
    EXPECT_EQ(cli("").code, 2);
    EXPECT_EQ(cli("--help").code, 0);
    EXPECT_EQ(cli("frobnicate").code, 2);
    EXPECT_EQ(cli("render --out /tmp").code, 2);
}

TEST(Cli, SynthAndRender) {
    const fs::path d = scratch("render");
    ASSERT_EQ(cli("synth --n 2 --seed 3 --out " + q(d / "data")).code, 0);
    EXPECT_TRUE(fs::exists(d / "data" / "manifest.jsonl"));
    const fs::path cloud = d / "data" / "synth_0000.xyz";
    ASSERT_TRUE(fs::exists(cloud));

    ASSERT_EQ(cli("render --cloud " + q(cloud) + " --poses all --out " + q(d / "all") + " --grid 16 --size 8x8").code, 0);
    int png = 0, f32 = 0;
    for (const auto& e : fs::directory_iterator(d / "all")) {
        png += e.path().extension() == ".png";
        f32 += e.path().extension() == ".f32";
    }
    EXPECT_EQ(png, 32);
    EXPECT_EQ(f32, 32);
    EXPECT_TRUE(fs::exists(d / "all" / "view_31.png"));

    ASSERT_EQ(cli("render --cloud " + q(cloud) + " --poses 0 --out " + q(d / "a")).code, 0);
    ASSERT_EQ(cli("render --cloud " + q(cloud) + " --poses 0 --out " + q(d / "b")).code, 0);
    EXPECT_EQ(slurp(d / "a" / "view_00.png"), slurp(d / "b" / "view_00.png"));
    EXPECT_EQ(slurp(d / "a" / "view_00.f32"), slurp(d / "b" / "view_00.f32"));
    EXPECT_FALSE(fs::exists(d / "a" / "view_01.png"));
}

TEST(Cli, RenderErrors) {
    const fs::path d = scratch("render_err");
    EXPECT_EQ(cli("render --cloud " + q(d / "missing.xyz") + " --poses 0 --out " + q(d / "o")).code, 2);
    std::ofstream(d / "bad.xyz") << "0 0 0\nx y z\n";
    EXPECT_EQ(cli("render --cloud " + q(d / "bad.xyz") + " --poses 0 --out " + q(d / "o")).code, 2);
    std::ofstream(d / "ok.xyz") << "0 0 0\n1 0 0\n";
    EXPECT_EQ(cli("render --cloud " + q(d / "ok.xyz") + " --poses 32 --out " + q(d / "o")).code, 2);
}

TEST(Cli, Gradcheck) {
    const CliResult ok = cli("gradcheck --op chamfer");
    EXPECT_EQ(ok.code, 0);
    EXPECT_NE(ok.out.find("PASS"), std::string::npos);
    EXPECT_EQ(ok.out.find("render"), std::string::npos);
    const CliResult strict = cli("gradcheck --op render --tol 1e-12 --instances 2");
    EXPECT_EQ(strict.code, 1);
    EXPECT_NE(strict.out.find("FAIL"), std::string::npos);
    EXPECT_EQ(cli("gradcheck --op nope").code, 2);
}

TEST(Cli, Metrics) {
    const fs::path d = scratch("metrics");
    std::ofstream(d / "p.xyz") << "0 0 0\n";
    std::ofstream(d / "g.xyz") << "1 0 0\n";
    std::ofstream(d / "empty.xyz") << "# nothing\n";
    const CliResult one = cli("metrics --pred " + q(d / "p.xyz") + " --gt " + q(d / "g.xyz"));
    ASSERT_EQ(one.code, 0);
    const json j = json::parse(one.out);
    EXPECT_EQ(j["cd_l1"].get<double>(), 1.0);
    EXPECT_EQ(j["cd_l2"].get<double>(), 1.0);
    EXPECT_EQ(j["fscore_1pct"].get<double>(), 0.0);
    const json same = json::parse(cli("metrics --pred " + q(d / "g.xyz") + " --gt " + q(d / "g.xyz")).out);
    EXPECT_EQ(same["cd_l1"].get<double>(), 0.0);
    EXPECT_EQ(same["cd_l2"].get<double>(), 0.0);
    EXPECT_EQ(same["fscore_1pct"].get<double>(), 1.0);
    EXPECT_EQ(cli("metrics --pred " + q(d / "empty.xyz") + " --gt " + q(d / "g.xyz")).code, 2);
}

TEST(Cli, PretrainAndEmbed) {
    const fs::path d = scratch("pretrain");
    std::ofstream(d / "cfg.json") << kTinyConfig;
    const std::string base = "pretrain --config " + q(d / "cfg.json") + " --data synth:8 --out ";
    ASSERT_EQ(cli(base + q(d / "r1")).code, 0);
    ASSERT_EQ(cli(base + q(d / "r2")).code, 0);
    EXPECT_TRUE(fs::exists(d / "r1" / "checkpoint_epoch001.drck"));
    EXPECT_TRUE(fs::exists(d / "r1" / "final.drck"));
    const std::string m1 = slurp(d / "r1" / "metrics.jsonl");
    EXPECT_EQ(m1, slurp(d / "r2" / "metrics.jsonl"));
    std::istringstream lines(m1);
    int n = 0;
    for (std::string line; std::getline(lines, line); ++n) EXPECT_NO_THROW(json::parse(line));
    EXPECT_EQ(n, 2);

    ASSERT_EQ(cli("synth --n 1 --out " + q(d / "obj")).code, 0);
    const std::string embed = "embed --checkpoint " + q(d / "r1" / "final.drck") + " --cloud " +
                              q(d / "obj" / "synth_0000.xyz") + " --rgb " + q(d / "obj" / "synth_0000.png");
    const CliResult e1 = cli(embed), e2 = cli(embed);
    ASSERT_EQ(e1.code, 0);
    EXPECT_EQ(e1.out, e2.out);
    const json j = json::parse(e1.out);
    EXPECT_EQ(j["dim"].get<int>(), 16);
    for (const char* k : {"g_p", "g_d", "g_r"}) {
        EXPECT_EQ(j[k].size(), 16u) << k;
        EXPECT_NEAR(norm(j[k]), 1.0, 1e-6) << k;
    }
    std::ofstream(d / "feat.drfe", std::ios::binary) << "DRFE";
    EXPECT_EQ(cli("embed --checkpoint " + q(d / "r1" / "final.drck") + " --cloud " + q(d / "obj" / "synth_0000.xyz") +
                  " --rgb " + q(d / "feat.drfe"))
                  .code,
              2);
}

TEST(Cli, PretrainConfigErrors) {
    const fs::path d = scratch("cfg_err");
    std::ofstream(d / "unknown.json") << R"({"profile": "desk", "learning_rate": 0.1})";
    std::ofstream(d / "neg.json") << R"({"lr": -1})";
    EXPECT_EQ(cli("pretrain --config " + q(d / "unknown.json") + " --data synth:4 --out " + q(d / "o")).code, 2);
    EXPECT_EQ(cli("pretrain --config " + q(d / "neg.json") + " --data synth:4 --out " + q(d / "o")).code, 2);
    EXPECT_EQ(cli("pretrain --data synth:zero --out " + q(d / "o")).code, 2);
}
