// SPDX-License-Identifier: Apache-2.0
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <gtest/gtest.h>

#include "mcpm/mcpm.hpp"

namespace fs = std::filesystem;
using namespace mcpm;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(MCPM_CLI_PATH) + " " + args + " > cli_stdout.txt 2> cli_stderr.txt";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

detail::CsvTable table(const fs::path& p) {
    std::ifstream in(p);
    return detail::read_csv(in);
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::current_path() / ("cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }

    [[nodiscard]] std::string path(const std::string& name) const { return (dir_ / name).string(); }

    void simulate_s1() { ASSERT_EQ(run("simulate --preset s1 --seed 7 --out " + path("data")), 0); }

    void fit_fold0(const std::string& extra = "") {
        ASSERT_EQ(run("fit --counts " + path("data/counts.csv") + " --fold 0 --q 2 --m 30 --epochs 40 --lr 0.03 --seed 3 --out " +
                      path("model.ckpt") + " --trace " + path("trace.csv") + " " + extra),
                  0);
    }

    fs::path dir_;
};

Json checkpoint_doc(const std::string& path) {
    std::ifstream in(path);
    std::string magic;
    std::getline(in, magic);
    return Json::parse(in);
}

}  // namespace

TEST_F(Cli, SimulateS1WritesGridFiles) {
    simulate_s1();
    const auto t = table(path("data/counts.csv"));
    EXPECT_EQ(t.rows.size(), 1600u);
    EXPECT_EQ(t.header.front(), "cell_id");
    EXPECT_TRUE(fs::exists(path("data/truth.csv")));
    const auto grid = load_count_grid_csv(path("data/counts.csv"));
    EXPECT_EQ(grid.num_tasks(), 4);
    EXPECT_EQ(grid.spec.cells_per_dim, (std::vector<int>{20, 20}));
}

TEST_F(Cli, SimulateIsByteReproducible) {
    ASSERT_EQ(run("simulate --preset s1 --seed 7 --out " + path("a")), 0);
    ASSERT_EQ(run("simulate --preset s1 --seed 7 --out " + path("b")), 0);
    for (const char* f : {"counts.csv", "truth.csv", "config.json"}) {
        EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
    }
}

TEST_F(Cli, SimulatePriorRecordsWeights) {
    ASSERT_EQ(run("simulate --preset prior --q 3 --p 5 --seed 2 --out " + path("data")), 0);
    EXPECT_EQ(load_count_grid_csv(path("data/counts.csv")).num_tasks(), 5);
    const Json cfg = parse_json_file(path("data/config.json"));
    ASSERT_TRUE(cfg.contains("weights"));
    EXPECT_EQ(cfg["weights"].size(), 5u);
    EXPECT_EQ(cfg["weights"][0].size(), 3u);
}

TEST_F(Cli, FitImprovesElboAndWritesTrace) {
    simulate_s1();
    fit_fold0();
    const Json doc = checkpoint_doc(path("model.ckpt"));
    EXPECT_GT(doc["summary"]["final_elbo"].get<double>(), doc["summary"]["initial_elbo"].get<double>());
    EXPECT_EQ(doc["run"]["fold"], 0);
    EXPECT_EQ(table(path("trace.csv")).rows.size(), 40u);
    const auto state = load_checkpoint(path("model.ckpt"));
    EXPECT_EQ(state.Q(), 2);
}

TEST_F(Cli, FitBaselineModes) {
    simulate_s1();
    fit_fold0("--mode lgcp");
    auto s = load_checkpoint(path("model.ckpt"));
    EXPECT_EQ(s.config.mode, BaselineMode::Lgcp);
    EXPECT_TRUE(s.weight_means().isIdentity());
    fit_fold0("--mode icm-limit");
    s = load_checkpoint(path("model.ckpt"));
    EXPECT_EQ(s.config.mode, BaselineMode::IcmLimit);
    EXPECT_TRUE(s.weight_vars().isZero());
}

TEST_F(Cli, PredictSurfaceMatchesLibrary) {
    simulate_s1();
    fit_fold0();
    ASSERT_EQ(run("predict --checkpoint " + path("model.ckpt") + " --counts " + path("data/counts.csv") +
                  " --samples 50 --seed 1 --out " + path("surface.csv")),
              0);
    const auto t = table(path("surface.csv"));
    ASSERT_EQ(t.rows.size(), 1600u);
    EXPECT_EQ(t.header, (std::vector<std::string>{"cell_id", "x1", "x2", "task", "mean", "variance", "lo90", "hi90", "pi"}));
    const auto state = load_checkpoint(path("model.ckpt"));
    const auto grid = load_count_grid_csv(path("data/counts.csv"));
    const MatrixXd mean = intensity_moment(state, grid.centroids, 1);
    std::map<long, double> pi_sum;
    for (const auto& row : t.rows) {
        const long cell = std::stol(row[0]);
        const long task = std::stol(row[3]);
        EXPECT_EQ(std::stod(row[4]), mean(task, cell));
        pi_sum[cell] += std::stod(row[8]);
    }
    for (const auto& [cell, s] : pi_sum) EXPECT_NEAR(s, 1.0, 1e-12) << "cell " << cell;
}

TEST_F(Cli, EvaluateWritesReport) {
    simulate_s1();
    fit_fold0();
    ASSERT_EQ(run("evaluate --checkpoint " + path("model.ckpt") + " --counts " + path("data/counts.csv") +
                  " --cells missing --samples 50 --regions 10 --out " + path("report.json")),
              0);
    const Json r = parse_json_file(path("report.json"));
    ASSERT_EQ(r["tasks"].size(), 4u);
    EXPECT_EQ(r["fold_id"], 0);
    EXPECT_EQ(r["tasks"]["0"]["cells"], 100);
    EXPECT_TRUE(r["tasks"]["0"]["nlpl"].is_number());
}

TEST_F(Cli, ExitCodes) {
    EXPECT_EQ(run("fit --counts " + path("missing.csv") + " --out " + path("m.ckpt")), 2);
    EXPECT_EQ(run("simulate --preset nope --out " + path("x")), 2);
    EXPECT_EQ(run("frobnicate"), 2);
    simulate_s1();
    EXPECT_EQ(run("fit --counts " + path("data/counts.csv") + " --m 5000 --out " + path("m.ckpt")), 2);
    EXPECT_NE(slurp("cli_stderr.txt").find("\"error\""), std::string::npos);
}
