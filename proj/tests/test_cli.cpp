#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kuq/checkpoint.hpp"
#include "kuq/dataset.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct CmdResult {
    int code = -1;
    std::string out;
    std::string err;
};

const fs::path& work_dir() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "kuq_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

CmdResult run_cli(const std::string& args) {
    const fs::path out_path = work_dir() / "stdout.txt";
    const fs::path err_path = work_dir() / "stderr.txt";
    const std::string cmd = std::string(KUQ_CLI_PATH) + " " + args + " >" + out_path.string() +
                            " 2>" + err_path.string();
    const int rc = std::system(cmd.c_str());
    CmdResult result;
    result.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    result.out = slurp(out_path);
    result.err = slurp(err_path);
    return result;
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) lines.push_back(line);
    return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
}

std::string data_path(const char* name) { return (work_dir() / name).string(); }

}  // namespace

TEST_CASE("gen-data writes a loadable, reproducible dataset") {
    auto r = run_cli("gen-data --system damped_oscillator --n-series 24 --steps 12 --seed 7 --out " +
                     data_path("a.kts"));
    REQUIRE(r.code == 0);
    CHECK(r.out.find("N=24") != std::string::npos);
    CHECK(r.out.find("T=12") != std::string::npos);
    CHECK(r.out.find("n=2") != std::string::npos);

    auto ds = kuq::load_dataset(data_path("a.kts"));
    CHECK(ds.series_count == 24);
    CHECK(ds.horizon() == 12);
    CHECK(ds.channel_count == 2);

    auto r2 = run_cli(
        "gen-data --system damped_oscillator --n-series 24 --steps 12 --seed 7 --out " +
        data_path("b.kts"));
    REQUIRE(r2.code == 0);
    CHECK(slurp(data_path("a.kts")) == slurp(data_path("b.kts")));
}

TEST_CASE("gen-data rejects a negative noise std with exit code 2") {
    auto r = run_cli("gen-data --noise-std -1 --out " + data_path("bad.kts"));
    CHECK(r.code == 2);
    CHECK(r.err.find("--noise-std") != std::string::npos);
}

TEST_CASE("unknown flags exit with the usage code") {
    auto r = run_cli("gen-data --frobnicate 2 --out " + data_path("x.kts"));
    CHECK(r.code == 2);
}

TEST_CASE("train writes a checkpoint and a contract-satisfying log") {
    REQUIRE(run_cli("gen-data --n-series 16 --steps 8 --seed 3 --out " + data_path("t.kts")).code ==
            0);
    auto r = run_cli("train --data " + data_path("t.kts") + " --out " + data_path("run_a") +
                     " --regime variance --lambda 0.5 --members 2 --latent-dim 4 --hidden 8 "
                     "--steps 25 --batch 8 --seed 5 --log-every 0");
    REQUIRE(r.code == 0);
    REQUIRE(fs::exists(data_path("run_a") + "/checkpoint.json"));

    const auto lines = split_lines(slurp(data_path("run_a") + "/train_log.csv"));
    REQUIRE(lines.size() == 26);  // header + 25 steps
    CHECK(lines[0] == "step,pred,ae,lin,orth,var,abs_dev,total,ensemble_variance");
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto cells = split_csv(lines[i]);
        REQUIRE(cells.size() == 9);
        const double pred = std::stod(cells[1]), ae = std::stod(cells[2]), lin = std::stod(cells[3]),
                     orth = std::stod(cells[4]), var = std::stod(cells[5]),
                     total = std::stod(cells[7]), ens_var = std::stod(cells[8]);
        const double recombined = pred + ae + lin + 0.01 * orth + 0.5 * var;
        CHECK(std::fabs(total - recombined) <= 1e-12 * std::max(1.0, std::fabs(total)));
        CHECK(ens_var >= 0.0);
    }
}

TEST_CASE("train: independent and variance lambda=0 checkpoints are bitwise identical") {
    REQUIRE(run_cli("gen-data --n-series 16 --steps 8 --seed 3 --out " + data_path("t2.kts")).code ==
            0);
    const std::string common =
        " --members 2 --latent-dim 4 --hidden 8 --steps 20 --batch 8 --seed 9 --log-every 0";
    REQUIRE(run_cli("train --data " + data_path("t2.kts") + " --out " + data_path("run_ind") +
                    " --regime independent" + common)
                .code == 0);
    REQUIRE(run_cli("train --data " + data_path("t2.kts") + " --out " + data_path("run_var0") +
                    " --regime variance --lambda 0" + common)
                .code == 0);
    CHECK(slurp(data_path("run_ind") + "/checkpoint.json") ==
          slurp(data_path("run_var0") + "/checkpoint.json"));
}

TEST_CASE("train refuses lambda > 1 without the override") {
    auto r = run_cli("train --data " + data_path("t.kts") + " --out " + data_path("run_ref") +
                     " --regime variance --lambda 1.2 --members 2 --steps 5");
    CHECK(r.code == 2);
    CHECK(r.err.find("diverge") != std::string::npos);
}

TEST_CASE("train honors a JSON config file with flag overrides") {
    std::ofstream cfg(work_dir() / "cfg.json");
    cfg << R"({"latent_dim": 5, "hidden": [6], "steps": 12, "members": 2, "batch": 8, "seed": 4})";
    cfg.close();
    auto r = run_cli("train --data " + data_path("t.kts") + " --out " + data_path("run_cfg") +
                     " --config " + (work_dir() / "cfg.json").string() +
                     " --steps 17 --log-every 0");
    REQUIRE(r.code == 0);
    const auto ck = nlohmann::json::parse(slurp(data_path("run_cfg") + "/checkpoint.json"));
    CHECK(ck.at("latent_dim").get<int>() == 5);       // from config file
    CHECK(ck.at("hidden").get<std::vector<int>>() == std::vector<int>{6});
    CHECK(ck.at("step").get<int>() == 17);            // flag overrides file
    CHECK(ck.at("members").get<int>() == 2);
}

TEST_CASE("evaluate: single-member CRPS equals MAE and runs are deterministic") {
    REQUIRE(run_cli("train --data " + data_path("t.kts") + " --out " + data_path("run_m1") +
                    " --members 1 --latent-dim 4 --hidden 8 --steps 10 --batch 8 --seed 2 "
                    "--log-every 0")
                .code == 0);
    auto r = run_cli("evaluate --ckpt " + data_path("run_m1") + "/checkpoint.json --data " +
                     data_path("t.kts") + " --out " + data_path("eval_m1"));
    REQUIRE(r.code == 0);
    const auto report = nlohmann::json::parse(slurp(data_path("eval_m1") + "/report.json"));
    const double crps = report.at("crps_per_scalar").get<double>();
    const double mae = report.at("mae").get<double>();
    CHECK(std::fabs(crps - mae) <= 1e-12 * std::max(1.0, std::fabs(mae)));
    CHECK(report.at("ssrat").get<double>() == 0.0);
    CHECK(report.at("flag").get<std::string>() == "overconfident");

    auto r2 = run_cli("evaluate --ckpt " + data_path("run_m1") + "/checkpoint.json --data " +
                      data_path("t.kts") + " --out " + data_path("eval_m1b"));
    REQUIRE(r2.code == 0);
    CHECK(slurp(data_path("eval_m1") + "/report.json") ==
          slurp(data_path("eval_m1b") + "/report.json"));
    CHECK(slurp(data_path("eval_m1") + "/bins.csv") == slurp(data_path("eval_m1b") + "/bins.csv"));
    CHECK(r.out == r2.out);
}

TEST_CASE("evaluate: dimension mismatch exits with the data code") {
    REQUIRE(run_cli("gen-data --system linear --a-matrix 0 --n-series 4 --steps 4 --out " +
                    data_path("one_channel.kts"))
                .code == 0);
    auto r = run_cli("evaluate --ckpt " + data_path("run_m1") + "/checkpoint.json --data " +
                     data_path("one_channel.kts"));
    CHECK(r.code == 3);
    CHECK(r.err.find("channels") != std::string::npos);
}

TEST_CASE("corrupt dataset files exit with the data code") {
    std::ofstream f(work_dir() / "trunc.kts", std::ios::binary);
    f << "KTS1\x02";
    f.close();
    auto r = run_cli("train --data " + (work_dir() / "trunc.kts").string() + " --out " +
                     data_path("run_bad") + " --steps 2");
    CHECK(r.code == 3);
    CHECK(r.err.find("byte") != std::string::npos);
}

TEST_CASE("forecast: CSV shape contract and SVG well-formedness") {
    REQUIRE(run_cli("train --data " + data_path("t.kts") + " --out " + data_path("run_fc") +
                    " --members 3 --latent-dim 4 --hidden 8 --steps 10 --batch 8 --seed 6 "
                    "--log-every 0")
                .code == 0);
    auto r = run_cli("forecast --ckpt " + data_path("run_fc") + "/checkpoint.json --data " +
                     data_path("t.kts") + " --series 1 --horizon 6 --out " + data_path("fc.csv") +
                     " --svg " + data_path("fc.svg"));
    REQUIRE(r.code == 0);

    const auto lines = split_lines(slurp(data_path("fc.csv")));
    REQUIRE(lines.size() == 7);  // header + horizon rows
    const std::size_t n = 2, m = 3;
    for (const auto& line : lines) CHECK(split_csv(line).size() == 1 + n * (m + 3));

    const std::string svg = slurp(data_path("fc.svg"));
    CHECK(testutil::xml_well_formed(svg));
    CHECK(testutil::count_occurrences(svg, "class=\"member\"") == m * n);
    CHECK(testutil::count_occurrences(svg, "class=\"truth\"") == n);
    CHECK(testutil::count_occurrences(svg, "class=\"mean\"") == n);

    auto bad = run_cli("forecast --ckpt " + data_path("run_fc") + "/checkpoint.json --data " +
                       data_path("t.kts") + " --series 99 --out " + data_path("fc2.csv"));
    CHECK(bad.code == 2);
    CHECK(bad.err.find("out of range") != std::string::npos);
}

TEST_CASE("forecast: single member column equals the mean column") {
    auto r = run_cli("forecast --ckpt " + data_path("run_m1") + "/checkpoint.json --data " +
                     data_path("t.kts") + " --series 0 --horizon 5 --out " + data_path("fc1.csv"));
    REQUIRE(r.code == 0);
    const auto lines = split_lines(slurp(data_path("fc1.csv")));
    const auto header = split_csv(lines[0]);
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto cells = split_csv(lines[i]);
        for (std::size_t c = 0; c < header.size(); ++c) {
            if (header[c].rfind("mean_", 0) == 0) {
                // member_1 column for this channel directly follows the mean.
                CHECK(cells[c + 1] == cells[c]);
            }
        }
    }
}

TEST_CASE("sweep with a single lambda matches train + evaluate composition") {
    REQUIRE(run_cli("gen-data --n-series 12 --steps 8 --seed 21 --out " + data_path("sw_tr.kts"))
                .code == 0);
    REQUIRE(run_cli("gen-data --n-series 8 --steps 8 --seed 22 --out " + data_path("sw_te.kts"))
                .code == 0);
    const std::string common =
        " --members 2 --latent-dim 4 --hidden 8 --steps 15 --batch 8 --seed 13 --log-every 0";

    auto sweep = run_cli("sweep --data " + data_path("sw_tr.kts") + " --eval-data " +
                         data_path("sw_te.kts") + " --lambdas 0 --out " + data_path("sw_out") +
                         common);
    REQUIRE(sweep.code == 0);
    REQUIRE(fs::exists(data_path("sw_out") + "/sweep.csv"));

    // Reproducible under the same seed.
    auto sweep2 = run_cli("sweep --data " + data_path("sw_tr.kts") + " --eval-data " +
                          data_path("sw_te.kts") + " --lambdas 0 --out " + data_path("sw_out2") +
                          common);
    REQUIRE(sweep2.code == 0);
    CHECK(slurp(data_path("sw_out") + "/sweep.csv") == slurp(data_path("sw_out2") + "/sweep.csv"));

    // Composition: the lambda_0 run equals an individual train + evaluate.
    REQUIRE(run_cli("train --data " + data_path("sw_tr.kts") + " --out " + data_path("sw_manual") +
                    " --regime variance --lambda 0" + common)
                .code == 0);
    CHECK(slurp(data_path("sw_out") + "/lambda_0/checkpoint.json") ==
          slurp(data_path("sw_manual") + "/checkpoint.json"));

    REQUIRE(run_cli("evaluate --ckpt " + data_path("sw_manual") + "/checkpoint.json --data " +
                    data_path("sw_te.kts") + " --out " + data_path("sw_manual_eval"))
                .code == 0);
    const auto manual =
        nlohmann::json::parse(slurp(data_path("sw_manual_eval") + "/report.json"));
    const auto lines = split_lines(slurp(data_path("sw_out") + "/sweep.csv"));
    REQUIRE(lines.size() == 2);
    CHECK(lines[0] == "lambda,crps_train_extrap,crps_transfer,ssrel,ssrat,status");
    const auto cells = split_csv(lines[1]);
    REQUIRE(cells.size() == 6);
    CHECK(cells[0] == "0");
    CHECK(std::stod(cells[2]) ==
          doctest::Approx(manual.at("crps_per_scalar").get<double>()).epsilon(1e-15));
    CHECK(std::stod(cells[4]) == doctest::Approx(manual.at("ssrat").get<double>()).epsilon(1e-15));
    CHECK(cells[5] == "ok");
}

TEST_CASE("train exits with the numeric code and saves a last-good checkpoint") {
    // Doctor a finite checkpoint so the resumed first forward overflows.
    REQUIRE(run_cli("train --data " + data_path("t.kts") + " --out " + data_path("run_pre") +
                    " --members 2 --latent-dim 4 --hidden 8 --steps 3 --batch 8 --seed 44 "
                    "--log-every 0")
                .code == 0);
    auto ck = kuq::load_checkpoint(data_path("run_pre") + "/checkpoint.json");
    for (auto& blob : ck.member_params)
        for (double& v : blob) v *= 1e200;
    kuq::save_checkpoint(ck, data_path("huge.ckpt.json"));

    auto r = run_cli("train --data " + data_path("t.kts") + " --out " + data_path("run_blow") +
                     " --members 2 --latent-dim 4 --hidden 8 --steps 6 --batch 8 --seed 44 "
                     "--resume " + data_path("huge.ckpt.json") + " --log-every 0");
    CHECK(r.code == 4);
    CHECK(fs::exists(data_path("run_blow") + "/checkpoint.last_good.json"));
    // The saved state is the finite resume point, not a half-updated one.
    auto saved = kuq::load_checkpoint(data_path("run_blow") + "/checkpoint.last_good.json");
    CHECK(saved.member_params == ck.member_params);
}

TEST_CASE("evaluation is independent of the worker pool size") {
    auto one = run_cli("evaluate --ckpt " + data_path("run_fc") + "/checkpoint.json --data " +
                       data_path("t.kts") + " --out " + data_path("eval_w1"));
    REQUIRE(one.code == 0);
    const std::string cmd = "KOOPMAN_UQ_THREADS=1 " + std::string(KUQ_CLI_PATH) +
                            " evaluate --ckpt " + data_path("run_fc") + "/checkpoint.json --data " +
                            data_path("t.kts") + " --out " + data_path("eval_w2") + " >" +
                            (work_dir() / "w.out").string() + " 2>&1";
    REQUIRE(std::system(cmd.c_str()) == 0);
    CHECK(slurp(data_path("eval_w1") + "/report.json") ==
          slurp(data_path("eval_w2") + "/report.json"));
}

TEST_CASE("train resume continues from a checkpoint") {
    REQUIRE(run_cli("train --data " + data_path("t.kts") + " --out " + data_path("run_short") +
                    " --members 2 --latent-dim 4 --hidden 8 --steps 10 --batch 8 --seed 33 "
                    "--log-every 0")
                .code == 0);
    REQUIRE(run_cli("train --data " + data_path("t.kts") + " --out " + data_path("run_resumed") +
                    " --members 2 --latent-dim 4 --hidden 8 --steps 20 --batch 8 --seed 33 "
                    "--resume " + data_path("run_short") + "/checkpoint.json --log-every 0")
                .code == 0);
    REQUIRE(run_cli("train --data " + data_path("t.kts") + " --out " + data_path("run_full") +
                    " --members 2 --latent-dim 4 --hidden 8 --steps 20 --batch 8 --seed 33 "
                    "--log-every 0")
                .code == 0);
    CHECK(slurp(data_path("run_resumed") + "/checkpoint.json") ==
          slurp(data_path("run_full") + "/checkpoint.json"));
}
