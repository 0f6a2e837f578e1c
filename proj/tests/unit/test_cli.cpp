#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "vqlab/io.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = VQLAB_CLI_PATH;
const std::string kDir = "/tmp/vqlab_cli_tests";

int run(const std::string& args) {
  const std::string cmd = kCli + " " + args;
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) { return vqlab::read_file(path); }

struct Setup {
  Setup() {
    fs::remove_all(kDir);
    fs::create_directories(kDir);
    std::ofstream cb(kDir + "/cb3.txt");
    cb << "3 1 euclidean\n0\n1\n3\n";
    std::ofstream cb2(kDir + "/cb2.txt");
    cb2 << "2 1 euclidean\n0\n2\n";
    std::ofstream feat(kDir + "/feat.txt");
    feat << "shape: 2 2 1\n0.1 0.9\n2.9 3.2\n";
  }
};
const Setup setup_once;

}  // namespace

TEST_CASE("kl-curve dropout grid matches the closed form") {
  REQUIRE(run("kl-curve --mode dropout --grid 0,0.5,0.9 --out " + kDir + "/kl_drop.csv 2>/dev/null") == 0);
  const std::string body = slurp(kDir + "/kl_drop.csv");
  CHECK(body.find("kind,param,kl") == 0);
  CHECK(body.find("dropout,0,0\n") != std::string::npos);
  CHECK(body.find("0.15342640972002736") != std::string::npos);
}

TEST_CASE("kl-curve qpm at eps 0 reports zero") {
  REQUIRE(run("kl-curve --mode qpm --eps 0 --codebook " + kDir + "/cb3.txt --out " + kDir +
              "/kl_qpm0.csv 2>/dev/null") == 0);
  CHECK(slurp(kDir + "/kl_qpm0.csv").find("qpm,0,0\n") != std::string::npos);
}

TEST_CASE("bounds on an equidistant codebook collapse to 1/K") {
  REQUIRE(run("bounds --codebook " + kDir + "/cb2.txt --out " + kDir + "/bounds.csv 2>/dev/null") == 0);
  const std::string body = slurp(kDir + "/bounds.csv");
  CHECK(body.find("lower,upper,dmin,dmax") == 0);
  CHECK(body.find("0.5,0.5,2,2") != std::string::npos);
}

TEST_CASE("quantize then perturb round trip") {
  REQUIRE(run("quantize --codebook " + kDir + "/cb3.txt --features " + kDir + "/feat.txt --out " +
              kDir + "/idx.txt 2>/dev/null") == 0);
  const std::string idx = slurp(kDir + "/idx.txt");
  CHECK(idx == "2 2\n0 1\n2 2\n");
  REQUIRE(run("perturb --codebook " + kDir + "/cb3.txt --indices " + kDir +
              "/idx.txt --eps 0 --seed 1 --out " + kDir + "/idx0.txt 2>/dev/null") == 0);
  CHECK(slurp(kDir + "/idx0.txt") == idx);  // eps 0 is the identity
}

TEST_CASE("analytic commands are byte-identical across runs") {
  for (const std::string cmd :
       {std::string("kernel --codebook ") + kDir + "/cb3.txt --eps 0.7",
        std::string("compare --codebook ") + kDir + "/cb3.txt",
        std::string("codebook init --k 8 --d 3 --seed 5"),
        std::string("codebook export-pca --codebook ") + kDir + "/cb3.txt",
        std::string("gen-data --n 4 --size 16 --seed 2 --out ") + kDir + "/data && cat " + kDir +
            "/data/index.csv"}) {
    REQUIRE(run(cmd + " > " + kDir + "/out_a.txt 2>/dev/null") == 0);
    REQUIRE(run(cmd + " > " + kDir + "/out_b.txt 2>/dev/null") == 0);
    CHECK(slurp(kDir + "/out_a.txt") == slurp(kDir + "/out_b.txt"));
  }
}

TEST_CASE("exit codes") {
  CHECK(run("bounds --no-such-flag 2>/dev/null") == 2);
  CHECK(run("no-such-command 2>/dev/null") == 2);
  CHECK(run("bounds --codebook /nonexistent/cb.txt 2>/dev/null") == 1);
  CHECK(run("kl-curve --mode dropout --grid 0.5,1.5 2>/dev/null") == 1);  // p out of range
  CHECK(run("--help > /dev/null 2>&1") == 0);
  CHECK(run("train --help > /dev/null 2>&1") == 0);
  CHECK(run("codebook --help > /dev/null 2>&1") == 0);
}

TEST_CASE("ttest command") {
  REQUIRE(run("ttest --a 0.60,0.62,0.61,0.63 --b 0.58,0.59,0.60,0.60 --out " + kDir +
              "/ttest.csv 2>/dev/null") == 0);
  const std::string body = slurp(kDir + "/ttest.csv");
  CHECK(body.find("t,p,degenerate") == 0);
  CHECK(body.find("4.700") != std::string::npos);
  CHECK(body.find(",0\n") != std::string::npos);
  REQUIRE(run("ttest --a 1,2 --b 1,2 --out " + kDir + "/ttest_deg.csv 2>/dev/null") == 0);
  CHECK(slurp(kDir + "/ttest_deg.csv").find(",1\n") != std::string::npos);
}

TEST_CASE("codebook report emits the utilization CSV schema") {
  REQUIRE(run("codebook report --codebook " + kDir + "/cb3.txt --features " + kDir +
              "/feat.txt --out " + kDir + "/util.csv 2>/dev/null") == 0);
  const std::string body = slurp(kDir + "/util.csv");
  CHECK(body.find("step,utilization,entropy_of_histogram") == 0);
}

TEST_CASE("align-loss on identical single patch is zero") {
  std::ofstream f(kDir + "/patch.txt");
  f << "shape: 1 1 3\n1 2 3\n";
  f.close();
  REQUIRE(run("align-loss --pfa " + kDir + "/patch.txt --fm " + kDir + "/patch.txt --out " + kDir +
              "/al.txt 2>/dev/null") == 0);
  CHECK(slurp(kDir + "/al.txt") == "0\n");
}

TEST_CASE("train and eval round trip on a tiny config") {
  const std::string run_dir = kDir + "/run";
  fs::remove_all(run_dir);
  REQUIRE(run("train --out " + run_dir +
              " --iters 3 --n 12 --image-size 16 --seed 1 2>/dev/null > " + kDir + "/train_out.txt") == 0);
  CHECK(slurp(kDir + "/train_out.txt").find("test_dice_mean=") != std::string::npos);
  CHECK(fs::exists(run_dir + "/losses.csv"));
  REQUIRE(run("eval --run " + run_dir + " --out " + kDir + "/eval.json 2>/dev/null") == 0);
  // eval regenerates the same test set: metrics match the train-time report
  CHECK(slurp(kDir + "/eval.json") == slurp(run_dir + "/metrics.json"));
}
