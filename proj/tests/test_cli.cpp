#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "common.hpp"

using namespace pden;
using pden::test::scratch;

namespace {

const std::string kCli = PDEN_CLI_PATH;

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome run_cli(const std::string& args, const std::filesystem::path& dir) {
  const auto log = dir / "cli.log";
  const std::string cmd = kCli + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.out = read_bytes(log);
  return o;
}

void write_text(const std::filesystem::path& p, const std::string& s) { std::ofstream(p) << s; }

/// A few seconds of training on a small toy set.
std::string small_config(const std::string& run_id, const std::string& arm = "pden") {
  return R"({"run_id": ")" + run_id + R"(", "arm": ")" + arm + R"(",
    "data": {"kind": "toy", "classes": 3, "train_count": 48, "test_count": 60, "height": 16, "width": 16},
    "benchmark": [{"kind": "invert", "severity": 5, "seed": 1}, {"kind": "blur", "severity": 3, "seed": 1}],
    "model": {"f_channels": [4, 8, 8], "c_hidden": 8, "d_z": 4, "g_channels": [4, 4], "d_n": 4},
    "train": {"K": 1, "T_gen": 10, "T_task": 10, "N": 4, "lr_task": 0.003, "lr_gen": 0.003,
              "w_cyc": 20, "w_adv": 0.1, "w_div": 0.1, "seed": 3, "probe_size": 16},
    "fewshot": {"shift": {"kind": "speckle", "severity": 5, "seed": 1}, "shots": [1, 2], "steps": 5, "lr": 0.001},
    "sweep": {"param": "K", "values": [1, 2]}})";
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

TEST(Cli, MissingConfigIsUsageError) {
  auto dir = scratch("cli-missing");
  EXPECT_EQ(run_cli("train", dir).code, 2);
  EXPECT_EQ(run_cli("train --config " + (dir / "nope.json").string(), dir).code, 2);
  EXPECT_EQ(run_cli("", dir).code, 2);
  EXPECT_EQ(run_cli("frobnicate", dir).code, 2);
}

TEST(Cli, BadConfigIsUsageError) {
  auto dir = scratch("cli-badcfg");
  write_text(dir / "c.json", R"({"train": {"w_advv": 0.1}})");
  auto o = run_cli("train --config " + (dir / "c.json").string() + " --out " + (dir / "o").string(), dir);
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.out.find("w_advv"), std::string::npos);
}

TEST(Cli, DeskToyConfigCompletesWithArtifacts) {
  auto dir = scratch("cli-desk");
  const auto cfg = std::filesystem::path(PDEN_SOURCE_DIR) / "configs" / "toy.json";
  const auto t0 = std::chrono::steady_clock::now();
  auto o = run_cli("train --config " + cfg.string() + " --out " + (dir / "run").string(), dir);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ASSERT_EQ(o.code, 0) << o.out;
  EXPECT_LT(secs, 120.0);
  for (const char* f : {"manifest.json", "metrics.csv", "train_log.csv", "expansions.csv", "features.csv",
                        "checkpoints/model.ckpt", "checkpoints/pretrain-k0.ckpt", "checkpoints/generator-k3.ckpt",
                        "grids/source.pgm", "grids/synthetic-k1.pgm", "grids/synthetic-k3.pgm",
                        "data/source-train.json"})
    EXPECT_TRUE(std::filesystem::exists(dir / "run" / f)) << f;
  auto manifest = nlohmann::json::parse(read_bytes(dir / "run" / "manifest.json"));
  EXPECT_EQ(manifest["format"], "pden-run-1");
  EXPECT_EQ(manifest["config_hash"], config_hash(load_run_config(cfg)));
  for (auto it = manifest["artifacts"].begin(); it != manifest["artifacts"].end(); ++it)
    EXPECT_EQ(it.value(), fnv1a_hex(read_bytes(dir / "run" / it.key()))) << it.key();
}

TEST(Cli, RerunReproducesMetrics) {
  auto dir = scratch("cli-rerun");
  write_text(dir / "c.json", small_config("rerun"));
  const std::string base = "train --config " + (dir / "c.json").string() + " --out ";
  ASSERT_EQ(run_cli(base + (dir / "a").string(), dir).code, 0);
  ASSERT_EQ(run_cli(base + (dir / "b").string(), dir).code, 0);
  for (const char* f : {"metrics.csv", "train_log.csv", "checkpoints/model.ckpt", "features.csv"})
    EXPECT_EQ(read_bytes(dir / "a" / f), read_bytes(dir / "b" / f)) << f;
  ASSERT_EQ(run_cli(base + (dir / "c").string() + " --seed 4", dir).code, 0);
  EXPECT_NE(read_bytes(dir / "a" / "metrics.csv"), read_bytes(dir / "c" / "metrics.csv"));
}

TEST(Cli, EvalReproducesLoggedTrainAccuracy) {
  auto dir = scratch("cli-eval");
  write_text(dir / "c.json", small_config("ev"));
  ASSERT_EQ(run_cli("train --config " + (dir / "c.json").string() + " --out " + (dir / "run").string(), dir).code, 0);
  std::string logged;
  {
    std::ifstream in(dir / "run" / "train_log.csv");
    for (std::string l; std::getline(in, l);) {
      auto f = split(l);
      if (f[0] == "retrain" && f.size() > 11 && !f[11].empty()) logged = f[11];
    }
  }
  ASSERT_FALSE(logged.empty());
  write_text(dir / "spec.json", R"({"data": {"kind": "toy", "classes": 3, "train_count": 48, "test_count": 60,
      "height": 16, "width": 16}, "benchmark": [{"kind": "invert", "severity": 5, "seed": 1},
      {"kind": "contrast", "severity": 2, "seed": 1}], "seed": 3, "include_train": true})");
  auto o = run_cli("eval --ckpt " + (dir / "run" / "checkpoints" / "model.ckpt").string() + " --data " +
                       (dir / "spec.json").string() + " --out " + (dir / "ev").string(),
                   dir);
  ASSERT_EQ(o.code, 0) << o.out;
  std::ifstream in(dir / "ev" / "eval.csv");
  std::vector<std::vector<std::string>> rows;
  for (std::string l; std::getline(in, l);) rows.push_back(split(l));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0][0], "domain");
  EXPECT_EQ(rows[1][0], "source-train");
  EXPECT_DOUBLE_EQ(std::stod(rows[1][1]), std::stod(logged));
  EXPECT_EQ(rows[2][0], "source");
  EXPECT_EQ(rows[3][0], "invert-5");
  EXPECT_EQ(rows[4][0], "contrast-2");
  EXPECT_EQ(rows[1][4], fnv1a_hex(read_bytes(dir / "run" / "checkpoints" / "model.ckpt")));
}

TEST(Cli, EvalRejectsBadCheckpoint) {
  auto dir = scratch("cli-badckpt");
  write_text(dir / "bad.ckpt", "definitely not a checkpoint");
  write_text(dir / "spec.json", R"({"data": {"kind": "toy", "classes": 3, "test_count": 5, "height": 16, "width": 16}})");
  auto o = run_cli("eval --ckpt " + (dir / "bad.ckpt").string() + " --data " + (dir / "spec.json").string(), dir);
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.out.find("checkpoint"), std::string::npos);
  write_text(dir / "spec2.json", R"({"data": {}, "extra": 1})");
  EXPECT_EQ(run_cli("eval --ckpt " + (dir / "bad.ckpt").string() + " --data " + (dir / "spec2.json").string(), dir).code,
            2);
}

TEST(Cli, ErmAndFewshotArms) {
  auto dir = scratch("cli-arms");
  write_text(dir / "c.json", small_config("arms"));
  const std::string base = "train --config " + (dir / "c.json").string();
  ASSERT_EQ(run_cli(base + " --arm erm --out " + (dir / "erm").string(), dir).code, 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "erm" / "checkpoints" / "model.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(dir / "erm" / "expansions.csv"));
  auto o = run_cli(base + " --arm fewshot --out " + (dir / "fs").string(), dir);
  ASSERT_EQ(o.code, 0) << o.out;
  std::ifstream in(dir / "fs" / "fewshot.csv");
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "run_id,arm,domain,shots,steps,heads_only,accuracy,n,seed");
  EXPECT_EQ(split(lines[1])[3], "0");
  EXPECT_EQ(split(lines[3])[3], "2");
  EXPECT_EQ(run_cli(base + " --arm bogus", dir).code, 2);
}

TEST(Cli, SweepDedupesAndRejectsEmpty) {
  auto dir = scratch("cli-sweep");
  write_text(dir / "c.json", small_config("sw"));
  const std::string base = "sweep --config " + (dir / "c.json").string() + " --param K";
  auto o = run_cli(base + " --values 1,2,1 --out " + (dir / "s").string(), dir);
  ASSERT_EQ(o.code, 0) << o.out;
  EXPECT_NE(o.out.find("warning: dropped 1 duplicate"), std::string::npos);
  std::ifstream in(dir / "s" / "sweep.csv");
  std::size_t pden_means = 0;
  for (std::string l; std::getline(in, l);) {
    auto f = split(l);
    pden_means += f.size() > 3 && f[1] == "pden" && f[3] == "mean";
  }
  EXPECT_EQ(pden_means, 2u);
  EXPECT_EQ(run_cli(base + " --values ,", dir).code, 2);
  EXPECT_EQ(run_cli(base + " --values 1,x", dir).code, 2);
  EXPECT_EQ(run_cli("sweep --config " + (dir / "c.json").string() + " --param lr --values 1", dir).code, 2);
}

TEST(Cli, SweepAcceptsWeightGrid) {
  auto dir = scratch("cli-grid");
  write_text(dir / "c.json", small_config("grid"));
  auto o = run_cli("sweep --config " + (dir / "c.json").string() +
                       " --param w_adv --values 0.02,0.05,0.08,0.1,0.13,0.16,0.2 --out " + (dir / "s").string(),
                   dir);
  ASSERT_EQ(o.code, 0) << o.out;
  auto manifest = nlohmann::json::parse(read_bytes(dir / "s" / "manifest.json"));
  ASSERT_EQ(manifest["summary"]["points"].size(), 7u);
  EXPECT_DOUBLE_EQ(manifest["summary"]["points"][4]["value"].get<double>(), 0.13);
}

TEST(Cli, GradcheckPasses) {
  auto dir = scratch("cli-gradcheck");
  const auto t0 = std::chrono::steady_clock::now();
  auto o = run_cli("gradcheck --out " + (dir / "g").string(), dir);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(o.code, 0) << o.out;
  EXPECT_LT(secs, 60.0);
  for (const char* name : {"matmul", "conv2d", "instance_stats", "adain", "info_nce2", "loss_unseen"})
    EXPECT_NE(o.out.find(name), std::string::npos) << name;
  EXPECT_EQ(o.out.find("FAIL"), std::string::npos);
}
