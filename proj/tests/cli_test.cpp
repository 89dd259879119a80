#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "bnrm/commands.hpp"

namespace {

using namespace bnrm;
namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("bnrm_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json small_config(std::uint64_t seed, const std::string& method = "bnrm") {
  return nlohmann::json::parse(R"({
    "seed": )" + std::to_string(seed) + R"(,
    "world": {"n_train": 200, "n_val": 60, "n_hard": 60},
    "train": {"method": ")" + method + R"(", "epochs": 2, "K": 8, "d_model": 8, "hidden": 8},
    "eval": {"n_prompts": 20, "samples_per_prompt": 64, "n_list": [1, 2, 4, 8, 16, 32, 64]}
  })");
}

void expect_config_error(const nlohmann::json& j, const std::string& needle) {
  try {
    cli::parse_run_config(j);
    ADD_FAILURE() << "expected ConfigError mentioning " << needle;
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

TEST(RunConfig, SchemaErrors) {
  expect_config_error(nlohmann::json::object(), "seed");
  auto j = small_config(1);
  j["train"]["method"] = "bogus";
  expect_config_error(j, "config.train.method");
  j = small_config(1);
  j["world"]["colour"] = 3;
  expect_config_error(j, "config.world.colour");
  j = small_config(1);
  j["extra"] = true;
  expect_config_error(j, "config.extra");
  j = small_config(1);
  j["train"]["epochs"] = "many";
  expect_config_error(j, "config.train.epochs");
  j = small_config(1);
  j["world"]["noise_rate"] = 0.6;
  expect_config_error(j, "noise_rate");
}

TEST(RunConfig, SeedOverrideAndEffectiveConfig) {
  const auto c = cli::parse_run_config(nlohmann::json::object(), 42);
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.world.seed, 42u);
  EXPECT_EQ(c.train.seed, 42u);
  const auto e = c.effective();
  EXPECT_EQ(e["train"]["eta"], 1e-5);
  EXPECT_EQ(e["train"]["K"], 64);
  // The effective config parses back to the same run.
  EXPECT_EQ(cli::parse_run_config(nlohmann::json::parse(e.dump())).hash(), c.hash());
  EXPECT_NE(cli::parse_run_config(nlohmann::json::object(), 43).hash(), c.hash());
}

TEST(Commands, GenDataWritesDeterministicFiles) {
  const auto cfg = cli::parse_run_config(small_config(3));
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  std::ostringstream log;
  cli::cmd_gen_data(cfg, a, log);
  cli::cmd_gen_data(cfg, b, log);
  for (const char* f : {"train.jsonl", "val.jsonl", "hard.jsonl", "provenance.json"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_EQ(load_jsonl((a / "train.jsonl").string()).size(), 200u);
  EXPECT_NE(log.str().find("pairs_train = 200"), std::string::npos);
}

TEST(Commands, TrainEvalAndAnalyses) {
  for (const std::string method : {"bt", "bnrm"}) {
    const auto cfg = cli::parse_run_config(small_config(5, method));
    const auto dir = scratch("run_" + method);
    std::ostringstream log;
    cli::cmd_gen_data(cfg, dir / "data", log);
    cli::cmd_train(cfg, dir / "data", dir / "model", log);
    const auto csv = slurp(dir / "model" / "train_log.csv");
    ASSERT_FALSE(csv.empty());
    // Last line of each epoch carries val_acc.
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    std::size_t with_acc = 0;
    bool kl_nonzero = false;
    while (std::getline(lines, line)) {
      if (line.back() != ',') ++with_acc;
      std::vector<std::string> cols;
      std::stringstream ls(line);
      for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
      if (cols.size() >= 5 && std::stod(cols[3]) != 0.0 && std::stod(cols[4]) != 0.0) kl_nonzero = true;
    }
    EXPECT_EQ(with_acc, 2u);
    EXPECT_EQ(kl_nonzero, method == "bnrm");

    const auto ckpt = (dir / "model" / "checkpoint.json").string();
    const auto val = (dir / "data" / "val.jsonl").string();
    const double acc = cli::cmd_eval(ckpt, val, (dir / "eval.csv").string(), log);
    EXPECT_EQ(slurp(dir / "eval.csv"), "metric,value\naccuracy," + fmt_float(acc) + "\n");

    std::ostringstream bias_log;
    cli::cmd_bias_report(length_scorer(), val, 10, (dir / "bias.csv").string(), bias_log);
    EXPECT_EQ(bias_log.str(), "pearson = 1.000\n");

    const auto curve = cli::cmd_bon(cfg, gold_scorer(), (dir / "bon.csv").string(), log);
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
      EXPECT_GE(curve.points[i].gold_score, curve.points[i - 1].gold_score);
    }
    const auto model = load_checkpoint(ckpt);
    const auto model_curve = cli::cmd_bon(cfg, model_scorer(model), (dir / "bon_m.csv").string(), log);
    EXPECT_EQ(model_curve.points.size(), 7u);

    if (method == "bnrm") {
      cli::cmd_dump_factors(ckpt, val, cfg.eval, (dir / "factors.csv").string(), log);
      const auto first = slurp(dir / "factors.csv");
      cli::cmd_dump_factors(ckpt, val, cfg.eval, (dir / "factors.csv").string(), log);
      EXPECT_EQ(first, slurp(dir / "factors.csv"));
    } else {
      EXPECT_THROW(cli::cmd_dump_factors(ckpt, val, cfg.eval, (dir / "f.csv").string(), log),
                   ConfigError);
    }
  }
}

TEST(Commands, TrainIsByteDeterministic) {
  const auto cfg = cli::parse_run_config(small_config(9));
  const auto dir = scratch("det");
  std::ostringstream log;
  cli::cmd_gen_data(cfg, dir / "data", log);
  cli::cmd_train(cfg, dir / "data", dir / "a", log);
  cli::cmd_train(cfg, dir / "data", dir / "b", log);
  EXPECT_EQ(slurp(dir / "a" / "train_log.csv"), slurp(dir / "b" / "train_log.csv"));
  EXPECT_EQ(slurp(dir / "a" / "checkpoint.json"), slurp(dir / "b" / "checkpoint.json"));
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(BNRM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Binary, ExitCodes) {
  const auto dir = scratch("bin");
  std::ofstream(dir / "cfg.json") << small_config(2).dump();
  std::ofstream(dir / "noseed.json") << R"({"world": {}})";
  std::ofstream(dir / "bogus.json") << R"({"seed": 1, "train": {"method": "bogus"}})";
  const std::string cfg = " --config " + (dir / "cfg.json").string();

  EXPECT_EQ(run_cli(cfg + " --print-effective-config"), 0);
  EXPECT_EQ(run_cli("--config " + (dir / "noseed.json").string() + " gen-data --out " +
                    (dir / "x").string()),
            2);
  EXPECT_EQ(run_cli("--config " + (dir / "bogus.json").string() + " train --data " +
                    (dir / "d").string() + " --out " + (dir / "m").string()),
            2);
  EXPECT_EQ(run_cli("--no-such-flag"), 2);
  EXPECT_EQ(run_cli(cfg + " gen-data --out " + (dir / "d").string()), 0);
  EXPECT_EQ(run_cli(cfg + " train --data " + (dir / "missing").string() + " --out " +
                    (dir / "m").string()),
            3);
  EXPECT_EQ(run_cli(cfg + " train --data " + (dir / "d").string() + " --out " + (dir / "m").string()),
            0);
  EXPECT_EQ(run_cli("eval --checkpoint " + (dir / "m" / "checkpoint.json").string() + " --data " +
                    (dir / "d" / "hard.jsonl").string() + " --out " + (dir / "e.csv").string()),
            0);
  EXPECT_EQ(run_cli("bias-report --scorer length --data " + (dir / "d" / "hard.jsonl").string() +
                    " --out " + (dir / "b.csv").string()),
            0);
  EXPECT_EQ(run_cli(cfg + " bon --proxy gold --out " + (dir / "bon.csv").string()), 0);

  // A dataset with a different feature dimension is a data error.
  auto other = small_config(2);
  other["world"]["d_in"] = 8;
  std::ofstream(dir / "other.json") << other.dump();
  EXPECT_EQ(run_cli("--config " + (dir / "other.json").string() + " gen-data --out " +
                    (dir / "d8").string()),
            0);
  EXPECT_EQ(run_cli("eval --checkpoint " + (dir / "m" / "checkpoint.json").string() + " --data " +
                    (dir / "d8" / "val.jsonl").string() + " --out " + (dir / "e8.csv").string()),
            3);

  // A model whose weights overflow trips the numeric-failure code.
  auto ckpt = nlohmann::json::parse(slurp(dir / "m" / "checkpoint.json"));
  for (auto& v : ckpt["members"][0]["tensors"]["encoder.b2"]["data"]) v = 1e308;
  for (auto& v : ckpt["members"][0]["tensors"]["head.w_ell"]["data"]) v = 1e308;
  std::ofstream(dir / "bad.json") << ckpt.dump();
  EXPECT_EQ(run_cli("eval --checkpoint " + (dir / "bad.json").string() + " --data " +
                    (dir / "d" / "val.jsonl").string() + " --out " + (dir / "eb.csv").string()),
            4);
}

}  // namespace
