// bnrm: generate synthetic preference data, train reward models, and run
// the length-bias / best-of-N / factor analyses.
//
// Exit codes: 0 success, 2 config or usage error, 3 data error, 4 numeric failure.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "bnrm/commands.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

bnrm::cli::RunConfig config_or_default(const std::string& path, std::optional<std::uint64_t> seed) {
  if (!path.empty()) return bnrm::cli::load_run_config(path, seed);
  if (!seed) throw bnrm::ConfigError("config.seed: missing required field (pass --config or --seed)");
  return bnrm::cli::parse_run_config(nlohmann::json{{"seed", *seed}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian non-negative reward model toolkit"};
  app.require_subcommand(0, 1);
  app.fallthrough();

  std::string config_path, out, data, checkpoint, scorer = "model", proxy = "model";
  std::optional<std::uint64_t> seed;
  bool print_config = false;

  app.add_option("--config", config_path, "Run configuration (JSON)");
  app.add_option("--seed", seed, "Override config seed");
  app.add_flag("--print-effective-config", print_config,
               "Print the configuration with defaults merged, then exit");

  auto* gen = app.add_subcommand("gen-data", "Write train/val/hard JSONL splits and provenance");
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a reward model");
  tr->add_option("--data", data, "Directory with train.jsonl and val.jsonl")->required();
  tr->add_option("--out", out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Pairwise accuracy of a checkpoint");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--data", data, "JSONL dataset")->required();
  ev->add_option("--out", out, "CSV output")->required();

  auto* bias = app.add_subcommand("bias-report", "Length/reward Pearson correlation report");
  bias->add_option("--checkpoint", checkpoint);
  bias->add_option("--scorer", scorer, "model | length")->check(CLI::IsMember({"model", "length"}));
  bias->add_option("--data", data, "JSONL dataset")->required();
  bias->add_option("--out", out, "CSV output")->required();

  auto* bon = app.add_subcommand("bon", "Best-of-N proxy/gold curve");
  bon->add_option("--checkpoint", checkpoint);
  bon->add_option("--proxy", proxy, "model | gold | length")
      ->check(CLI::IsMember({"model", "gold", "length"}));
  bon->add_option("--out", out, "CSV output")->required();

  auto* dump = app.add_subcommand("dump-factors", "Per-pair theta/Phi factor activations");
  dump->add_option("--checkpoint", checkpoint)->required();
  dump->add_option("--data", data, "JSONL dataset")->required();
  dump->add_option("--out", out, "CSV output")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    namespace cli = bnrm::cli;
    if (print_config) {
      std::cout << config_or_default(config_path, seed).effective().dump(2) << '\n';
      return kOk;
    }
    if (app.get_subcommands().empty()) {
      std::cerr << app.help();
      return kConfig;
    }
    auto need_checkpoint = [&] {
      if (checkpoint.empty()) throw bnrm::ConfigError("--checkpoint is required for this scorer");
    };

    if (gen->parsed()) {
      cli::cmd_gen_data(config_or_default(config_path, seed), out, std::cout);
    } else if (tr->parsed()) {
      cli::cmd_train(config_or_default(config_path, seed), data, out, std::cout);
    } else if (ev->parsed()) {
      cli::cmd_eval(checkpoint, data, out, std::cout);
    } else if (bias->parsed()) {
      const auto cfg = config_path.empty() ? cli::RunConfig{} : cli::load_run_config(config_path, seed);
      if (scorer == "length") {
        cli::cmd_bias_report(bnrm::length_scorer(), data, cfg.eval.n_buckets, out, std::cout);
      } else {
        need_checkpoint();
        const auto model = bnrm::load_checkpoint(checkpoint);
        const auto ds = bnrm::load_jsonl(data);
        bnrm::require_compatible(model, ds.require_d_in());
        cli::cmd_bias_report(bnrm::model_scorer(model), data, cfg.eval.n_buckets, out, std::cout);
      }
    } else if (bon->parsed()) {
      const auto cfg = config_or_default(config_path, seed);
      if (proxy == "gold") {
        cli::cmd_bon(cfg, bnrm::gold_scorer(), out, std::cout);
      } else if (proxy == "length") {
        cli::cmd_bon(cfg, bnrm::length_scorer(), out, std::cout);
      } else {
        need_checkpoint();
        const auto model = bnrm::load_checkpoint(checkpoint);
        bnrm::require_compatible(model, cfg.world.d_in);
        cli::cmd_bon(cfg, bnrm::model_scorer(model), out, std::cout);
      }
    } else if (dump->parsed()) {
      const auto cfg = config_path.empty() ? cli::RunConfig{} : cli::load_run_config(config_path, seed);
      cli::cmd_dump_factors(checkpoint, data, cfg.eval, out, std::cout);
    }
    return kOk;
  } catch (const bnrm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const bnrm::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const bnrm::ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const bnrm::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const bnrm::DomainError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
