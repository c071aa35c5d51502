// pden: command-line entry point.
//
//   pden train     --config run.json [--out DIR] [--seed S] [--arm ARM]
//   pden eval      --ckpt model.ckpt --data spec.json [--out DIR]
//   pden gradcheck [--out DIR]
//   pden sweep     --config run.json --param K|w_adv|w_cyc|w_div --values 1,3,5 [--out DIR] [--seed S]
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pden.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw UsageError("--values: '" + item + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("--values: empty value list");
  return out;
}

int report(const pden::RunResult& r) {
  std::cout << "artifacts written to " << r.out_dir.string() << "\n";
  return r.ok ? kOk : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Progressive domain expansion: training, evaluation and checks"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, data_path, param, values_text, arm;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;

  auto* train = app.add_subcommand("train", "run the configured arm end to end");
  train->add_option("--config", config_path, "run config (JSON)")->required();
  train->add_option("--out", out, "output directory");
  train->add_option("--seed", seed, "override train.seed");
  train->add_option("--arm", arm, "override arm: erm|pden|sweep|fewshot|gradcheck");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a data spec");
  eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  eval->add_option("--data", data_path, "data spec (JSON)")->required();
  eval->add_option("--out", out, "output directory for eval.csv");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op and loss");
  gradcheck->add_option("--out", out, "output directory");

  auto* sweep = app.add_subcommand("sweep", "one PDEN arm per value of a hyperparameter");
  sweep->add_option("--config", config_path, "run config (JSON)")->required();
  sweep->add_option("--param", param, "K|w_adv|w_cyc|w_div")->required();
  sweep->add_option("--values", values_text, "comma-separated values")->required();
  sweep->add_option("--out", out, "output directory");
  sweep->add_option("--seed", seed, "override train.seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train || *sweep) {
      pden::RunConfig cfg = pden::load_run_config(config_path);
      if (seed) cfg.train.seed = *seed;
      if (*train && !arm.empty()) cfg.arm = pden::parse_arm(arm);
      if (*sweep) {
        cfg.arm = pden::Arm::sweep;
        try {
          pden::parse_sweep_param(param);
        } catch (const std::invalid_argument& e) {
          throw UsageError(std::string("--param: ") + e.what());
        }
        cfg.sweep.param = param;
        cfg.sweep.values = parse_values(values_text);
      }
      pden::validate(cfg);
      return report(pden::run(cfg, pden::resolve_out_dir(cfg, out), std::cout));
    }
    if (*gradcheck) {
      pden::RunConfig cfg;
      cfg.run_id = "gradcheck";
      cfg.arm = pden::Arm::gradcheck;
      return report(pden::run(cfg, pden::resolve_out_dir(cfg, out), std::cout));
    }
    if (*eval) {
      const auto spec = pden::load_eval_spec(data_path);
      const auto recs = pden::evaluate_checkpoint(ckpt_path, spec);
      for (const auto& r : recs) {
        std::cout << r.domain << " accuracy=" << pden::format_number(r.accuracy) << " (" << r.correct
                  << "/" << r.n << ")\n";
      }
      if (out) {
        pden::detail::write_file(std::filesystem::path(*out) / "eval.csv", pden::metrics_records_csv(recs));
      }
      return kOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "pden: usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const pden::ConfigError& e) {
    std::cerr << "pden: config error: " << e.what() << "\n";
    return kUsage;
  } catch (const pden::CheckpointError& e) {
    std::cerr << "pden: checkpoint error: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "pden: error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
