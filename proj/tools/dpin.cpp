// dpin: experiment runner for decoupled prediction-interval networks.
//
//   dpin regression --config c.json --out dir [--seed N]
//   dpin synthetic  --config c.json --out dir [--seed N]
//   dpin active     --config c.json --out dir [--seed N]
//   dpin gradcheck  [--config c.json] [--out dir] [--seed N]
//
// Exit codes: 0 success, 1 validation error, 2 runtime or divergence error.
// Errors are reported on stderr as {"error": {"type": ..., "message": ...}}.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dpin/experiment.hpp"

namespace {

using nlohmann::json;

int fail(const std::string& type, const std::string& message, int code) {
  std::cerr << json{{"error", {{"type", type}, {"message", message}}}}.dump() << '\n';
  return code;
}

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw dpin::ValidationError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw dpin::ValidationError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoupled prediction-interval network experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config,-c", config_path, "JSON configuration file");
    if (config_required) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--out,-o", out_dir, "output directory (overrides config 'out')");
    sub->add_option("--seed", seed, "root seed (overrides config 'seed')");
  };
  add_common(app.add_subcommand("regression", "repeated train/test regression benchmark"), true);
  add_common(app.add_subcommand("synthetic", "synthetic benchmark with dense-grid interval output"), true);
  add_common(app.add_subcommand("active", "pool-based active learning"), true);
  add_common(app.add_subcommand("gradcheck", "verify loss gradients against finite differences"), false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what(), 1);
  }
  const std::string command = app.get_subcommands().front()->get_name();

  namespace ex = dpin::experiment;
  ex::ExperimentConfig cfg;
  try {
    cfg = ex::parse_config(read_config(config_path), command);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (cfg.out_dir.empty() && command != "gradcheck")
      throw dpin::ValidationError("no output directory: pass --out or set 'out' in the config");
  } catch (const dpin::ValidationError& e) {
    return fail("validation", e.what(), 1);
  } catch (const dpin::DimensionError& e) {
    return fail("validation", e.what(), 1);
  }

  try {
    if (command == "regression") {
      const auto res = ex::run_regression(cfg);
      std::cout << "rmse " << ex::fmt(res.summary.rmse.mean) << " +- " << ex::fmt(res.summary.rmse.se) << ", picp "
                << ex::fmt(res.summary.picp.mean) << ", runs " << res.summary.runs << '\n';
    } else if (command == "synthetic") {
      const auto res = ex::run_synthetic(cfg);
      std::cout << "train rmse " << ex::fmt(res.train_rmse) << ", train picp " << ex::fmt(res.train_picp) << '\n';
    } else if (command == "active") {
      const auto res = ex::run_active_experiment(cfg);
      for (const auto& s : res.summary)
        std::cout << "iteration " << s.iteration << ": rmse " << ex::fmt(s.rmse.mean) << " +- "
                  << ex::fmt(s.rmse.se) << '\n';
    } else {
      const auto rep = ex::run_gradcheck_experiment(cfg, std::cout);
      if (!rep.passed()) return fail("gradcheck", "gradient check failed", 2);
    }
  } catch (const dpin::ValidationError& e) {
    return fail("validation", e.what(), 1);
  } catch (const dpin::DimensionError& e) {
    return fail("validation", e.what(), 1);
  } catch (const dpin::DivergenceError& e) {
    return fail("divergence", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 2);
  }
  return 0;
}
