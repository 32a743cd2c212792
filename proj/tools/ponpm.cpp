#include <CLI11.hpp>

#include <iostream>

#include "npm/experiment.hpp"

using namespace npm;
using namespace npm::exp;

namespace {

ExperimentConfig base_config(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_config(path);
}

std::vector<double> parse_eps(const std::string& s) {
  return s.empty() ? std::vector<double>{} : npm::exp::detail::parse_list<double>("--eps", s);
}

void print_csv(const fs::path& file) { std::cout << io::read_file(file); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partially observable neural predictive monitoring with conformal error detection"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string config_path, model, mode, approach, profile, data, out, bundle, eps;
  std::uint64_t seed = 0;
  int n = 0, windows = 0, pool = 0, iters = -1;
  double noise_scale = 1.0;

  auto* gen = app.add_subcommand("gen", "Generate a labeled dataset");
  gen->add_option("--model", model, "ip, sn, cvdp, lalo, twt or linear:<file>")->required();
  gen->add_option("--mode", mode, "ind or seq")->required();
  gen->add_option("--n", n, "Number of samples")->required();
  gen->add_option("--seed", seed)->required();
  gen->add_option("--out", out, "Output dataset directory")->required();
  gen->add_option("--windows", windows, "Sequential windows per trajectory");
  gen->add_option("--config", config_path);

  auto* train = app.add_subcommand("train", "Split, train and calibrate a monitor into a bundle");
  train->add_option("--approach", approach, "e2e or two-step")->required();
  train->add_option("--profile", profile, "desk or paper")->required();
  train->add_option("--data", data, "Dataset directory")->required();
  train->add_option("--out", out, "Bundle directory")->required();
  auto* train_seed = train->add_option("--seed", seed);
  train->add_option("--config", config_path);

  auto* eval = app.add_subcommand("eval", "Evaluate a bundle on its test split");
  eval->add_option("--bundle", bundle)->required();
  eval->add_option("--eps", eps, "Comma-separated significance levels");

  auto* active = app.add_subcommand("active", "Uncertainty-aware active learning on a bundle");
  active->add_option("--bundle", bundle)->required();
  active->add_option("--pool", pool, "Pool size per iteration");
  active->add_option("--iters", iters, "Number of iterations");

  auto* anomaly = app.add_subcommand("anomaly", "Evaluate under rescaled observation noise");
  anomaly->add_option("--bundle", bundle)->required();
  anomaly->add_option("--noise-scale", noise_scale, "Multiplier on the observation noise std")->required();

  auto* compare = app.add_subcommand("compare-se", "Compare the neural state estimator with a UKF");
  compare->add_option("--bundle", bundle)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      ExperimentConfig c = base_config(config_path);
      c.model = model;
      c.mode = gen_mode_from_string(mode);
      c.seeds = {seed};
      if (windows) c.windows = windows;
      std::cout << cmd_gen(c, n, out).dump(2) << "\n";
    } else if (train->parsed()) {
      ExperimentConfig c = base_config(config_path);
      c.approach = approach_from_string(approach);
      c.profile = profile_from_string(profile);
      if (train_seed->count()) c.seeds = {seed};
      const json r = cmd_train(c, data, out);
      std::cout << "trained " << r.at("header").at("approach").get<std::string>() << " monitor into " << out
                << " (config " << r.at("header").at("config_hash").get<std::string>() << ")\n";
    } else if (eval->parsed()) {
      cmd_eval(bundle, parse_eps(eps));
      print_csv(fs::path(bundle) / "reports" / "eval.csv");
    } else if (active->parsed()) {
      cmd_active(bundle, pool, iters);
      print_csv(fs::path(bundle) / "reports" / "active.csv");
    } else if (anomaly->parsed()) {
      cmd_anomaly(bundle, noise_scale);
      print_csv(fs::path(bundle) / "reports" / "anomaly.csv");
    } else if (compare->parsed()) {
      cmd_compare_se(bundle);
      print_csv(fs::path(bundle) / "reports" / "compare_se.csv");
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
