#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cdm/cli.hpp"
#include "cdm/config.hpp"
#include "cdm/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Conformal diffusion intervals for individual treatment effects"};
  app.require_subcommand(1);
  app.fallthrough();

  cdm::cli::GlobalOptions g;
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  int workers = 0;
  app.add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Root seed (overrides the config)");
  auto* out_opt = app.add_option("--out", out, "Output path");
  auto* workers_opt = app.add_option("--workers", workers, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  app.add_flag("--verbose,-v", g.verbose, "Debug logging, including per-epoch losses");
  app.add_option("--set", g.overrides, "Config override key.path=value (repeatable)");

  auto* gen = app.add_subcommand("gen-data", "Generate a dataset CSV with oracle columns and split tags");

  auto* train = app.add_subcommand("train", "Train the score model on treated training rows");
  std::string train_data, train_kind = "diffusion";
  train->add_option("--data", train_data, "Dataset CSV")->required()->check(CLI::ExistingFile);
  train->add_option("--kind", train_kind, "diffusion or mlp")->check(CLI::IsMember({"diffusion", "mlp"}));

  auto* predict = app.add_subcommand("predict", "Conformal prediction sets for the test rows");
  std::string predict_model, predict_data, predict_method;
  bool predict_force = false;
  predict->add_option("--model", predict_model, "Checkpoint from train")->required()->check(CLI::ExistingFile);
  predict->add_option("--data", predict_data, "Dataset CSV")->required()->check(CLI::ExistingFile);
  predict->add_option("--method", predict_method, "cdm, cdm_nolocal, naive or mlp");
  predict->add_flag("--force", predict_force, "Accept a checkpoint trained under another config");

  auto* experiment = app.add_subcommand("experiment", "Run all replicate x method cells and summarize");

  auto* inspect = app.add_subcommand("inspect", "Summarize a results document");
  std::string inspect_path;
  bool inspect_force = false;
  std::vector<std::string> inspect_external;
  inspect->add_option("results", inspect_path, "Results JSONL")->required()->check(CLI::ExistingFile);
  inspect->add_flag("--force", inspect_force, "Summarize records with mismatched hashes or versions");
  inspect->add_option("--external", inspect_external, "External per-replicate CSV (cqr, causal_forest)");

  CLI11_PARSE(app, argc, argv);

  if (!config_path.empty()) g.config_path = config_path;
  if (*seed_opt) g.seed = seed;
  if (*out_opt) g.out = out;
  if (*workers_opt) g.workers = workers;

  try {
    if (*inspect) {
      cdm::cli::InspectOptions opts;
      opts.force = inspect_force;
      opts.external_results = inspect_external;
      if (g.config_path) opts.expected_hash = cdm::cli::make_context(g).config_hash;
      return cdm::cli::cmd_inspect(inspect_path, opts, std::cout);
    }
    const auto ctx = cdm::cli::make_context(g);
    if (*gen) {
      return cdm::cli::cmd_gen_data(ctx, *out_opt ? out : std::string("data.csv"));
    }
    if (*train) {
      return cdm::cli::cmd_train(ctx, train_data, *out_opt ? out : std::string("model.json"), train_kind);
    }
    if (*predict) {
      cdm::cli::PredictOptions opts;
      opts.force = predict_force;
      if (!predict_method.empty()) opts.method = predict_method;
      return cdm::cli::cmd_predict(ctx, predict_model, predict_data, *out_opt ? out : std::string("predictions.jsonl"),
                                   opts);
    }
    if (*experiment) {
      return cdm::cli::cmd_experiment(ctx, std::cout);
    }
  } catch (const cdm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
