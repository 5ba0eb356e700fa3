// metta <subcommand> --config <path> [--out <dir>] [--seed <u64>]

#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "metta/metta.hpp"

namespace {

constexpr std::uint64_t kDefaultSuiteSeed = 20240611;

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

metta::ExperimentConfig resolve(const Options& o) {
  metta::ExperimentConfig cfg = metta::load_config(o.config);
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.seed) cfg.override_seed(*o.seed);
  return cfg;
}

// Suites run without a config; when one is given (or --out), results are
// also written to the output directory.
std::optional<std::filesystem::path> suite_output(const Options& o, const char* name) {
  std::filesystem::path dir;
  if (!o.out.empty()) {
    dir = o.out;
  } else if (!o.config.empty()) {
    dir = metta::load_config(o.config).output_dir;
  } else {
    return std::nullopt;
  }
  std::filesystem::create_directories(dir);
  return dir / name;
}

int run(const std::string& command, const Options& o) {
  using namespace metta;
  if (command == "grad-check") {
    const auto results = run_grad_check(o.seed.value_or(kDefaultSuiteSeed), std::cout,
                                        suite_output(o, artifact::kGradCheck));
    for (const auto& r : results) {
      if (!r.passed()) {
        std::cerr << "metta: error: gradient check failed for " << r.op << "\n";
        return 1;
      }
    }
    return 0;
  }
  if (command == "selftest") {
    const auto results = run_selftest(o.seed.value_or(kDefaultSuiteSeed), std::cout,
                                      suite_output(o, artifact::kSelftest));
    for (const auto& r : results) {
      if (!r.passed()) {
        std::cerr << "metta: error: property " << r.name << " failed\n";
        return 1;
      }
    }
    return 0;
  }

  if (o.config.empty()) throw ConfigError("--config is required for " + command);
  Pipeline p(resolve(o));
  if (command == "gen-data") {
    p.gen_data();
  } else if (command == "train-backbone") {
    p.train_backbone_stage();
  } else if (command == "train-linear") {
    p.train_linear_stage();
  } else if (command == "eval") {
    p.eval_stage();
  } else if (command == "interp") {
    p.interp_stage();
  } else if (command == "jitter") {
    p.jitter_stage();
  } else if (command == "retrieve") {
    p.retrieve_stage();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mean embeddings with test-time augmentation"};
  app.require_subcommand(1, 1);
  Options opts;
  std::uint64_t seed = 0;

  const char* commands[][2] = {
      {"gen-data", "Generate (or import) the train/test splits"},
      {"train-backbone", "Train the convolutional backbone with augmentation"},
      {"train-linear", "Fit the linear evaluation head on frozen embeddings"},
      {"eval", "Evaluate central-crop, TTA and MeTTA predictions"},
      {"interp", "Embedding interpolation curves"},
      {"jitter", "Prediction jitter across augmentation samples"},
      {"retrieve", "Single- vs multi-scale retrieval report and embedding dump"},
      {"grad-check", "Finite-difference gradient checks of every differentiable op"},
      {"selftest", "Randomised property suites"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    const bool suite = std::string(name) == "grad-check" || std::string(name) == "selftest";
    auto* cfg = sub->add_option("--config", opts.config, "Experiment configuration (JSON)");
    if (!suite) cfg->required();
    sub->add_option("--out", opts.out, "Output directory (overrides output_dir)");
    sub->add_option("--seed", seed, "Override every seed in the configuration");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const std::string command = app.get_subcommands().front()->get_name();
  if (app.get_subcommands().front()->count("--seed")) opts.seed = seed;
  try {
    return run(command, opts);
  } catch (const std::exception& e) {
    std::cerr << "metta: error: " << command << ": " << e.what() << "\n";
    return 1;
  }
}
