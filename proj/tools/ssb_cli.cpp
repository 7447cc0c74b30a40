#include <iostream>

#include <CLI11.hpp>

#include "ssb/ssb.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNonConvergence = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  unsigned threads = ssb::default_threads();
  bool paper_scale = false;
  std::optional<std::string> out;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "experiment config (JSON)")->required();
  app->add_option("--seed", c.seed, "override the config seed");
  app->add_option("--threads", c.threads, "worker threads; results do not depend on it")->check(CLI::PositiveNumber);
  app->add_flag("--paper-scale", c.paper_scale, "10,000 trials instead of 1,000 (cauchy)");
  app->add_option("--out", c.out, "output directory");
}

int run(const Common& c, std::optional<ssb::ExperimentKind> expect) {
  auto cfg = ssb::load_config(c.config);
  if (expect && cfg.kind != *expect)
    throw ssb::ConfigError(std::string("config describes a '") + ssb::experiment_name(cfg.kind) +
                           "' experiment, not '" + ssb::experiment_name(*expect) + "'");
  ssb::RunOptions o{c.seed, c.threads, c.paper_scale, c.out};
  auto r = ssb::run_experiment(std::move(cfg), o);
  std::cout << r.out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"soft-constrained Schrodinger bridge experiments"};
  app.require_subcommand(1);
  Common common;
  std::optional<ssb::ExperimentKind> expect;
  std::function<int()> action;

  auto experiment = [&](const char* name, const char* help, std::optional<ssb::ExperimentKind> kind, CLI::App* parent) {
    auto* sub = parent->add_subcommand(name, help);
    add_common(sub, common);
    sub->callback([&, kind] {
      expect = kind;
      action = [&] { return run(common, expect); };
    });
    return sub;
  };
  experiment("run", "run whatever experiment the config names", std::nullopt, &app);
  experiment("cauchy", "Cauchy target: failure table, endpoints, KS", ssb::ExperimentKind::cauchy, &app);
  experiment("normal-mixture", "2D geometric mixture of normal mixtures", ssb::ExperimentKind::normal_mixture, &app);
  auto* system = app.add_subcommand("system", "Schrodinger system tools");
  system->require_subcommand(1);
  experiment("solve", "solve the discretized system for each beta", ssb::ExperimentKind::system_solve, system);
  experiment("score", "train a score model and sample by the reverse bridge", ssb::ExperimentKind::score_desk, &app);
  experiment("time-series", "bridge through several checkpoints", ssb::ExperimentKind::time_series, &app);

  auto* schema = app.add_subcommand("schema", "print the config JSON schema");
  schema->callback([&] {
    action = [] {
      std::cout << ssb::kConfigSchema;
      return 0;
    };
  });
  std::string to_check;
  auto* validate = app.add_subcommand("validate", "check a config against the schema");
  validate->add_option("config", to_check)->required();
  validate->callback([&] {
    action = [&] {
      ssb::load_config(to_check);
      std::cout << "ok\n";
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  try {
    return action();
  } catch (const ssb::NonConvergence& e) {
    std::cerr << "ssb: no convergence: " << e.what() << "\n";
    return kExitNonConvergence;
  } catch (const ssb::TrainingError& e) {
    std::cerr << "ssb: training failed: " << e.what() << "\n";
    return kExitNonConvergence;
  } catch (const ssb::InputError& e) {
    std::cerr << "ssb: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ssb::Unsupported& e) {
    std::cerr << "ssb: unsupported: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "ssb: error: " << e.what() << "\n";
    return 1;
  }
}
