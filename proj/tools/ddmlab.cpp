#include <iostream>

#include "CLI11.hpp"

#include "ddmlab/harness/commands.hpp"

using namespace ddmlab;
using namespace ddmlab::harness;

int main(int argc, char** argv) {
  CLI::App app{"ddmlab: routed flow-matching expert ensembles at desk scale"};
  app.require_subcommand(1);

  CommonOptions opt;
  std::string config, out = "run";
  std::uint64_t seed = 0;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON config file");
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_option("--out", out, "run directory")->capture_default_str();
    sub->add_option("--workers", opt.workers, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_flag("--paper-n", opt.paper_n, "use the paper's sample counts");
  };

  auto* gen = app.add_subcommand("gen-data", "generate and partition the mixture dataset");
  auto* train = app.add_subcommand("train", "train the experts and the router");
  auto* sample = app.add_subcommand("sample", "integrate routed trajectories");
  auto* exp = app.add_subcommand("experiment", "run an experiment preset");
  auto* report = app.add_subcommand("report", "render SVG plots and a markdown summary");
  for (auto* s : {gen, train, sample, exp, report}) common(s);

  SampleOptionsCli so;
  sample->add_option("--policy", so.policies, "routing policy (repeatable): " + RoutingPolicy::valid_names());
  sample->add_option("--count", so.count, "trajectories per policy")->capture_default_str();
  std::string preset;
  exp->add_option("name", preset, "preset: " + preset_names())->required();

  CLI11_PARSE(app, argc, argv);

  opt.out = out;
  if (!config.empty()) opt.config = config;
  for (auto* s : {gen, train, sample, exp, report})
    if (s->count("--seed")) opt.seed = seed;

  try {
    if (*gen) return cmd_gen_data(opt);
    if (*train) return cmd_train(opt);
    if (*sample) return cmd_sample(opt, so);
    if (*exp) return cmd_experiment(opt, preset);
    if (*report) return cmd_report(opt);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
