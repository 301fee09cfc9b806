// Command-line driver: estimate closure matrices, integrate reduced models,
// resolve reference ensembles, tune epsilon, and cross-check the value
// surface. Every command reads one JSON config and writes a manifest.

#include <CLI11.hpp>

#include <iostream>

#include "qecl/runner.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  int workers = 1;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* sub, CommonArgs& a) {
  sub->add_option("--config", a.config, "run configuration JSON file")
      ->required()
      ->check(CLI::ExistingFile);
  sub->add_option("--out", a.out, "output directory for artifacts")->required();
  a.seed_opt = sub->add_option("--seed", a.seed, "override the config seed");
  sub->add_option("--workers", a.workers, "worker threads for sampling")
      ->check(CLI::PositiveNumber);
}

int run_command(const std::string& name, const CommonArgs& a) {
  qecl::RunConfig rc = qecl::load_config(a.config);
  if (a.seed_opt && a.seed_opt->count() > 0) rc.seed = a.seed;

  qecl::CommandResult res;
  if (name == "matrices")
    res = qecl::cmd_matrices(rc, a.out, a.workers);
  else if (name == "reduce")
    res = qecl::cmd_reduce(rc, a.out, a.workers);
  else if (name == "resolve")
    res = qecl::cmd_resolve(rc, a.out, a.workers);
  else if (name == "tune")
    res = qecl::cmd_tune(rc, a.out, a.workers);
  else
    res = qecl::cmd_verify(rc, a.out, a.workers);

  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << res.summary.dump(2) << "\n";
  std::cout << "ok: artifacts in " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quasi-equilibrium statistical closure toolkit"};
  app.set_version_flag("--version", std::string(qecl::version));
  app.require_subcommand(1);

  const char* names[] = {"matrices", "reduce", "resolve", "tune", "verify"};
  const char* blurbs[] = {
      "estimate near-equilibrium coefficient matrices from an ensemble",
      "integrate a closed reduced model and record the trajectory",
      "evolve a resolved ensemble for reference expectations",
      "fit epsilon by matching a closure to resolved data",
      "march the value surface and compare with the curvature form"};
  CommonArgs args[5];
  for (int i = 0; i < 5; ++i) add_common(app.add_subcommand(names[i], blurbs[i]), args[i]);

  CLI11_PARSE(app, argc, argv);

  try {
    for (int i = 0; i < 5; ++i)
      if (app.get_subcommand(names[i])->parsed()) return run_command(names[i], args[i]);
    std::cerr << "error: no command selected\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
