// Command-line front end. All substance lives in the experiment module;
// this file only parses flags, folds overrides into the spec entries, and
// maps the error taxonomy onto exit codes:
//   0 success        2 spec or value errors     3 numeric failures
//   4 I/O failures   1 anything unexpected
#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "wassalign/common.hpp"
#include "wassalign/experiment.hpp"

namespace {

struct Cli {
  std::string command;
  std::string spec_path;
  std::string out_override;
  std::uint64_t seed_override = 0;
  bool seed_given = false;
  bool force = false;
  bool deterministic = false;

  // swd only
  std::string points_a;
  std::string points_b;
  std::int64_t projections = 50;
  std::uint64_t swd_seed = 0;
};

int run(const Cli& cli) {
  using namespace wassalign;
  if (cli.command == "swd") {
    apply_thread_cap(cli.deterministic);
    cmd_swd(cli.points_a, cli.points_b, cli.projections, cli.swd_seed, std::cout);
    return 0;
  }

  SpecEntries entries =
      cli.spec_path.empty() ? SpecEntries{} : read_spec_file(cli.spec_path);
  if (cli.seed_given) entries["run.seed"] = std::to_string(cli.seed_override);
  if (!cli.out_override.empty()) entries["run.out"] = cli.out_override;
  if (cli.deterministic) entries["run.deterministic"] = "true";

  const ExperimentSpec spec = resolve_spec(entries, cli.command);
  apply_thread_cap(spec.deterministic);

  if (cli.command == "synth")
    cmd_synth(spec, cli.force, std::cout);
  else if (cli.command == "pretrain")
    cmd_pretrain(spec, cli.force, std::cout);
  else if (cli.command == "transfer")
    cmd_transfer(spec, cli.force, std::cout);
  else if (cli.command == "baseline")
    cmd_baseline(spec, cli.force, std::cout);
  else if (cli.command == "eval")
    cmd_eval(spec, cli.force, std::cout);
  else
    cmd_sweep(spec, cli.force, std::cout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-modality transfer learning with sliced-Wasserstein alignment"};
  app.require_subcommand(1);
  Cli cli;

  const std::pair<const char*, const char*> commands[] = {
      {"synth", "generate the six synthetic dataset splits"},
      {"pretrain", "phase 1: train the source encoder and classifier"},
      {"transfer", "phase 2: adapt to the target modality from a checkpoint"},
      {"baseline", "target-only or finetune reference runs"},
      {"eval", "evaluate a checkpoint on a dataset directory"},
      {"sweep", "run every method across seeds and aggregate"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--spec", cli.spec_path, "experiment spec file (key = value lines)");
    sub->add_option("--out", cli.out_override, "output directory (overrides run.out)");
    auto* seed = sub->add_option("--seed", cli.seed_override, "seed (overrides run.seed)");
    sub->add_flag("--force", cli.force, "allow writing into a non-empty output directory");
    sub->add_flag("--deterministic", cli.deterministic,
                  "zero timing fields and default to one thread");
    sub->callback([&cli, seed, name = std::string(name)] {
      cli.command = name;
      cli.seed_given = seed->count() > 0;
    });
  }

  CLI::App* swd = app.add_subcommand("swd", "sliced distance between two stored point sets");
  swd->add_option("a", cli.points_a, "container file holding one [points, dim] tensor")
      ->required();
  swd->add_option("b", cli.points_b, "container file holding one [points, dim] tensor")
      ->required();
  swd->add_option("--projections", cli.projections, "number of random directions");
  swd->add_option("--seed", cli.swd_seed, "direction seed");
  swd->add_flag("--deterministic", cli.deterministic, "default to one thread");
  swd->callback([&cli] { cli.command = "swd"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    return run(cli);
  } catch (const wassalign::SpecError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const wassalign::ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const wassalign::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const wassalign::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const wassalign::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
}
