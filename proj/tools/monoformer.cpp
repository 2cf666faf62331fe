// monoformer: synth | train | eval | stylize | probe-bias | gradcheck

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "monoformer/cli.hpp"

int main(int argc, char** argv) {
  using namespace monoformer;
  CLI::App app{"MonoFormer desk-scale toolkit"};
  app.require_subcommand(0, 1);
  std::string config_path, out;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
  bool dump = false;
  app.add_option("--config", config_path, "key = value configuration file");
  auto* seed_opt = app.add_option("--seed", seed, "seed for data, initialisation and augmentation");
  auto* out_opt = app.add_option("--out", out, "output directory");
  app.add_option("--set", overrides, "override one key: --set train.steps=200 (repeatable)");
  app.add_flag("--dump-config", dump, "print the effective configuration and exit");
  bool corrupt = false;
  struct Sub {
    const char* name;
    const char* help;
  };
  const std::vector<Sub> subs{{"synth", "render the synthetic dataset"},
                              {"train", "self-supervised training on a dataset"},
                              {"eval", "depth metrics for a checkpoint"},
                              {"stylize", "texture-shift an image corpus"},
                              {"probe-bias", "shape/texture dimensionality of encoder features"},
                              {"gradcheck", "finite-difference check of every block"}};
  for (const auto& s : subs) {
    auto* sc = app.add_subcommand(s.name, s.help);
    sc->fallthrough();
    if (std::string(s.name) == "gradcheck")
      sc->add_flag("--corrupt-gradients", corrupt, "perturb every analytic gradient (debug)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  RunConfig cfg;
  try {
    if (!config_path.empty()) load_config_file(cfg, config_path);
    if (*seed_opt) cfg.seed = seed;
    if (*out_opt) cfg.out = out;
    for (const auto& o : overrides) set_option(cfg, o);
    if (corrupt) cfg.gradcheck.corrupt_gradients = true;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  if (dump) {
    std::cout << dump_config(cfg);
    return kExitOk;
  }
  const auto chosen = app.get_subcommands();
  if (chosen.empty()) {
    std::cerr << app.help();
    return kExitConfig;
  }
  return run_command(chosen.front()->get_name(), cfg, std::cout, std::cerr);
}
