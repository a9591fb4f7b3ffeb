// privlab: experiment runner.
//
//   privlab <preset> [--config FILE] [--set key=value ...] [--seeds N] [--jobs N] [--out DIR]
//   privlab summarize RESULTS_CSV
//   privlab bounds --checkpoint FILE --data CSV [--p P] [--batch B] [--rounds T] [--samples N]
//   privlab presets
//
// Exit codes: 0 success, 1 runtime failure, 2 bad preset, key, value or argument.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "privlab/bounds.hpp"
#include "privlab/error.hpp"
#include "privlab/experiment.hpp"

using namespace privlab;

namespace {

constexpr int kUsage = 2;

int run_preset_command(const std::string& preset, int argc, char** argv) {
  CLI::App app{"run the " + preset + " preset", "privlab " + preset};
  std::string config, out = "out/" + preset;
  std::vector<std::string> sets;
  std::size_t seeds = 0, jobs = 1;
  app.add_option("--config", config, "settings file (TOML subset, e.g. a config.resolved.toml)");
  app.add_option("--set", sets, "override one setting, key=value")->allow_extra_args(false);
  app.add_option("--seeds", seeds, "number of seeds (run.seeds)");
  app.add_option("--jobs", jobs, "seeds run concurrently")->check(CLI::PositiveNumber);
  app.add_option("--out", out, "output directory");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  Settings s;
  try {
    s = preset_settings(preset);
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw ConfigError("cannot open config file " + config);
      s.read_toml(in);
      if (s.get("run.preset") != preset) {
        throw ConfigError("config " + config + " is for preset '" + s.get("run.preset") + "', not '" + preset + "'");
      }
    }
    if (const char* env = std::getenv("PRIVLAB_SEED")) s.set("run.seed", env);
    for (const auto& a : sets) apply_assignment(s, a);
    if (seeds > 0) s.set("run.seeds", std::to_string(seeds));
    s.u64("run.seed");
  } catch (const Error& e) {
    std::cerr << "privlab: " << e.what() << "\n";
    return kUsage;
  }

  try {
    const auto rows = run_preset(s, out, jobs);
    std::cout << "wrote " << rows.size() << " rows to " << (std::filesystem::path(out) / "results.csv").string()
              << "\n";
    write_trends(std::cout, summarize(rows));
  } catch (const ConfigError& e) {
    std::cerr << "privlab: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "privlab " << preset << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int summarize_command(int argc, char** argv) {
  CLI::App app{"Spearman trends of a results.csv", "privlab summarize"};
  std::string file;
  app.add_option("results", file, "results.csv")->required();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsage;
  }
  std::ifstream in(file);
  if (!in) {
    std::cerr << "privlab summarize: cannot open " << file << "\n";
    return 1;
  }
  try {
    write_trends(std::cout, summarize(read_results_csv(in)));
  } catch (const std::exception& e) {
    std::cerr << "privlab summarize: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int bounds_command(int argc, char** argv) {
  CLI::App app{"leakage bound for a saved model", "privlab bounds"};
  std::string checkpoint, data;
  BoundInputs in;
  in.p = 0.3;
  in.batch = 8;
  in.rounds = 200;
  std::size_t samples = 64;
  GradStatsOptions opt;
  app.add_option("--checkpoint", checkpoint, "model checkpoint (PFLW)")->required();
  app.add_option("--data", data, "CSV dataset whose first rows are the client's samples")->required();
  app.add_option("--p", in.p, "pruning rate");
  app.add_option("--batch", in.batch, "batch size B");
  app.add_option("--rounds", in.rounds, "rounds T");
  app.add_option("--samples", samples, "per-example gradients used for the covariance");
  app.add_option("--floor", opt.singular_floor, "eigenvalues at or below this are singular");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsage;
  }
  try {
    in.validate();
  } catch (const Error& e) {
    std::cerr << "privlab bounds: " << e.what() << "\n";
    return kUsage;
  }
  try {
    const ParamVector params = load_checkpoint(checkpoint);
    std::ifstream f(data);
    if (!f) throw Error("cannot open " + data);
    const Dataset ds = read_csv_dataset(f, data);
    const ModelSpec spec = infer_mlp(params.layout(), ds.input_dim());
    if (samples > ds.size()) {
      std::cerr << "privlab bounds: using all " << ds.size() << " samples (asked for " << samples << ")\n";
      samples = ds.size();
    }
    const auto stats = estimate_grad_stats(spec, params, ds, samples, opt);
    in.d_star = stats.d_star;
    in.delta = stats.delta;
    std::cout << bounds_json(in) << "\n";
  } catch (const std::exception& e) {
    std::cerr << "privlab bounds: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

void usage(std::ostream& out) {
  out << "usage: privlab <preset> [--config FILE] [--set key=value ...] [--seeds N] [--jobs N] [--out DIR]\n"
         "       privlab summarize RESULTS_CSV\n"
         "       privlab bounds --checkpoint FILE --data CSV [--p P] [--batch B] [--rounds T]\n"
         "       privlab presets\n"
         "presets:";
  for (const auto& p : preset_names()) out << " " << p;
  out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    usage(std::cerr);
    return kUsage;
  }
  const std::string cmd = argv[1];
  if (cmd == "-h" || cmd == "--help") {
    usage(std::cout);
    return 0;
  }
  if (cmd == "summarize") return summarize_command(argc - 1, argv + 1);
  if (cmd == "bounds") return bounds_command(argc - 1, argv + 1);
  if (cmd == "presets") {
    for (const auto& p : preset_names()) std::cout << p << "\n";
    return 0;
  }
  for (const auto& p : preset_names()) {
    if (p == cmd) return run_preset_command(cmd, argc - 1, argv + 1);
  }
  std::cerr << "privlab: unknown preset '" << cmd << "'\n";
  usage(std::cerr);
  return kUsage;
}
