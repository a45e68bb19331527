// d3gzsl command-line driver: synth | run | ablate.
//
// Exit codes: 0 success, 1 other failure, 2 config error, 3 numeric
// divergence, 4 I/O error.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "d3gzsl/d3gzsl.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kIo = 4 };

struct Overrides {
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::optional<std::size_t> jobs;
};

d3gzsl::ExperimentConfig load(const std::string& path, const Overrides& o) {
  auto cfg = d3gzsl::load_config(path);
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.seed) cfg.seeds = {*o.seed};
  if (!o.mode.empty()) cfg.set("run.mode", o.mode);
  if (o.jobs) cfg.set("run.jobs", std::to_string(*o.jobs));
  d3gzsl::validate(cfg);
  return cfg;
}

int cmd_synth(const d3gzsl::ExperimentConfig& cfg) {
  auto ds = d3gzsl::make_synthetic(cfg.data);
  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) throw d3gzsl::IoError("cannot create output directory " + cfg.out_dir + ": " + ec.message());
  auto paths = d3gzsl::DatasetPaths::in_dir(cfg.out_dir);
  d3gzsl::save_dataset(ds, paths);
  std::cout << "wrote " << paths.features << ", " << paths.attributes << ", " << paths.split << "\n";
  return kOk;
}

void print_rows(const std::vector<d3gzsl::RunResult>& results) {
  for (const auto& r : results) {
    std::printf("%-9s %-5s seed %-4llu U %6.2f  S %6.2f  H %6.2f\n", d3gzsl::to_string(r.report.mode).c_str(),
                r.job.flags ? d3gzsl::to_string(*r.job.flags).c_str() : "", static_cast<unsigned long long>(r.report.seed),
                r.report.metrics.unseen, r.report.metrics.seen, r.report.metrics.harmonic);
  }
}

int cmd_run(const d3gzsl::ExperimentConfig& cfg) {
  auto ds = d3gzsl::resolve_dataset(cfg);
  auto results = d3gzsl::run_jobs(d3gzsl::sweep_jobs(cfg), ds, cfg, cfg.out_dir, "results.csv", false);
  print_rows(results);
  return kOk;
}

int cmd_ablate(const d3gzsl::ExperimentConfig& cfg) {
  auto ds = d3gzsl::resolve_dataset(cfg);
  auto results = d3gzsl::run_jobs(d3gzsl::ablation_jobs(cfg), ds, cfg, cfg.out_dir, "ablation.csv", true);
  print_rows(results);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-distillation generalized zero-shot learning experiments"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides o;
  auto add_common = [&](CLI::App* sub, bool run_flags) {
    sub->add_option("config", config_path, "experiment config file")->required();
    sub->add_option("--out", o.out, "output directory (overrides output.dir)");
    if (run_flags) {
      sub->add_option("--seed", o.seed, "run a single seed (overrides run.seeds)");
      sub->add_option("--jobs", o.jobs, "seeds run in parallel worker threads (overrides run.jobs)");
    }
  };
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  add_common(synth, false);
  auto* run = app.add_subcommand("run", "train and evaluate the configured modes and seeds");
  add_common(run, true);
  run->add_option("--mode", o.mode, "d3gzsl, baseline, ts or iv_ts; comma separated (overrides run.mode)");
  auto* ablate = app.add_subcommand("ablate", "run the four distillation flag combinations");
  add_common(ablate, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  d3gzsl::ExperimentConfig cfg;
  try {
    cfg = load(config_path, o);
  } catch (const d3gzsl::ConfigError& e) {
    std::cerr << "config error [" << e.key() << "]: " << e.what() << "\n";
    return kConfig;
  } catch (const d3gzsl::ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const d3gzsl::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  }

  try {
    if (synth->parsed()) return cmd_synth(cfg);
    if (run->parsed()) return cmd_run(cfg);
    return cmd_ablate(cfg);
  } catch (const d3gzsl::DivergenceError& e) {
    std::cerr << "diverged at epoch " << e.epoch() << ": " << e.what() << "\n";
    return kDivergence;
  } catch (const d3gzsl::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const d3gzsl::ParseError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
