#pragma once

// Multi-run drivers behind the CLI: mode x seed sweeps, the four-way
// ablation, and the files they leave behind (CSV, loss traces, checkpoints).

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "d3gzsl/checkpoint.hpp"
#include "d3gzsl/config.hpp"
#include "d3gzsl/data.hpp"
#include "d3gzsl/pipeline.hpp"

namespace d3gzsl {

enum class AblationFlags { none, id, od, both };

inline std::string to_string(AblationFlags f) {
  switch (f) {
    case AblationFlags::none: return "none";
    case AblationFlags::id: return "id";
    case AblationFlags::od: return "od";
    case AblationFlags::both: return "both";
  }
  return "?";
}

inline constexpr AblationFlags kAllFlags[] = {AblationFlags::none, AblationFlags::id, AblationFlags::od, AblationFlags::both};

struct RunJob {
  TrainConfig config;
  std::optional<AblationFlags> flags;
  std::string tag;  // file stem for this run's trace and checkpoint
};

struct RunResult {
  RunJob job;
  RunReport report;
};

// Runs `fn(i)` for i in [0, n) on up to `jobs` threads. Each call must only
// touch its own state. The first exception (by index) is rethrown.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, n));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<NamedTensor> checkpoint_tensors(const RunOutput& out) {
  std::vector<NamedTensor> t = out.teacher->named_parameters();
  auto append = [&t](std::vector<NamedTensor> more, const std::string& prefix = "") {
    for (auto& n : more) t.push_back({prefix + n.name, n.tensor});
  };
  if (out.generator && out.generator->variant() == GeneratorVariant::wgan_gp) {
    append(out.generator->generator_net().named_parameters());
    append(out.generator->critic_net().named_parameters());
  }
  if (out.joint) {
    append(out.joint->student.named_parameters());
    append(out.joint->projector.named_parameters());
    append(out.joint->sigmoid.named_parameters());
  }
  if (out.two_stage) {
    append(out.two_stage->seen_expert->named_parameters(), "seen_expert.");
    append(out.two_stage->unseen_expert->named_parameters(), "unseen_expert.");
  }
  return t;
}

inline nlohmann::json trace_json(const RunJob& job, const RunReport& r) {
  nlohmann::json j;
  j["mode"] = to_string(r.mode);
  j["seed"] = r.seed;
  if (job.flags) j["flags"] = to_string(*job.flags);
  j["lambda"] = r.lambda;
  j["ood_method"] = to_string(r.ood_method);
  j["use_id2sd"] = r.use_id2sd;
  j["use_o2dbd"] = r.use_o2dbd;
  j["metrics"] = {{"U", r.metrics.unseen}, {"S", r.metrics.seen}, {"H", r.metrics.harmonic}};
  j["teacher_train_accuracy"] = r.teacher_train_accuracy;
  if (r.ts_threshold) j["ts_threshold"] = *r.ts_threshold;
  if (r.ts_detector_accuracy) j["ts_detector_balanced_accuracy"] = *r.ts_detector_accuracy;
  j["wall_ms"] = r.wall_ms;
  // Joint-training epochs follow any FG warm-up epochs and restart at 0.
  auto& epochs = j["epochs"] = nlohmann::json::array();
  for (const auto& e : r.trace)
    epochs.push_back({{"epoch", e.epoch}, {"critic", e.critic}, {"wasserstein", e.wasserstein},
                      {"gradient_penalty", e.gradient_penalty}, {"generator", e.generator}, {"be", e.be},
                      {"kl", e.kl}, {"cls", e.cls}, {"od", e.od}});
  nlohmann::json cfg;
  std::istringstream echo(r.config_echo);
  for (std::string line; std::getline(echo, line);) {
    auto eq = line.find(" = ");
    if (eq != std::string::npos) cfg[line.substr(0, eq)] = line.substr(eq + 3);
  }
  j["config"] = cfg;
  return j;
}

inline std::string csv_header(bool with_flags) {
  return with_flags ? "mode,flags,seed,lambda,ood_method,U,S,H,epochs,wall_ms\n" : "mode,seed,lambda,ood_method,U,S,H,epochs,wall_ms\n";
}

inline std::string csv_row(const RunJob& job, const RunReport& r, bool with_flags) {
  using detail::format_double;
  std::string s = to_string(r.mode) + ",";
  if (with_flags) s += (job.flags ? to_string(*job.flags) : std::string("none")) + ",";
  s += std::to_string(r.seed) + "," + format_double(r.lambda) + "," + to_string(r.ood_method) + "," + format_double(r.metrics.unseen) +
       "," + format_double(r.metrics.seen) + "," + format_double(r.metrics.harmonic) + "," + std::to_string(r.epochs) + "," +
       format_double(std::round(r.wall_ms * 1000.0) / 1000.0) + "\n";
  return s;
}

struct SweepOptions {
  bool write_checkpoints = true;
  bool write_traces = true;
};

// Runs every job on the dataset, writing `<tag>.trace.json` and
// `<tag>.ckpt` per job and `csv_name` listing all jobs in the given order.
inline std::vector<RunResult> run_jobs(const std::vector<RunJob>& jobs, const GzslDataset& ds, const ExperimentConfig& cfg,
                                       const std::filesystem::path& out_dir, const std::string& csv_name, bool with_flags,
                                       const SweepOptions& opts = {}) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

  std::vector<RunResult> results(jobs.size());
  parallel_for(jobs.size(), cfg.jobs, [&](std::size_t i) {
    RunOutput out = run_single(jobs[i].config, ds);
    ExperimentConfig echo_cfg = cfg;
    echo_cfg.train = jobs[i].config;
    echo_cfg.modes = {jobs[i].config.mode};
    echo_cfg.seeds = {jobs[i].config.seed};
    out.report.config_echo = echo_cfg.echo();
    if (opts.write_traces)
      detail::write_text((out_dir / (jobs[i].tag + ".trace.json")).string(), trace_json(jobs[i], out.report).dump(2) + "\n");
    if (opts.write_checkpoints) save_checkpoint((out_dir / (jobs[i].tag + ".ckpt")).string(), checkpoint_tensors(out));
    results[i] = {jobs[i], std::move(out.report)};
  });

  std::string csv = csv_header(with_flags);
  for (const auto& r : results) csv += csv_row(r.job, r.report, with_flags);
  detail::write_text((out_dir / csv_name).string(), csv);
  return results;
}

// One job per (mode, seed), sorted by mode name then seed.
inline std::vector<RunJob> sweep_jobs(const ExperimentConfig& cfg) {
  std::vector<RunJob> jobs;
  for (auto mode : cfg.modes)
    for (auto seed : cfg.seeds) {
      RunJob j;
      j.config = cfg.train;
      j.config.mode = mode;
      j.config.seed = seed;
      j.tag = to_string(mode) + "_seed" + std::to_string(seed);
      jobs.push_back(j);
    }
  std::stable_sort(jobs.begin(), jobs.end(), [](const RunJob& a, const RunJob& b) {
    const auto ma = to_string(a.config.mode), mb = to_string(b.config.mode);
    return ma != mb ? ma < mb : a.config.seed < b.config.seed;
  });
  jobs.erase(std::unique(jobs.begin(), jobs.end(), [](const RunJob& a, const RunJob& b) { return a.tag == b.tag; }), jobs.end());
  return jobs;
}

// The four flag combinations in d3gzsl mode (configured lambda), sorted by
// flags in {none, id, od, both} order then seed.
inline std::vector<RunJob> ablation_jobs(const ExperimentConfig& cfg) {
  std::vector<RunJob> jobs;
  auto seeds = cfg.seeds;
  std::sort(seeds.begin(), seeds.end());
  seeds.erase(std::unique(seeds.begin(), seeds.end()), seeds.end());
  for (auto f : kAllFlags)
    for (auto seed : seeds) {
      RunJob j;
      j.flags = f;
      j.config = cfg.train;
      j.config.mode = RunMode::d3gzsl;
      j.config.seed = seed;
      j.config.use_id2sd = f == AblationFlags::id || f == AblationFlags::both;
      j.config.use_o2dbd = f == AblationFlags::od || f == AblationFlags::both;
      j.tag = "ablate_" + to_string(f) + "_seed" + std::to_string(seed);
      jobs.push_back(j);
    }
  return jobs;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ValidationError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace d3gzsl
