// fmfnet command-line front end.
//
// Exit codes: 0 success, 1 unexpected failure, 2 config or usage error,
// 3 data error (unreadable or malformed files), 4 numeric divergence.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fmfnet/config.hpp"
#include "fmfnet/errors.hpp"
#include "fmfnet/frame_io.hpp"
#include "fmfnet/gradcheck.hpp"
#include "fmfnet/metrics.hpp"
#include "fmfnet/train.hpp"

namespace fs = std::filesystem;
using namespace fmfnet;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

const std::string& ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) fs::create_directories(parent, ec);
  if (ec) throw IoError("cannot create " + parent.string() + ": " + ec.message());
  return path;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(ensure_parent(path.string()));
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

TrainConfig config_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : load_train_config(path);
  for (const auto& s : sets) apply_override(cfg, s);
  cfg.validate();
  return cfg;
}

std::vector<SceneSequence> load_data(const std::string& dir) {
  auto scenes = read_dataset(dir);
  if (scenes.empty()) throw IoError("no sequences found in " + dir);
  return scenes;
}

ProgressFn progress_printer(bool quiet, int every) {
  if (quiet) return {};
  return [every](const LossRecord& r) {
    if (r.step % every != 0) return;
    std::fprintf(stderr, "step %5d  lr %.2e  L_hm %.4f  L_total %.4f\n", r.step, r.lr, r.hm, r.total);
  };
}

struct Options {
  // gen-data
  std::string spec, out;
  std::vector<std::string> spec_sets;
  // shared
  std::string config, data, ckpt, dets;
  std::vector<std::string> sets;
  bool quiet = false;
  int log_every = 10;
  // train
  std::string trace;
  // ablate
  std::string config_a, config_b, train_data, eval_data;
  int train_sequences = 4, eval_sequences = 20, frames = 10;
  std::uint64_t data_seed = 1000;
  std::size_t latency_frames = 100;
  // bench
  std::size_t bench_frames = 100;
  int threads = 0;
  // grad-check
  bool full = false;
};

int cmd_gen_data(const Options& o) {
  DatasetSpec spec = o.spec.empty() ? DatasetSpec{} : load_dataset_spec(o.spec);
  nlohmann::json j = to_json(spec);
  for (const auto& s : o.spec_sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like key=value: " + s);
    nlohmann::json v;
    try {
      v = nlohmann::json::parse(s.substr(eq + 1));
    } catch (const nlohmann::json::exception&) {
      v = s.substr(eq + 1);
    }
    const std::string key = s.substr(0, eq);
    std::string pointer = "/" + key;
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    const nlohmann::json::json_pointer ptr(pointer);
    if (!j.contains(ptr)) throw ConfigError("unknown dataset key '" + key + "'");
    j[ptr] = v;
  }
  spec = dataset_spec_from_json(j);
  const auto scenes = generate_dataset(spec);
  fs::create_directories(o.out);
  std::size_t frames = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "seq_%04zu", i);
    write_sequence(scenes[i], fs::path(o.out) / name);
    frames += scenes[i].frames.size();
  }
  write_json(fs::path(o.out) / "dataset_spec.json", to_json(spec));
  std::printf("wrote %zu sequences (%zu frames) to %s\n", scenes.size(), frames, o.out.c_str());
  return 0;
}

int cmd_train(const Options& o) {
  const TrainConfig cfg = config_with_overrides(o.config, o.sets);
  const auto scenes = load_data(o.data);
  const int total = total_train_steps(cfg, scenes);
  std::fprintf(stderr, "training %zu parameters for %d steps on %zu sequences\n",
               DetectorModel::param_count(cfg.model), total, scenes.size());
  std::vector<LossRecord> trace;
  const auto t0 = std::chrono::steady_clock::now();
  auto state = train(cfg, scenes, &trace, progress_printer(o.quiet, o.log_every));
  save_checkpoint(*state, ensure_parent(o.out));
  const fs::path trace_path = o.trace.empty() ? fs::path(o.out).replace_extension(".loss.csv") : fs::path(o.trace);
  write_loss_trace(ensure_parent(trace_path.string()), trace);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("saved %s after %d steps (%.1f s); loss trace %s\n", o.out.c_str(), state->step, secs,
              trace_path.string().c_str());
  if (!trace.empty()) {
    std::printf("L_hm first %.6f last %.6f\n", trace.front().hm, trace.back().hm);
  }
  return 0;
}

int cmd_infer(const Options& o) {
  auto state = load_checkpoint(o.ckpt);
  const auto scenes = load_data(o.data);
  const auto dets = infer_dataset(state->model, scenes);
  write_detections(ensure_parent(o.out), dets, state->model.cfg.class_names);
  std::printf("wrote %zu detections to %s\n", dets.size(), o.out.c_str());
  return 0;
}

int cmd_eval(const Options& o) {
  const auto scenes = load_data(o.data);
  const auto& names = scenes.front().class_names;
  const auto dets = read_detections(o.dets, names);
  const auto frames = assemble_eval_frames(scenes, dets);
  MatchConfig match = config_with_overrides(o.config, o.sets).model.match;
  const EvalResult r = evaluate(frames, names, match);
  std::fputs(format_table(r).c_str(), stdout);
  if (!o.out.empty()) write_json(o.out, to_json(r));
  return 0;
}

int cmd_ablate(const Options& o) {
  const TrainConfig a = config_with_overrides(o.config_a, o.sets);
  const TrainConfig b = config_with_overrides(o.config_b, o.sets);
  auto synth = [&](int n, std::uint64_t seed) {
    DatasetSpec spec;
    spec.num_sequences = n;
    spec.scene.num_frames = o.frames;
    spec.scene.seed = seed;
    spec.scene.class_names = a.model.class_names;
    return generate_dataset(spec);
  };
  const auto train_scenes = o.train_data.empty() ? synth(o.train_sequences, o.data_seed) : load_data(o.train_data);
  const auto eval_scenes = o.eval_data.empty() ? synth(o.eval_sequences, o.data_seed + 1) : load_data(o.eval_data);
  const AblationReport r = ablation_run(a, b, train_scenes, eval_scenes, o.latency_frames,
                                        progress_printer(o.quiet, o.log_every));
  std::fputs(format_ablation(r).c_str(), stdout);
  if (!o.out.empty()) write_json(o.out, to_json(r));
  return 0;
}

int cmd_grad_check(const Options& o) {
  std::vector<GradCheckResult> results = op_gradcheck_suite();
  if (o.full) results.push_back(model_gradcheck());
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-4s %-34s checked %6zu  max rel err %.3e  tol %.0e\n", r.passed() ? "ok" : "FAIL", r.name.c_str(),
                r.checked, r.max_error, r.tolerance);
    ok = ok && r.passed();
  }
  std::printf("%s: %zu checks\n", ok ? "all gradient checks passed" : "gradient check FAILED", results.size());
  return ok ? 0 : 1;
}

int cmd_bench(const Options& o) {
  auto state = load_checkpoint(o.ckpt);
  const auto scenes = load_data(o.data);
  const BenchReport r = bench(state->model, scenes, o.bench_frames, o.threads);
  std::fputs(format_bench(r.sequential).c_str(), stdout);
  std::fputs(format_bench(r.parallel).c_str(), stdout);
  if (!o.out.empty()) {
    write_json(o.out, {{"sequential", to_json(r.sequential)},
                       {"parallel", to_json(r.parallel)},
                       {"detections", r.detections.size()}});
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FMF temporal 3D detector on synthetic LiDAR"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--spec", o.spec, "Dataset spec JSON (defaults if omitted)")->check(CLI::ExistingFile);
  gen->add_option("--out", o.out, "Output directory")->required();
  gen->add_option("--set", o.spec_sets, "Spec override key=value (e.g. scene.num_frames=4)");

  auto* tr = app.add_subcommand("train", "Train a detector");
  tr->add_option("--config", o.config, "Training config JSON");
  tr->add_option("--data", o.data, "Dataset directory")->required();
  tr->add_option("--out", o.out, "Checkpoint path")->required();
  tr->add_option("--trace", o.trace, "Loss trace CSV (default: checkpoint path with .loss.csv extension)");
  tr->add_option("--set", o.sets, "Config override key=value");
  tr->add_option("--log-every", o.log_every, "Progress interval in steps")->check(CLI::PositiveNumber);
  tr->add_flag("--quiet", o.quiet, "No progress output");

  auto* inf = app.add_subcommand("infer", "Run a checkpoint over a dataset");
  inf->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  inf->add_option("--data", o.data, "Dataset directory")->required();
  inf->add_option("--out", o.out, "Detections JSONL")->required();

  auto* ev = app.add_subcommand("eval", "Score detections against the dataset ground truth");
  ev->add_option("--dets", o.dets, "Detections JSONL")->required();
  ev->add_option("--data", o.data, "Dataset directory")->required();
  ev->add_option("--out", o.out, "Report JSON");
  ev->add_option("--config", o.config, "Config JSON supplying match settings");
  ev->add_option("--set", o.sets, "Config override key=value");

  auto* ab = app.add_subcommand("ablate", "Train and compare two configurations that differ in fmf settings");
  ab->add_option("--config-a", o.config_a, "Config A")->required();
  ab->add_option("--config-b", o.config_b, "Config B")->required();
  ab->add_option("--train-data", o.train_data, "Training dataset (synthetic if omitted)");
  ab->add_option("--eval-data", o.eval_data, "Evaluation dataset (synthetic if omitted)");
  ab->add_option("--train-sequences", o.train_sequences, "Synthetic training sequences")->check(CLI::PositiveNumber);
  ab->add_option("--eval-sequences", o.eval_sequences, "Synthetic evaluation sequences")->check(CLI::PositiveNumber);
  ab->add_option("--frames", o.frames, "Frames per synthetic sequence")->check(CLI::Range(2, 10000));
  ab->add_option("--data-seed", o.data_seed, "Seed of the synthetic datasets");
  ab->add_option("--latency-frames", o.latency_frames, "Inference frames timed per arm");
  ab->add_option("--set", o.sets, "Override applied to both configs");
  ab->add_option("--out", o.out, "Report JSON");
  ab->add_option("--log-every", o.log_every, "Progress interval in steps")->check(CLI::PositiveNumber);
  ab->add_flag("--quiet", o.quiet, "No progress output");

  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  gc->add_flag("--full", o.full, "Also sweep every parameter of a tiny model");

  auto* be = app.add_subcommand("bench", "Per-stage inference latency");
  be->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  be->add_option("--data", o.data, "Dataset directory")->required();
  be->add_option("--frames", o.bench_frames, "Frames per mode");
  be->add_option("--threads", o.threads, "Workers in parallel mode (0: hardware concurrency)");
  be->add_option("--out", o.out, "Report JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*tr) return cmd_train(o);
    if (*inf) return cmd_infer(o);
    if (*ev) return cmd_eval(o);
    if (*ab) return cmd_ablate(o);
    if (*gc) return cmd_grad_check(o);
    if (*be) return cmd_bench(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericDivergence& e) {
    std::cerr << "numeric divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
