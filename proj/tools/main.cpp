// wheelleg-cli: train, eval, bench, export and init subcommands.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 bad config or arguments,
// 3 training collapsed (last finite checkpoint written), 4 morphology
// mismatch, 5 corrupt checkpoint.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "wheelleg/config.hpp"
#include "wheelleg/eval.hpp"
#include "wheelleg/metrics_export.hpp"
#include "wheelleg/throughput.hpp"
#include "wheelleg/trainer.hpp"

namespace fs = std::filesystem;
using namespace wheelleg;

namespace {

enum Exit { kOk = 0, kFailure = 1, kBadInput = 2, kCollapse = 3, kMismatch = 4, kCorrupt = 5 };

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> iterations;
  std::string trajectory;
  int log_every = 10;
};

struct EvalArgs {
  std::string checkpoint;
  std::string config;
  std::string terrain = "flat";
  std::string profile = "constant";
  double speed = 1.0;
  int episodes = 20;
  bool deterministic = false;
  bool randomize = false;
  std::uint64_t seed = 0;
  std::optional<double> episode_length;
  std::string out;
};

struct BenchArgs {
  std::string config;
  double seconds = 2.0;
  std::optional<int> envs;
  bool serial = false;
  std::string out;
};

struct ExportArgs {
  std::string metrics;
  std::string what;
  std::vector<std::string> reports;
  std::string out;
};

struct InitArgs {
  std::string config;
  std::string out;
  bool zero = false;
};

std::string checkpoint_stem(const fs::path& dir, std::int64_t iteration) {
  char name[32];
  std::snprintf(name, sizeof name, "ckpt_%06lld", static_cast<long long>(iteration));
  return (dir / name).string();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (a.out) cfg.output_dir = *a.out;
  if (a.iterations) {
    if (*a.iterations < 0) throw ConfigError("iterations", "--iterations must be >= 0");
    cfg.iterations = *a.iterations;
  }
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");

  Trainer trainer(cfg);
  std::ofstream trajectory;
  if (!a.trajectory.empty()) {
    trajectory.open(a.trajectory, std::ios::trunc);
    if (!trajectory) throw ArgumentError("cannot open trajectory file " + a.trajectory);
    trainer.env().set_trajectory_sink(&trajectory);
  }
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + (dir / "metrics.jsonl").string());

  std::int64_t last_saved = -1;
  auto save = [&] {
    save_checkpoint(checkpoint_stem(dir, trainer.iteration()), trainer.checkpoint());
    last_saved = trainer.iteration();
  };

  while (trainer.iteration() < cfg.iterations) {
    IterationRecord rec;
    try {
      rec = trainer.iterate();
    } catch (const TrainingCollapse& e) {
      save();
      std::cerr << "error: training collapsed: " << e.what() << "\n"
                << "last finite parameters saved to " << checkpoint_stem(dir, trainer.iteration()) << ".json\n";
      return kCollapse;
    }
    // One write per record keeps every prefix of the file valid JSON-lines.
    const std::string line = rec.to_json().dump() + "\n";
    metrics.write(line.data(), static_cast<std::streamsize>(line.size()));
    metrics.flush();
    if (trainer.iteration() % cfg.checkpoint_interval == 0) save();
    if (a.log_every > 0 && (rec.iteration % a.log_every == 0 || trainer.iteration() == cfg.iterations)) {
      std::fprintf(stderr, "iter %6lld  return %9.3f  level %5.2f  kl %.4f  lr %.2e  %8.0f steps/s\n",
                   static_cast<long long>(rec.iteration), rec.mean_return, rec.mean_level, rec.update.approx_kl,
                   rec.update.learning_rate, rec.env_steps_per_s);
    }
  }
  if (last_saved != trainer.iteration()) save();
  std::cout << "wrote " << checkpoint_stem(dir, trainer.iteration()) << ".json and " << (dir / "metrics.jsonl").string()
            << "\n";
  return kOk;
}

int cmd_eval(const EvalArgs& a) {
  if (a.episodes < 1) throw ArgumentError("--episodes must be >= 1");
  if (!(a.speed == a.speed)) throw ArgumentError("--speed must be a number");
  const CommandProfile profile = command_profile_from_string(a.profile);
  named_terrain(a.terrain);  // rejects unknown names before any work

  const Checkpoint ck = load_checkpoint(a.checkpoint);
  RunConfig cfg;
  if (!a.config.empty()) {
    cfg = load_config(a.config);
  } else if (!ck.config_json.empty()) {
    const auto j = nlohmann::json::parse(ck.config_json, nullptr, false);
    if (j.is_discarded()) throw CheckpointError("embedded config in " + a.checkpoint + " is not valid JSON");
    cfg = config_from_json(j);
  } else {
    cfg.morphology_name = ck.morphology;
  }
  if (cfg.morphology().name != ck.morphology) {
    throw MorphologyMismatch("checkpoint was trained on '" + ck.morphology + "' but the config uses '" +
                             cfg.morphology().name + "'");
  }
  if (a.episode_length) cfg.env.episode_length_s = *a.episode_length;

  PpoLearner learner(cfg.network_dims(), cfg.ppo, cfg.seed);
  learner.restore(ck);

  EvalOptions o;
  o.terrain = a.terrain;
  o.profile = profile;
  o.speed = a.speed;
  o.episodes = a.episodes;
  o.deterministic = a.deterministic;
  o.randomize = a.randomize;
  o.seed = a.seed;
  const EvalReport report = evaluate(learner, cfg.morphology(), cfg.env, o);

  fs::path stem = a.out;
  if (stem.empty()) {
    fs::path base(a.checkpoint);
    base.replace_extension();
    stem = base.string() + "_eval_" + a.terrain + "_" + a.profile;
  }
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  write_text(stem.string() + ".json", report.to_json().dump(2) + "\n");
  std::ofstream csv(stem.string() + ".csv", std::ios::trunc);
  report.write_csv(csv);
  std::cout << report.to_json()["summary"].dump(2) << "\n"
            << "wrote " << stem.string() << ".json and .csv\n";
  return kOk;
}

int cmd_bench(const BenchArgs& a) {
  RunConfig cfg = load_config(a.config);
  if (a.envs) {
    if (*a.envs < 1) throw ArgumentError("--envs must be >= 1");
    cfg.num_envs = *a.envs;
  }
  const ThroughputReport rep =
      measure_throughput(cfg, a.seconds, a.serial ? Execution::kSerial : Execution::kParallel);
  std::printf("simulated %.3f s per env, %d thread(s)\n", rep.simulated_seconds, rep.threads);
  std::printf("%8s %10s %12s %10s %14s %12s\n", "envs", "steps", "env_steps", "wall_s", "env_steps/s", "us/env_step");
  for (const ThroughputRow& r : rep.rows) {
    std::printf("%8d %10lld %12lld %10.3f %14.0f %12.2f\n", r.envs, static_cast<long long>(r.steps),
                static_cast<long long>(r.env_steps), r.wall_s, r.env_steps_per_s(), r.us_per_env_step());
  }
  const auto b = rep.to_json()["substep_breakdown"];
  std::printf("substeps %lld: assembly %.1f%%  contact %.1f%%  solve %.1f%%\n",
              static_cast<long long>(rep.profile.substeps), 100.0 * b["assembly_share"].get<double>(),
              100.0 * b["contact_share"].get<double>(), 100.0 * b["solve_share"].get<double>());
  if (!a.out.empty()) write_text(a.out, rep.to_json().dump(2) + "\n");
  return kOk;
}

int cmd_export(const ExportArgs& a) {
  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out, std::ios::trunc);
    if (!file) throw ArgumentError("cannot write " + a.out);
  }
  std::ostream& out = a.out.empty() ? std::cout : file;

  ExportResult res;
  if (a.what == "cot") {
    if (a.reports.empty()) throw ArgumentError("--what cot needs --reports with eval report JSON files");
    res = export_cot_comparison(a.reports, out);
  } else {
    if (a.metrics.empty()) throw ArgumentError("--metrics is required for --what " + a.what);
    std::ifstream in(a.metrics);
    if (!in) throw ArgumentError("cannot open metrics file " + a.metrics);
    res = export_series(in, a.what, out);
  }
  if (res.skipped > 0) std::cerr << "warning: " << res.skipped << " skipped (malformed or incomplete records)\n";
  if (res.rows == 0) std::cerr << "warning: no records exported\n";
  if (!a.out.empty()) std::cerr << "wrote " << res.rows << " rows to " << a.out << "\n";
  return kOk;
}

int cmd_init(const InitArgs& a) {
  const RunConfig cfg = load_config(a.config);
  Trainer trainer(cfg);
  Checkpoint ck = trainer.checkpoint();
  if (a.zero) std::fill(ck.params.begin(), ck.params.end(), 0.0f);
  save_checkpoint(a.out, ck);
  std::cout << "wrote " << a.out << ".json\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Wheel-legged locomotion: training, evaluation and benchmarking"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Run collect/update iterations and write checkpoints and metrics");
  train->add_option("--config", ta.config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", ta.seed, "Override the config seed");
  train->add_option("--out", ta.out, "Override the output directory");
  train->add_option("--iterations", ta.iterations, "Override the iteration count");
  train->add_option("--trajectory", ta.trajectory, "Write env 0 states as JSON-lines to this file");
  train->add_option("--log-every", ta.log_every, "Progress line interval (0 = quiet)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint with a scripted command profile");
  eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint manifest, payload or stem")->required();
  eval->add_option("--config", ea.config, "Config to evaluate under (default: the one stored in the checkpoint)");
  eval->add_option("--terrain", ea.terrain, "flat, slope-up, slope-down, stairs-up, stairs-down, rough, grass");
  eval->add_option("--profile", ea.profile, "constant, trapezoid or stop-and-go");
  eval->add_option("--speed", ea.speed, "Peak forward command, m/s");
  eval->add_option("--episodes", ea.episodes, "Number of episodes (one env each)");
  eval->add_flag("--deterministic", ea.deterministic, "Act with the policy mean");
  eval->add_flag("--randomize", ea.randomize, "Keep dynamics randomization on");
  eval->add_option("--seed", ea.seed, "Terrain and reset seed");
  eval->add_option("--episode-length", ea.episode_length, "Episode length override, s");
  eval->add_option("--out", ea.out, "Output stem for the .json and .csv report");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Simulator throughput at 1 env and at the configured env count");
  bench->add_option("--config", ba.config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  bench->add_option("--seconds", ba.seconds, "Simulated seconds per env");
  bench->add_option("--envs", ba.envs, "Override the large batch size");
  bench->add_flag("--serial", ba.serial, "Use the serial reference path");
  bench->add_option("--out", ba.out, "Also write the report as JSON");

  ExportArgs xa;
  auto* exp = app.add_subcommand("export", "Convert a metrics stream or eval reports to CSV");
  exp->add_option("--metrics", xa.metrics, "metrics.jsonl from a training run");
  exp->add_option("--what", xa.what, "return, level, terms, losses, throughput or cot")->required();
  exp->add_option("--reports", xa.reports, "Eval report JSON files (for --what cot)");
  exp->add_option("--out", xa.out, "CSV path (default: stdout)");

  InitArgs ia;
  auto* init = app.add_subcommand("init", "Write the initial checkpoint of a config without training");
  init->add_option("--config", ia.config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  init->add_option("--out", ia.out, "Checkpoint stem")->required();
  init->add_flag("--zero", ia.zero, "Zero every parameter (the policy outputs the stand pose)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kBadInput;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*bench) return cmd_bench(ba);
    if (*exp) return cmd_export(xa);
    if (*init) return cmd_init(ia);
  } catch (const ConfigError& e) {
    std::cerr << "config error";
    if (!e.key().empty()) std::cerr << " at '" << e.key() << "'";
    std::cerr << ": " << e.what() << "\n";
    return kBadInput;
  } catch (const ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return kBadInput;
  } catch (const MorphologyMismatch& e) {
    std::cerr << "morphology mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCorrupt;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
