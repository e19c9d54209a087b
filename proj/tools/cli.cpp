// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "textprune/checkpoint.hpp"
#include "textprune/config.hpp"
#include "textprune/cost_model.hpp"
#include "textprune/image.hpp"
#include "textprune/rng.hpp"
#include "textprune/visualize.hpp"

namespace textprune::cli {

namespace fs = std::filesystem;

namespace {

// Usage problems detected after parsing.
class UsageError : public Error {
 public:
  using Error::Error;
};

std::string checkpoint_name(std::size_t step) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "ckpt_%zu.copa", step);
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string metrics_line(const DetectorMetrics& m) {
  return "accuracy=" + fmt(m.accuracy) + " recall=" + fmt(m.recall) + " accuracy@0.5=" + fmt(m.accuracy_at_half) +
         " recall@0.5=" + fmt(m.recall_at_half);
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::string resume;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t until = 0;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  TrainState state;
  if (!a.resume.empty()) {
    state = load_checkpoint(a.resume);
    if (!a.config.empty()) {
      RunConfig cfg = load_run_config(a.config);
      if (a.seed_set) cfg.train.seed = a.seed;
      if (to_json(cfg) != to_json(RunConfig{state.model, state.train, state.data})) {
        throw UsageError("--config does not match the configuration stored in " + a.resume);
      }
    } else if (a.seed_set && a.seed != state.train.seed) {
      throw UsageError("--seed differs from the checkpoint's seed");
    }
  } else {
    if (a.config.empty()) throw UsageError("train needs --config (or --resume)");
    RunConfig cfg = load_run_config(a.config);
    if (a.seed_set) cfg.train.seed = a.seed;
    cfg.validate();
    state = init_train_state(cfg.model, cfg.train, cfg.data);
  }

  const fs::path dir = a.out;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory " + dir.string() + ": " + ec.message());

  const auto effective = to_json(RunConfig{state.model, state.train, state.data});
  {
    std::ofstream cfg_out(dir / "config.json");
    if (!cfg_out) throw Error("cannot write " + (dir / "config.json").string());
    cfg_out << effective.dump(2) << "\n";
  }
  if (!a.quiet) out << "effective config: " << effective.dump() << "\n";

  // The log is rebuilt from the stored history so a resumed run ends with
  // the same file as an uninterrupted one.
  std::ofstream csv(dir / "train.csv", std::ios::trunc);
  if (!csv) throw Error("cannot write " + (dir / "train.csv").string());
  csv << csv_header() << "\n";
  for (const auto& r : state.history) csv << csv_row(r) << "\n";
  csv.flush();

  const auto start = std::chrono::steady_clock::now();
  TrainHooks hooks;
  hooks.on_step = [&](const StepRecord& r) {
    csv << csv_row(r) << "\n";
    if (!csv) throw Error("write failed for train.csv");
    const std::size_t done = r.step + 1;
    if (!a.quiet && (done % 100 == 0 || done == state.train.steps)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      char line[200];
      std::snprintf(line, sizeof line, "step %zu/%zu pta=%.4f itc=%.4f itm=%.4f ema_pta=%.4f mode=%s (%.1fs)\n", done,
                    state.train.steps, r.pta, r.itc, r.itm, state.pta_ema.value_or(r.pta), to_string(r.mode).c_str(),
                    secs);
      out << line << std::flush;
    }
    const std::size_t ev = state.train.eval_interval;
    if (ev > 0 && done % ev == 0) {
      const auto m = evaluate_detector(state.params, state.model, state.data, state.train.eval_scenes,
                                       state.model.keep_ratio, derive_seed(state.train.seed, kEvalStream));
      out << "eval step " << done << " " << metrics_line(m) << "\n";
    }
  };
  hooks.on_checkpoint = [&](const TrainState& s) {
    save_checkpoint(s, dir / checkpoint_name(s.step));
    csv.flush();
  };
  train(state, hooks, a.until > 0 ? std::optional<std::size_t>(a.until) : std::nullopt);
  if (a.until > 0 && state.step < state.train.steps) save_checkpoint(state, dir / checkpoint_name(state.step));
  csv.flush();
  if (!a.quiet) out << "done: " << state.step << " steps, checkpoint " << (dir / checkpoint_name(state.step)).string() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt;
  std::size_t scenes = 500;
  double alpha = 0;
  bool alpha_set = false;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int cmd_eval_detector(const EvalArgs& a, std::ostream& out) {
  if (a.scenes == 0) throw UsageError("need at least one scene");
  if (a.alpha_set && (!(a.alpha > 0.0) || a.alpha > 1.0)) throw UsageError("--alpha must lie in (0, 1]");
  const TrainState state = load_checkpoint(a.ckpt);
  const double alpha = a.alpha_set ? a.alpha : state.model.keep_ratio;
  const std::uint64_t seed = a.seed_set ? a.seed : derive_seed(state.train.seed, kEvalStream);
  const auto m = evaluate_detector(state.params, state.model, state.data, a.scenes, alpha, seed);
  out << metrics_line(m) << "\n";
  return kExitOk;
}

struct FlopsArgs {
  CostConfig cfg;
  bool sweep = false;
  std::vector<std::size_t> locations{4, 6, 8};
  std::vector<double> ratios{0.1, 0.3, 0.5, 0.7};
};

int cmd_flops(const FlopsArgs& a, std::ostream& out) {
  try {
    if (a.sweep) {
      out << sweep_report(a.cfg, a.locations, a.ratios);
      return kExitOk;
    }
    const auto r = backbone_flops(a.cfg);
    out << "macs=" << r.total << " layer_macs=" << r.layers_total << " detector_macs=" << r.detector
        << " baseline_macs=" << r.baseline << " reduced_tokens=" << r.reduced_tokens << " ratio=" << fmt(r.ratio)
        << " ratio_with_detector=" << fmt(r.ratio_with_detector) << " act_floats=" << r.act_floats << "\n";
    return kExitOk;
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

struct VisualizeArgs {
  std::string ckpt;
  std::uint64_t scene_seed = 0;
  std::string text;
  double alpha = 0;
  bool alpha_set = false;
  std::string out;
};

int cmd_visualize(const VisualizeArgs& a, std::ostream& out) {
  if (a.alpha_set && (!(a.alpha > 0.0) || a.alpha > 1.0)) throw UsageError("--alpha must lie in (0, 1]");
  const TrainState state = load_checkpoint(a.ckpt);
  const double alpha = a.alpha_set ? a.alpha : state.model.keep_ratio;
  const Scene scene = generate_scene(a.scene_seed, state.data);
  Visualization vis;
  try {
    vis = visualize_detection(state.params, state.model, scene.image, a.text, alpha);
  } catch (const Error& e) {
    throw UsageError(std::string("cannot use --text: ") + e.what());
  }
  write_ppm(a.out, vis.overlay);
  out << "kept=" << vis.selection.kept.size() << " of " << state.model.num_patches() << " patches, wrote " << a.out
      << "\n";
  return kExitOk;
}

struct ExportArgs {
  std::string out;
  std::string config;
  std::size_t count = 16;
  std::uint64_t seed = 0;
};

int cmd_export(const ExportArgs& a, std::ostream& out) {
  if (a.count == 0) throw UsageError("--count must be at least 1");
  SceneSpec spec;
  if (!a.config.empty()) spec = load_run_config(a.config).data;
  export_scenes(a.out, a.seed, spec, a.count);
  out << "exported " << a.count << " scenes to " << a.out << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Text-aware patch pruning for vision-language models, desk-scale toolkit", "textprune"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Pre-train on synthetic scenes");
  train_cmd->add_option("--config", train_args.config, "Run config JSON");
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();
  auto* seed_opt = train_cmd->add_option("--seed", train_args.seed, "Override train.seed");
  train_cmd->add_option("--resume", train_args.resume, "Continue from a checkpoint");
  train_cmd->add_option("--until", train_args.until, "Stop after this step and checkpoint");
  train_cmd->add_flag("--quiet", train_args.quiet, "Only write files");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval-detector", "Held-out detector accuracy and recall");
  eval_cmd->add_option("--ckpt", eval_args.ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--n-scenes", eval_args.scenes, "Number of held-out scenes");
  auto* eval_alpha = eval_cmd->add_option("--alpha", eval_args.alpha, "Keeping ratio (default: the model's)");
  auto* eval_seed = eval_cmd->add_option("--seed", eval_args.seed, "Held-out scene seed");

  FlopsArgs flops_args;
  auto* flops_cmd = app.add_subcommand("flops", "Analytic backbone MACs");
  flops_cmd->add_option("--layers", flops_args.cfg.layers, "Transformer layers");
  flops_cmd->add_option("--dim", flops_args.cfg.dim, "Hidden width");
  flops_cmd->add_option("--ffn", flops_args.cfg.ffn_dim, "Feed-forward width");
  flops_cmd->add_option("--heads", flops_args.cfg.heads, "Attention heads");
  flops_cmd->add_option("--tokens", flops_args.cfg.tokens, "Sequence length including [CLS]");
  flops_cmd->add_option("--location", flops_args.cfg.location, "Detector location k");
  flops_cmd->add_option("--ratio", flops_args.cfg.keep_ratio, "Keeping ratio");
  flops_cmd->add_flag("--sweep", flops_args.sweep, "Emit a CSV over locations x ratios");
  flops_cmd->add_option("--locations", flops_args.locations, "Sweep locations")->delimiter(',');
  flops_cmd->add_option("--ratios", flops_args.ratios, "Sweep keeping ratios")->delimiter(',');

  VisualizeArgs vis_args;
  auto* vis_cmd = app.add_subcommand("visualize", "Write a PPM with undetected patches dimmed");
  vis_cmd->add_option("--ckpt", vis_args.ckpt, "Checkpoint")->required();
  vis_cmd->add_option("--scene-seed", vis_args.scene_seed, "Scene seed")->required();
  vis_cmd->add_option("--text", vis_args.text, "Text query")->required();
  auto* vis_alpha = vis_cmd->add_option("--alpha", vis_args.alpha, "Keeping ratio (default: the model's)");
  vis_cmd->add_option("--out", vis_args.out, "Output .ppm")->required();

  ExportArgs export_args;
  auto* export_cmd = app.add_subcommand("export", "Write synthetic scenes with annotations");
  export_cmd->add_option("--out", export_args.out, "Output directory")->required();
  export_cmd->add_option("--count", export_args.count, "Number of scenes");
  export_cmd->add_option("--seed", export_args.seed, "Scene seed");
  export_cmd->add_option("--config", export_args.config, "Run config JSON (data section is used)");

  std::vector<std::string> argv_store{"textprune"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  train_args.seed_set = seed_opt->count() > 0;
  eval_args.alpha_set = eval_alpha->count() > 0;
  eval_args.seed_set = eval_seed->count() > 0;
  vis_args.alpha_set = vis_alpha->count() > 0;

  try {
    if (*train_cmd) return cmd_train(train_args, out);
    if (*eval_cmd) return cmd_eval_detector(eval_args, out);
    if (*flops_cmd) return cmd_flops(flops_args, out);
    if (*vis_cmd) return cmd_visualize(vis_args, out);
    if (*export_cmd) return cmd_export(export_args, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace textprune::cli
