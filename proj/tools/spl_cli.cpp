// Command-line front end for the SPL pipeline: synth -> build-dataset ->
// train -> eval, plus standalone detect/track CSV dumps.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spl/spl.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
};

spl::PipelineConfig make_config(const CommonFlags& flags) {
  spl::PipelineConfig cfg;
  if (!flags.config_path.empty()) {
    spl::load_config_file(cfg, flags.config_path);
  }
  // CLI flags override their config keys.
  if (flags.seed_set) cfg.seed = flags.seed;
  if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
  return cfg;
}

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "pipeline config file");
  cmd->add_option("--seed", flags.seed, "global rng seed")->each([&flags](const std::string&) {
    flags.seed_set = true;
  });
  cmd->add_option("--out", flags.out_dir, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Small-pole-landmark identification pipeline"};
  app.require_subcommand(1);

  CommonFlags flags;

  auto* synth = app.add_subcommand("synth", "generate a synthetic world and two traversals");
  add_common(synth, flags);

  auto* detect = app.add_subcommand("detect", "dump per-frame pole detections as CSV");
  add_common(detect, flags);
  std::string detect_session;
  detect->add_option("--session", detect_session, "session file")->required();

  auto* track = app.add_subcommand("track", "associate detections into tracks, dump CSV");
  add_common(track, flags);
  std::string track_session;
  track->add_option("--session", track_session, "session file")->required();

  auto* build = app.add_subcommand("build-dataset", "detect + track + pole images + manifest");
  add_common(build, flags);
  std::vector<std::string> build_sessions;
  build->add_option("--session", build_sessions, "session file (repeatable)")->required();

  auto* train = app.add_subcommand("train", "train the encoder from a dataset manifest");
  add_common(train, flags);
  std::string train_manifest;
  std::string objective;
  train->add_option("--manifest", train_manifest, "dataset manifest")->required();
  train->add_option("--objective", objective, "cl | sl")->check(CLI::IsMember({"cl", "sl"}));

  auto* eval = app.add_subcommand("eval", "retrieval evaluation against a reference database");
  add_common(eval, flags);
  std::string eval_manifest, eval_checkpoint, eval_method, eval_bins;
  eval->add_option("--manifest", eval_manifest, "dataset manifest")->required();
  eval->add_option("--checkpoint", eval_checkpoint, "encoder checkpoint")->required();
  eval->add_option("--method", eval_method, "method label for the report");
  eval->add_option("--bins", eval_bins, "comma-separated range bin edges, e.g. 5,10");

  CLI11_PARSE(app, argc, argv);

  try {
    spl::PipelineConfig cfg = make_config(flags);

    if (synth->parsed()) {
      const spl::SynthOutputs out = cmd_synth(cfg);
      std::printf("wrote %s\nwrote %s\nwrote %s\n", out.train_session_path.c_str(),
                  out.test_session_path.c_str(), out.ground_truth_path.c_str());
    } else if (detect->parsed()) {
      std::printf("wrote %s\n", spl::cmd_detect(cfg, detect_session).c_str());
    } else if (track->parsed()) {
      std::printf("wrote %s\n", spl::cmd_track(cfg, track_session).c_str());
    } else if (build->parsed()) {
      const spl::DatasetOutputs out = cmd_build_dataset(cfg, build_sessions);
      std::printf("wrote %s\n", out.manifest_path.c_str());
      for (const auto& [sid, n] : out.tracks_per_session) {
        std::printf("session %s: %zu tracks\n", sid.c_str(), n);
      }
    } else if (train->parsed()) {
      if (objective == "cl") cfg.train.objective = spl::Objective::kContrastive;
      if (objective == "sl") cfg.train.objective = spl::Objective::kSupervised;
      const spl::TrainOutputs out = cmd_train(cfg, train_manifest);
      std::printf("wrote %s\nwrote %s\nwrote %s\n", out.checkpoint_path.c_str(),
                  out.init_checkpoint_path.c_str(), out.loss_csv_path.c_str());
      if (!out.loss_history.empty()) {
        std::printf("epochs %zu, first loss %.6f, last loss %.6f\n", out.loss_history.size(),
                    out.loss_history.front(), out.loss_history.back());
      }
    } else if (eval->parsed()) {
      if (!eval_bins.empty()) {
        cfg.bin_edges = spl::detail::cfg_doubles(eval_bins, "retrieval.bins");
      }
      std::string method = eval_method;
      if (method.empty()) {
        const auto stem = std::filesystem::path(eval_checkpoint).stem().string();
        method = stem.rfind("encoder_", 0) == 0 ? stem.substr(8) : stem;
      }
      const spl::EvalOutputs out = cmd_eval(cfg, eval_checkpoint, eval_manifest, method);
      std::printf("wrote %s\nwrote %s\n", out.json_path.c_str(), out.csv_path.c_str());
      std::printf("landmarks %zu, queries %lld, R@1 %s, R@5 %s, R@10 %s\n", out.num_landmarks,
                  static_cast<long long>(out.report.total_queries),
                  spl::format_percent(out.report.hits_at[0], out.report.total_queries).c_str(),
                  spl::format_percent(out.report.hits_at[1], out.report.total_queries).c_str(),
                  spl::format_percent(out.report.hits_at[2], out.report.total_queries).c_str());
    }
  } catch (const spl::Error& e) {
    std::fprintf(stderr, "error %s: %s\n", e.category().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error internal: %s\n", e.what());
    return 2;
  }
  return 0;
}
