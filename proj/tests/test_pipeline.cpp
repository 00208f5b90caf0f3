#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "spl/pipeline.hpp"

namespace {

using namespace spl;
namespace fs = std::filesystem;

std::string fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

/// Small, fast pipeline configuration used across these tests.
PipelineConfig tiny_config(const std::string& out_dir, std::uint64_t seed = 123) {
  PipelineConfig cfg;
  cfg.seed = seed;
  cfg.out_dir = out_dir;
  cfg.synth.num_poles = 8;
  cfg.synth.area_x = cfg.synth.area_y = 70.0;
  cfg.synth.clutter_density = 0.4;
  cfg.synth.angular_resolution_deg = 0.7;
  cfg.synth.num_rings = 24;
  cfg.synth.max_range = 35.0;
  cfg.frames_per_session = 80;
  cfg.detector.z_slab = 1.0;
  cfg.projection.num_rows = 32;
  cfg.projection.num_cols = 72;
  cfg.train.epochs = 3;
  cfg.train.batch_size_cl = 8;
  cfg.train.batch_size_sl = 16;
  cfg.max_obs_per_track = 3;
  return cfg;
}

}  // namespace

TEST_CASE("config files parse sections, comments and overrides") {
  const std::string dir = fresh_dir("spl_pipe_cfg");
  const std::string path = dir + "/pipeline.cfg";
  {
    std::ofstream out(path);
    out << "# pipeline configuration\n"
        << "[global]\n"
        << "seed = 777\n"
        << "out = " << dir << "/run\n"
        << "[synth]\n"
        << "num_poles = 13     # inline comment\n"
        << "area_x = 120.5\n"
        << "noise_sigma = 0.01\n"
        << "[detector]\n"
        << "z_slab = 0.75\n"
        << "[train]\n"
        << "objective = sl\n"
        << "epochs = 7\n"
        << "bidirectional = true\n"
        << "[retrieval]\n"
        << "bins = 4, 8\n"
        << "max_pole_points = 12\n";
  }
  PipelineConfig cfg;
  load_config_file(cfg, path);
  CHECK(cfg.seed == 777);
  CHECK(cfg.out_dir == dir + "/run");
  CHECK(cfg.synth.num_poles == 13);
  CHECK(cfg.synth.area_x == 120.5);
  CHECK(cfg.synth.noise_sigma == 0.01);
  CHECK(cfg.detector.z_slab == 0.75);
  CHECK(cfg.train.objective == Objective::kSupervised);
  CHECK(cfg.train.epochs == 7);
  CHECK(cfg.train.cl_bidirectional);
  CHECK(cfg.bin_edges == std::vector<double>{4.0, 8.0});
  CHECK(cfg.max_pole_points == 12);

  // A CLI flag override routes through the same setter.
  set_config_value(cfg, "global", "seed", "9001");
  CHECK(cfg.seed == 9001);

  CHECK_THROWS_AS(set_config_value(cfg, "synth", "bogus_key", "1"), ConfigError);
  CHECK_THROWS_AS(set_config_value(cfg, "nowhere", "k", "1"), ConfigError);
  CHECK_THROWS_AS(set_config_value(cfg, "synth", "num_poles", "many"), ConfigError);
}

TEST_CASE("bin edge parsing builds the labeled intervals") {
  const auto bins = bins_from_edges({5.0, 10.0});
  REQUIRE(bins.size() == 3);
  CHECK(bins[0].label == "[0,5]m");
  CHECK(bins[1].label == "(5,10]m");
  CHECK(bins[2].label == "(10,inf)m");
  CHECK(bins[0].contains(5.0));
  CHECK(!bins[1].contains(5.0));
  CHECK(bins[1].contains(10.0));
  CHECK(bins[2].contains(10.5));
  CHECK_THROWS_AS(bins_from_edges({10.0, 5.0}), ConfigError);
}

TEST_CASE("synth writes two sessions plus ground truth, byte-identical on rerun") {
  const std::string dir_a = fresh_dir("spl_pipe_synth_a");
  const std::string dir_b = fresh_dir("spl_pipe_synth_b");
  const SynthOutputs a = cmd_synth(tiny_config(dir_a));
  const SynthOutputs b = cmd_synth(tiny_config(dir_b));
  for (const std::string* path : {&a.train_session_path, &a.test_session_path,
                                  &a.ground_truth_path}) {
    CHECK(fs::exists(*path));
  }
  CHECK(read_file(a.train_session_path) == read_file(b.train_session_path));
  CHECK(read_file(a.test_session_path) == read_file(b.test_session_path));
  CHECK(read_file(a.ground_truth_path) == read_file(b.ground_truth_path));

  // The two traversals differ from each other.
  CHECK(read_file(a.train_session_path) != read_file(a.test_session_path));
}

TEST_CASE("a pinned world seed keeps the pole layout while seeds vary the traversals") {
  const std::string dir_a = fresh_dir("spl_pipe_world_a");
  const std::string dir_b = fresh_dir("spl_pipe_world_b");
  PipelineConfig cfg_a = tiny_config(dir_a, 1);
  PipelineConfig cfg_b = tiny_config(dir_b, 2);
  cfg_a.world_seed = cfg_b.world_seed = 5555;
  const SynthOutputs a = cmd_synth(cfg_a);
  const SynthOutputs b = cmd_synth(cfg_b);
  CHECK(read_file(a.ground_truth_path) == read_file(b.ground_truth_path));
  CHECK(read_file(a.train_session_path) != read_file(b.train_session_path));
}

TEST_CASE("build-dataset covers every well-observed pole and reruns identically") {
  const std::string dir = fresh_dir("spl_pipe_dataset");
  const PipelineConfig cfg = tiny_config(dir);
  const SynthOutputs synth = cmd_synth(cfg);
  const DatasetOutputs ds =
      cmd_build_dataset(cfg, {synth.train_session_path, synth.test_session_path});
  REQUIRE(fs::exists(ds.manifest_path));

  nlohmann::json manifest;
  std::ifstream(ds.manifest_path) >> manifest;
  REQUIRE(manifest["sessions"].size() == 2);

  // Ground-truth coverage audit: every pole seen from close by in many
  // frames must own at least one track anchor within 1 m.
  nlohmann::json gt;
  std::ifstream(synth.ground_truth_path) >> gt;
  const Session train_session = read_session(synth.train_session_path);
  for (const auto& jsession : manifest["sessions"]) {
    if (jsession["session_id"] != "train") continue;
    for (const auto& pole : gt["poles"]) {
      const double px = pole["x"].get<double>();
      const double py = pole["y"].get<double>();
      int close_poses = 0;
      for (const LidarFrame& frame : train_session.frames) {
        if (std::hypot(frame.sensor_pose.x - px, frame.sensor_pose.y - py) < 20.0) ++close_poses;
      }
      if (close_poses < 5) continue;  // rarely-seen pole, no claim
      bool covered = false;
      for (const auto& track : jsession["tracks"]) {
        const double ax = track["anchor"][0].get<double>();
        const double ay = track["anchor"][1].get<double>();
        if (std::hypot(ax - px, ay - py) < 1.0) covered = true;
      }
      CHECK(covered);
    }
  }

  // Observations reference images that exist, with sane metadata.
  for (const auto& jsession : manifest["sessions"]) {
    for (const auto& obs : jsession["observations"]) {
      CHECK(fs::exists(fs::path(dir) / obs["image"].get<std::string>()));
      CHECK(obs["pole_point_count"].get<std::int64_t>() >= 1);
      CHECK(obs["range"].get<double>() >= 0.0);
    }
  }

  const std::string first = read_file(ds.manifest_path);
  const DatasetOutputs again =
      cmd_build_dataset(cfg, {synth.train_session_path, synth.test_session_path});
  CHECK(read_file(again.manifest_path) == first);
}

TEST_CASE("build-dataset on empty frames raises the empty-dataset error") {
  const std::string dir = fresh_dir("spl_pipe_empty");
  Session empty;
  empty.session_id = "void";
  for (int f = 0; f < 5; ++f) {
    LidarFrame frame;
    frame.frame_id = f;
    frame.timestamp = 0.1 * f;
    empty.frames.push_back(frame);
  }
  const std::string path = dir + "/void.spls";
  write_session(empty, path, SessionFormat::kText);
  const PipelineConfig cfg = tiny_config(dir);
  REQUIRE_THROWS_MATCHES(cmd_build_dataset(cfg, {path}), DatasetError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("empty dataset")));
}

TEST_CASE("train writes checkpoints and a loss CSV; cl and sl share initial weights") {
  const std::string dir = fresh_dir("spl_pipe_train");
  PipelineConfig cfg = tiny_config(dir);
  const SynthOutputs synth = cmd_synth(cfg);
  const DatasetOutputs ds =
      cmd_build_dataset(cfg, {synth.train_session_path, synth.test_session_path});

  cfg.train.objective = Objective::kContrastive;
  const TrainOutputs cl = cmd_train(cfg, ds.manifest_path);
  REQUIRE(fs::exists(cl.checkpoint_path));
  REQUIRE(fs::exists(cl.init_checkpoint_path));
  REQUIRE(cl.loss_history.size() == static_cast<std::size_t>(cfg.train.epochs));
  {
    std::ifstream loss(cl.loss_csv_path);
    std::string header;
    std::getline(loss, header);
    CHECK(header == "epoch,mean_loss");
    int rows = 0;
    std::string line;
    while (std::getline(loss, line)) {
      if (!line.empty()) ++rows;
    }
    CHECK(rows == cfg.train.epochs);
  }
  const std::string init_bytes = read_file(cl.init_checkpoint_path);

  cfg.train.objective = Objective::kSupervised;
  const TrainOutputs sl = cmd_train(cfg, ds.manifest_path);
  CHECK(read_file(sl.init_checkpoint_path) == init_bytes);  // same seed, same init
  CHECK(read_file(sl.checkpoint_path) != read_file(cl.checkpoint_path));
}

TEST_CASE("train rejects a single-class manifest under the supervised objective") {
  const std::string dir = fresh_dir("spl_pipe_oneclass");
  PipelineConfig cfg = tiny_config(dir);
  // Hand-built session: the same clean cylinder in every frame guarantees
  // exactly one track and therefore one class.
  Session session;
  session.session_id = "mono";
  Rng rng(313);
  for (int f = 0; f < 10; ++f) {
    LidarFrame frame;
    frame.frame_id = f;
    frame.timestamp = 0.1 * f;
    for (int i = 0; i < 60; ++i) {
      const double a = rng.uniform(0.0, kTwoPi);
      frame.points.push_back(
          {5.0 + 0.08 * std::cos(a), 5.0 + 0.08 * std::sin(a), rng.uniform(0.0, 4.0)});
    }
    session.frames.push_back(std::move(frame));
  }
  const std::string session_path = dir + "/mono.spls";
  write_session(session, session_path, SessionFormat::kText);
  cfg.detector.z_slab = 0.5;
  const DatasetOutputs ds = cmd_build_dataset(cfg, {session_path});
  cfg.train.objective = Objective::kSupervised;
  CHECK_THROWS_AS(cmd_train(cfg, ds.manifest_path), DatasetError);
}

TEST_CASE("eval produces the report pair and is deterministic") {
  const std::string dir = fresh_dir("spl_pipe_eval");
  PipelineConfig cfg = tiny_config(dir);
  const SynthOutputs synth = cmd_synth(cfg);
  const DatasetOutputs ds =
      cmd_build_dataset(cfg, {synth.train_session_path, synth.test_session_path});
  cfg.train.objective = Objective::kContrastive;
  const TrainOutputs tr = cmd_train(cfg, ds.manifest_path);

  const EvalOutputs eval = cmd_eval(cfg, tr.checkpoint_path, ds.manifest_path, "cl");
  REQUIRE(fs::exists(eval.json_path));
  REQUIRE(fs::exists(eval.csv_path));
  CHECK(eval.report.total_queries > 0);
  CHECK(eval.num_landmarks > 0);
  CHECK(eval.report.recall_at.at(1) <= eval.report.recall_at.at(5));
  CHECK(eval.report.recall_at.at(5) <= eval.report.recall_at.at(10));

  nlohmann::json parsed;
  std::ifstream(eval.json_path) >> parsed;
  CHECK(parsed["method"] == "cl");
  CHECK(parsed["total_queries"].get<std::int64_t>() == eval.report.total_queries);
  REQUIRE(parsed["bins"].size() == 3);
  CHECK(parsed["bins"][0]["label"] == "[0,5]m");

  const std::string csv = read_file(eval.csv_path);
  CHECK(csv.rfind("method,range,n_query,r1,r5,r10\n", 0) == 0);
  CHECK(csv.find("cl,overall,") != std::string::npos);

  const std::string json_bytes = read_file(eval.json_path);
  const EvalOutputs again = cmd_eval(cfg, tr.checkpoint_path, ds.manifest_path, "cl");
  CHECK(read_file(again.json_path) == json_bytes);
}

TEST_CASE("eval surfaces missing files clearly") {
  const std::string dir = fresh_dir("spl_pipe_missing");
  const PipelineConfig cfg = tiny_config(dir);
  REQUIRE_THROWS_MATCHES(
      cmd_eval(cfg, dir + "/no_such_checkpoint.sple", dir + "/no_manifest.json", "cl"), IoError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("no_such_checkpoint")));
}
