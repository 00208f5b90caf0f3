#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "spl/encoder.hpp"
#include "spl/errors.hpp"
#include "spl/pole_detect.hpp"
#include "spl/pole_image.hpp"
#include "spl/retrieval.hpp"
#include "spl/rng.hpp"
#include "spl/session_io.hpp"
#include "spl/synth.hpp"
#include "spl/track_assoc.hpp"

namespace spl {

/// Aggregate configuration for the end-to-end pipeline. One global seed
/// fans out to per-stage derived seeds (stage-name hashed), so stages can
/// be rerun independently yet reproducibly.
struct PipelineConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "out";

  SynthConfig synth;
  int frames_per_session = 240;
  double sensor_height = 1.5;
  std::uint64_t world_seed = 0;  // 0: derived from the global seed
  bool synth_binary = true;

  DetectorConfig detector;
  GatingConfig gating;
  int min_track_len = 3;

  ProjectionConfig projection;

  TrainConfig train;
  int max_obs_per_track = 0;  // 0: keep every labeled observation
  std::string train_session;  // empty: first session in the manifest
  std::string query_session;  // empty: first session differing from train

  std::int64_t max_pole_points = 10;
  std::vector<double> bin_edges = {5.0, 10.0};
  double landmark_match_radius = 1.0;
};

// ---------------------------------------------------------------------------
// Config file: flat key-value text with [section] headers, '#' comments.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline double cfg_double(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline std::int64_t cfg_int(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
  }
}

inline std::uint64_t cfg_u64(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const unsigned long long i = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected an unsigned integer, got '" + v + "'");
  }
}

inline bool cfg_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
}

inline std::vector<double> cfg_doubles(const std::string& v, const std::string& key) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    std::size_t comma = v.find(',', start);
    if (comma == std::string::npos) comma = v.size();
    const std::string token = trim(v.substr(start, comma - start));
    if (!token.empty()) out.push_back(cfg_double(token, key));
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

/// Apply one "<section>.<key> = <value>" assignment.
inline void set_config_value(PipelineConfig& cfg, const std::string& section,
                             const std::string& key, const std::string& value) {
  using detail::cfg_bool;
  using detail::cfg_double;
  using detail::cfg_doubles;
  using detail::cfg_int;
  using detail::cfg_u64;
  const std::string full = section + "." + key;

  if (section == "global") {
    if (key == "seed") cfg.seed = cfg_u64(value, full);
    else if (key == "out") cfg.out_dir = value;
    else throw ConfigError("unknown config key '" + full + "'");
  } else if (section == "synth") {
    if (key == "num_poles") cfg.synth.num_poles = static_cast<int>(cfg_int(value, full));
    else if (key == "area_x") cfg.synth.area_x = cfg_double(value, full);
    else if (key == "area_y") cfg.synth.area_y = cfg_double(value, full);
    else if (key == "pole_height_min") cfg.synth.pole_height_min = cfg_double(value, full);
    else if (key == "pole_height_max") cfg.synth.pole_height_max = cfg_double(value, full);
    else if (key == "pole_radius_min") cfg.synth.pole_radius_min = cfg_double(value, full);
    else if (key == "pole_radius_max") cfg.synth.pole_radius_max = cfg_double(value, full);
    else if (key == "clutter_density") cfg.synth.clutter_density = cfg_double(value, full);
    else if (key == "angular_resolution_deg") cfg.synth.angular_resolution_deg = cfg_double(value, full);
    else if (key == "max_range") cfg.synth.max_range = cfg_double(value, full);
    else if (key == "noise_sigma") cfg.synth.noise_sigma = cfg_double(value, full);
    else if (key == "num_rings") cfg.synth.num_rings = static_cast<int>(cfg_int(value, full));
    else if (key == "elev_min_deg") cfg.synth.elev_min_deg = cfg_double(value, full);
    else if (key == "elev_max_deg") cfg.synth.elev_max_deg = cfg_double(value, full);
    else if (key == "frames_per_session") cfg.frames_per_session = static_cast<int>(cfg_int(value, full));
    else if (key == "sensor_height") cfg.sensor_height = cfg_double(value, full);
    else if (key == "world_seed") cfg.world_seed = cfg_u64(value, full);
    else if (key == "binary") cfg.synth_binary = cfg_bool(value, full);
    else throw ConfigError("unknown config key '" + full + "'");
  } else if (section == "detector") {
    if (key == "xy_cell") cfg.detector.xy_cell = cfg_double(value, full);
    else if (key == "z_slab") cfg.detector.z_slab = cfg_double(value, full);
    else if (key == "min_slabs") cfg.detector.min_slabs = static_cast<int>(cfg_int(value, full));
    else if (key == "max_footprint") cfg.detector.max_footprint = cfg_double(value, full);
    else if (key == "min_points") cfg.detector.min_points = static_cast<int>(cfg_int(value, full));
    else throw ConfigError("unknown config key '" + full + "'");
  } else if (section == "gating") {
    if (key == "base_gate") cfg.gating.base_gate = cfg_double(value, full);
    else if (key == "range_gain") cfg.gating.range_gain = cfg_double(value, full);
    else if (key == "max_missed_frames") cfg.gating.max_missed_frames = static_cast<int>(cfg_int(value, full));
    else if (key == "duplicate_suppression_radius") cfg.gating.duplicate_suppression_radius = cfg_double(value, full);
    else if (key == "min_track_len") cfg.min_track_len = static_cast<int>(cfg_int(value, full));
    else throw ConfigError("unknown config key '" + full + "'");
  } else if (section == "projection") {
    if (key == "num_rows") cfg.projection.num_rows = static_cast<int>(cfg_int(value, full));
    else if (key == "num_cols") cfg.projection.num_cols = static_cast<int>(cfg_int(value, full));
    else if (key == "r_max") cfg.projection.r_max = cfg_double(value, full);
    else if (key == "z_min") cfg.projection.z_min = cfg_double(value, full);
    else if (key == "z_max") cfg.projection.z_max = cfg_double(value, full);
    else throw ConfigError("unknown config key '" + full + "'");
  } else if (section == "train") {
    if (key == "objective") {
      if (value == "cl") cfg.train.objective = Objective::kContrastive;
      else if (value == "sl") cfg.train.objective = Objective::kSupervised;
      else throw ConfigError("key '" + full + "': expected 'cl' or 'sl', got '" + value + "'");
    } else if (key == "temperature") cfg.train.temperature = cfg_double(value, full);
    else if (key == "learning_rate") cfg.train.learning_rate = cfg_double(value, full);
    else if (key == "epochs") cfg.train.epochs = static_cast<int>(cfg_int(value, full));
    else if (key == "batch_size_sl") cfg.train.batch_size_sl = static_cast<int>(cfg_int(value, full));
    else if (key == "batch_size_cl") cfg.train.batch_size_cl = static_cast<int>(cfg_int(value, full));
    else if (key == "bidirectional") cfg.train.cl_bidirectional = cfg_bool(value, full);
    else if (key == "max_obs_per_track") cfg.max_obs_per_track = static_cast<int>(cfg_int(value, full));
    else if (key == "session") cfg.train_session = value;
    else throw ConfigError("unknown config key '" + full + "'");
  } else if (section == "retrieval") {
    if (key == "max_pole_points") cfg.max_pole_points = cfg_int(value, full);
    else if (key == "bins") cfg.bin_edges = cfg_doubles(value, full);
    else if (key == "query_session") cfg.query_session = value;
    else if (key == "landmark_match_radius") cfg.landmark_match_radius = cfg_double(value, full);
    else throw ConfigError("unknown config key '" + full + "'");
  } else {
    throw ConfigError("unknown config section '" + section + "'");
  }
}

inline void load_config_file(PipelineConfig& cfg, const std::string& path) {
  std::ifstream file(path);
  if (!file) throw IoError("cannot open config '" + path + "'");
  std::string line;
  std::string section = "global";
  std::size_t lineno = 0;
  while (std::getline(file, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError(path + ":" + std::to_string(lineno) + ": malformed section header");
      }
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    set_config_value(cfg, section, key, value);
  }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthOutputs {
  std::string train_session_path;
  std::string test_session_path;
  std::string ground_truth_path;
};

/// Generate the world and two distinct traversals over it, then write both
/// session files and the ground-truth pole manifest.
inline SynthOutputs cmd_synth(const PipelineConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  SynthConfig world_cfg = cfg.synth;
  world_cfg.rng_seed = cfg.world_seed != 0 ? cfg.world_seed : derive_seed(cfg.seed, "stage.synth.world");
  const World world = generate_world(world_cfg);

  SynthConfig traverse_cfg = cfg.synth;
  traverse_cfg.rng_seed = derive_seed(cfg.seed, "stage.synth.traverse");

  const double inset_a = 0.26 * std::min(cfg.synth.area_x, cfg.synth.area_y);
  const double inset_b = 0.36 * std::min(cfg.synth.area_x, cfg.synth.area_y);
  const auto traj_train =
      make_loop_trajectory(cfg.synth, cfg.frames_per_session, inset_a, false, 0.0,
                           cfg.sensor_height, derive_seed(cfg.seed, "stage.synth.traj.train"));
  const auto traj_test =
      make_loop_trajectory(cfg.synth, cfg.frames_per_session, inset_b, true, 1.7,
                           cfg.sensor_height, derive_seed(cfg.seed, "stage.synth.traj.test"));

  const Session train = simulate_traverse(world, traj_train, traverse_cfg, "train");
  const Session test = simulate_traverse(world, traj_test, traverse_cfg, "test");

  const SessionFormat format = cfg.synth_binary ? SessionFormat::kBinary : SessionFormat::kText;
  const std::string ext = cfg.synth_binary ? ".splsb" : ".spls";
  SynthOutputs out;
  out.train_session_path = (fs::path(cfg.out_dir) / ("train" + ext)).string();
  out.test_session_path = (fs::path(cfg.out_dir) / ("test" + ext)).string();
  out.ground_truth_path = (fs::path(cfg.out_dir) / "ground_truth.json").string();
  write_session(train, out.train_session_path, format);
  write_session(test, out.test_session_path, format);

  nlohmann::json gt;
  gt["world_seed"] = world_cfg.rng_seed;
  gt["poles"] = nlohmann::json::array();
  for (const PoleSpec& pole : world.poles) {
    gt["poles"].push_back({{"id", pole.id},
                           {"x", pole.x},
                           {"y", pole.y},
                           {"radius", pole.radius},
                           {"height", pole.height}});
  }
  std::ofstream gt_file(out.ground_truth_path);
  if (!gt_file) throw IoError("cannot open '" + out.ground_truth_path + "' for writing");
  gt_file << gt.dump(2) << "\n";
  return out;
}

// ---------------------------------------------------------------------------
// detect / track (standalone CSV dumps)
// ---------------------------------------------------------------------------

inline std::string cmd_detect(const PipelineConfig& cfg, const std::string& session_path) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const Session session = read_session(session_path);
  const std::string out_path =
      (fs::path(cfg.out_dir) / (session.session_id + "_detections.csv")).string();
  std::ofstream out(out_path);
  if (!out) throw IoError("cannot open '" + out_path + "' for writing");
  write_detections_csv_header(out);
  for (const LidarFrame& frame : session.frames) {
    write_detections_csv_rows(out, detect_poles(frame, cfg.detector));
  }
  return out_path;
}

inline std::vector<Track> run_tracking(const Session& session, const DetectorConfig& det_cfg,
                                       const GatingConfig& gate_cfg) {
  Tracker tracker(gate_cfg);
  for (const LidarFrame& frame : session.frames) {
    tracker.update(frame.frame_id, detect_poles(frame, det_cfg), frame.sensor_pose);
  }
  return tracker.tracks();
}

inline std::string cmd_track(const PipelineConfig& cfg, const std::string& session_path) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const Session session = read_session(session_path);
  const std::vector<Track> tracks = run_tracking(session, cfg.detector, cfg.gating);
  const std::string out_path =
      (fs::path(cfg.out_dir) / (session.session_id + "_tracks.csv")).string();
  std::ofstream out(out_path);
  if (!out) throw IoError("cannot open '" + out_path + "' for writing");
  write_tracks_csv(out, tracks);
  return out_path;
}

// ---------------------------------------------------------------------------
// build-dataset
// ---------------------------------------------------------------------------

struct DatasetOutputs {
  std::string manifest_path;
  std::map<std::string, std::size_t> tracks_per_session;
};

/// Run detect -> track -> pole image for every session, write the Pole-Image
/// PGMs and the manifest linking every image to (session, track, frame,
/// range, point count).
inline DatasetOutputs cmd_build_dataset(const PipelineConfig& cfg,
                                        const std::vector<std::string>& session_paths) {
  namespace fs = std::filesystem;
  if (session_paths.empty()) throw ConfigError("build-dataset: no sessions given");
  fs::create_directories(fs::path(cfg.out_dir) / "images");

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["projection"] = {{"num_rows", cfg.projection.num_rows},
                            {"num_cols", cfg.projection.num_cols},
                            {"r_max", cfg.projection.r_max},
                            {"z_min", cfg.projection.z_min},
                            {"z_max", cfg.projection.z_max}};
  manifest["sessions"] = nlohmann::json::array();

  DatasetOutputs outputs;
  outputs.manifest_path = (fs::path(cfg.out_dir) / "manifest.json").string();
  std::size_t total_tracks = 0;

  for (const std::string& session_path : session_paths) {
    if (fs::weakly_canonical(session_path) == fs::weakly_canonical(outputs.manifest_path)) {
      throw ConfigError("build-dataset: input session and output manifest paths collide");
    }
    const Session session = read_session(session_path);

    // Per-frame detection CSV rides along for inspection.
    const std::string det_csv =
        (fs::path(cfg.out_dir) / (session.session_id + "_detections.csv")).string();
    std::ofstream det_out(det_csv);
    if (!det_out) throw IoError("cannot open '" + det_csv + "' for writing");
    write_detections_csv_header(det_out);

    Tracker tracker(cfg.gating);
    std::map<std::int64_t, const LidarFrame*> frame_by_id;
    for (const LidarFrame& frame : session.frames) {
      frame_by_id[frame.frame_id] = &frame;
      const std::vector<PoleDetection> detections = detect_poles(frame, cfg.detector);
      write_detections_csv_rows(det_out, detections);
      tracker.update(frame.frame_id, detections, frame.sensor_pose);
    }
    const std::vector<Track>& tracks = tracker.tracks();

    const std::string tracks_csv =
        (fs::path(cfg.out_dir) / (session.session_id + "_tracks.csv")).string();
    std::ofstream tracks_out(tracks_csv);
    if (!tracks_out) throw IoError("cannot open '" + tracks_csv + "' for writing");
    write_tracks_csv(tracks_out, tracks);

    const std::vector<LabeledObservation> labels = export_labels(tracks, cfg.min_track_len);

    nlohmann::json jsession;
    jsession["session_id"] = session.session_id;
    // Manifest paths are relative to the manifest's own directory: reruns
    // into different directories must produce byte-identical manifests.
    jsession["session_path"] = fs::weakly_canonical(session_path)
                                   .lexically_proximate(fs::weakly_canonical(cfg.out_dir))
                                   .generic_string();
    jsession["tracks"] = nlohmann::json::array();
    std::size_t exported_tracks = 0;
    for (const Track& track : tracks) {
      if (static_cast<int>(track.detections.size()) < cfg.min_track_len) continue;
      jsession["tracks"].push_back({{"track_id", track.track_id},
                                    {"anchor", {track.anchor_x, track.anchor_y}},
                                    {"length", track.detections.size()}});
      ++exported_tracks;
    }
    jsession["observations"] = nlohmann::json::array();
    for (const LabeledObservation& obs : labels) {
      const LidarFrame& frame = *frame_by_id.at(obs.frame_id);
      const PoleImage image = make_pole_image(obs.detection, frame, cfg.projection, obs.track_id);
      const std::string image_name = session.session_id + "_" + std::to_string(obs.track_id) +
                                     "_" + std::to_string(obs.frame_id) + ".pgm";
      write_pgm(image, (fs::path(cfg.out_dir) / "images" / image_name).string());
      jsession["observations"].push_back({{"track_id", obs.track_id},
                                          {"frame_id", obs.frame_id},
                                          {"range", obs.range},
                                          {"pole_point_count", obs.pole_point_count},
                                          {"image", "images/" + image_name}});
    }
    outputs.tracks_per_session[session.session_id] = exported_tracks;
    total_tracks += exported_tracks;
    manifest["sessions"].push_back(std::move(jsession));
  }

  if (total_tracks == 0) {
    throw DatasetError("build-dataset produced an empty dataset: no tracks of length >= " +
                       std::to_string(cfg.min_track_len) + " in any session");
  }

  std::ofstream mf(outputs.manifest_path);
  if (!mf) throw IoError("cannot open '" + outputs.manifest_path + "' for writing");
  mf << manifest.dump(2) << "\n";
  return outputs;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json load_manifest(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw IoError("cannot open manifest '" + path + "'");
  nlohmann::json manifest;
  try {
    file >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest '" + path + "': " + e.what());
  }
  if (!manifest.contains("sessions") || manifest["sessions"].empty()) {
    throw FormatError("manifest '" + path + "' lists no sessions");
  }
  return manifest;
}

inline const nlohmann::json& manifest_session(const nlohmann::json& manifest,
                                              const std::string& wanted, const char* role) {
  if (wanted.empty()) return manifest["sessions"].front();
  for (const auto& s : manifest["sessions"]) {
    if (s["session_id"].get<std::string>() == wanted) return s;
  }
  throw ConfigError(std::string(role) + " session '" + wanted + "' not found in manifest");
}

}  // namespace detail

struct TrainOutputs {
  std::string checkpoint_path;
  std::string init_checkpoint_path;
  std::string loss_csv_path;
  std::vector<double> loss_history;
};

/// Train on the labeled observations of the training session. With
/// max_obs_per_track > 0 each track contributes at most that many
/// observations, subsampled deterministically (keeps classes balanced and
/// the epoch cost bounded).
inline TrainOutputs cmd_train(const PipelineConfig& cfg, const std::string& manifest_path) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const nlohmann::json manifest = detail::load_manifest(manifest_path);
  const nlohmann::json& session = detail::manifest_session(manifest, cfg.train_session, "train");
  const fs::path manifest_dir = fs::path(manifest_path).parent_path();

  std::map<std::int64_t, std::vector<const nlohmann::json*>> obs_by_track;
  for (const auto& obs : session["observations"]) {
    obs_by_track[obs["track_id"].get<std::int64_t>()].push_back(&obs);
  }
  if (obs_by_track.empty()) {
    throw DatasetError("train: session '" + session["session_id"].get<std::string>() +
                       "' has no labeled observations");
  }

  Rng cap_rng(derive_seed(cfg.seed, "stage.train.cap"));
  std::vector<TrainExample> examples;
  for (auto& [track_id, obs_list] : obs_by_track) {
    std::vector<std::size_t> keep(obs_list.size());
    std::iota(keep.begin(), keep.end(), 0);
    if (cfg.max_obs_per_track > 0 &&
        obs_list.size() > static_cast<std::size_t>(cfg.max_obs_per_track)) {
      for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.max_obs_per_track); ++i) {
        const std::size_t j = i + cap_rng.uniform_int(keep.size() - i);
        std::swap(keep[i], keep[j]);
      }
      keep.resize(static_cast<std::size_t>(cfg.max_obs_per_track));
      std::sort(keep.begin(), keep.end());
    }
    for (const std::size_t idx : keep) {
      const nlohmann::json& obs = *obs_list[idx];
      TrainExample ex;
      ex.image = read_pgm((manifest_dir / obs["image"].get<std::string>()).string());
      ex.image.track_id = track_id;
      ex.image.range = obs["range"].get<double>();
      ex.image.pole_point_count = obs["pole_point_count"].get<std::int64_t>();
      ex.track_id = track_id;
      examples.push_back(std::move(ex));
    }
  }

  EncoderConfig ecfg;
  ecfg.input_rows = cfg.projection.num_rows;
  ecfg.input_cols = cfg.projection.num_cols;
  TrainConfig tc = cfg.train;
  tc.rng_seed = derive_seed(cfg.seed, "stage.train");
  TrainResult result = train(examples, ecfg, tc);

  const char* tag = tc.objective == Objective::kContrastive ? "cl" : "sl";
  TrainOutputs out;
  out.checkpoint_path = (fs::path(cfg.out_dir) / ("encoder_" + std::string(tag) + ".sple")).string();
  out.init_checkpoint_path = (fs::path(cfg.out_dir) / "encoder_init.sple").string();
  out.loss_csv_path = (fs::path(cfg.out_dir) / ("loss_" + std::string(tag) + ".csv")).string();
  out.loss_history = result.loss_history;
  save_checkpoint(result.params, out.checkpoint_path);
  save_checkpoint(result.initial_params, out.init_checkpoint_path);

  std::ofstream loss_file(out.loss_csv_path);
  if (!loss_file) throw IoError("cannot open '" + out.loss_csv_path + "' for writing");
  loss_file << "epoch,mean_loss\n";
  char buf[64];
  for (std::size_t e = 0; e < result.loss_history.size(); ++e) {
    std::snprintf(buf, sizeof(buf), "%zu,%.12g\n", e + 1, result.loss_history[e]);
    loss_file << buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOutputs {
  std::string json_path;
  std::string csv_path;
  RetrievalReport report;
  std::size_t num_landmarks = 0;
  std::size_t unmatched_query_tracks = 0;
};

namespace detail {

struct AnchorTrack {
  std::int64_t track_id;
  double x, y;
};

/// Single-linkage merge of co-located track anchors (same physical pole seen
/// by more than one track); the landmark id is the smallest member track id.
inline std::vector<std::vector<AnchorTrack>> cluster_anchors(std::vector<AnchorTrack> tracks,
                                                             double radius) {
  std::vector<int> parent(tracks.size());
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    for (std::size_t j = i + 1; j < tracks.size(); ++j) {
      if (std::hypot(tracks[i].x - tracks[j].x, tracks[i].y - tracks[j].y) < radius) {
        parent[find(static_cast<int>(i))] = find(static_cast<int>(j));
      }
    }
  }
  std::map<int, std::vector<AnchorTrack>> groups;
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    groups[find(static_cast<int>(i))].push_back(tracks[i]);
  }
  std::vector<std::vector<AnchorTrack>> clusters;
  for (auto& [root, members] : groups) {
    std::sort(members.begin(), members.end(),
              [](const AnchorTrack& a, const AnchorTrack& b) { return a.track_id < b.track_id; });
    clusters.push_back(std::move(members));
  }
  return clusters;
}

}  // namespace detail

/// Build the reference database from the training session, identify queries
/// from the held-out session via world-frame anchor proximity, filter to
/// small-pole observations, and emit the recall report.
inline EvalOutputs cmd_eval(const PipelineConfig& cfg, const std::string& checkpoint_path,
                            const std::string& manifest_path, const std::string& method) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const EncoderParams params = load_checkpoint(checkpoint_path);
  const nlohmann::json manifest = detail::load_manifest(manifest_path);
  const fs::path manifest_dir = fs::path(manifest_path).parent_path();

  const nlohmann::json& ref_session = detail::manifest_session(manifest, cfg.train_session, "reference");
  const std::string ref_id = ref_session["session_id"].get<std::string>();
  std::string query_wanted = cfg.query_session;
  if (query_wanted.empty()) {
    for (const auto& s : manifest["sessions"]) {
      if (s["session_id"].get<std::string>() != ref_id) {
        query_wanted = s["session_id"].get<std::string>();
        break;
      }
    }
    if (query_wanted.empty()) {
      throw ConfigError("eval: manifest holds only the reference session '" + ref_id + "'");
    }
  }
  const nlohmann::json& query_session = detail::manifest_session(manifest, query_wanted, "query");

  // Landmark table: reference tracks merged by anchor proximity.
  std::vector<detail::AnchorTrack> ref_tracks;
  for (const auto& t : ref_session["tracks"]) {
    ref_tracks.push_back({t["track_id"].get<std::int64_t>(), t["anchor"][0].get<double>(),
                          t["anchor"][1].get<double>()});
  }
  if (ref_tracks.empty()) throw DatasetError("eval: reference session has no tracks");
  const auto clusters = detail::cluster_anchors(ref_tracks, cfg.landmark_match_radius);

  struct LandmarkInfo {
    std::int64_t landmark_id;
    double x, y;
    std::set<std::int64_t> member_tracks;
  };
  std::vector<LandmarkInfo> landmarks;
  for (const auto& cluster : clusters) {
    LandmarkInfo info;
    info.landmark_id = cluster.front().track_id;
    double sx = 0.0, sy = 0.0;
    for (const detail::AnchorTrack& t : cluster) {
      info.member_tracks.insert(t.track_id);
      sx += t.x;
      sy += t.y;
    }
    info.x = sx / static_cast<double>(cluster.size());
    info.y = sy / static_cast<double>(cluster.size());
    landmarks.push_back(std::move(info));
  }

  std::map<std::int64_t, std::size_t> landmark_of_track;
  for (std::size_t li = 0; li < landmarks.size(); ++li) {
    for (const std::int64_t tid : landmarks[li].member_tracks) landmark_of_track[tid] = li;
  }

  std::vector<LandmarkObservations> reference(landmarks.size());
  for (std::size_t li = 0; li < landmarks.size(); ++li) {
    reference[li].landmark_id = landmarks[li].landmark_id;
  }
  for (const auto& obs : ref_session["observations"]) {
    const auto it = landmark_of_track.find(obs["track_id"].get<std::int64_t>());
    if (it == landmark_of_track.end()) continue;
    LandmarkObservations& lm = reference[it->second];
    lm.images.push_back(read_pgm((manifest_dir / obs["image"].get<std::string>()).string()));
    lm.frame_ids.push_back(obs["frame_id"].get<std::int64_t>());
    lm.ranges.push_back(obs["range"].get<double>());
  }

  const std::vector<DatabaseEntry> database =
      build_database(reference, params, derive_seed(cfg.seed, "stage.eval.database"));

  // Cross-session correspondence: a query track belongs to the nearest
  // landmark anchor within the match radius; unmatched tracks are dropped.
  std::map<std::int64_t, std::int64_t> query_track_landmark;
  std::size_t unmatched = 0;
  for (const auto& t : query_session["tracks"]) {
    const double qx = t["anchor"][0].get<double>();
    const double qy = t["anchor"][1].get<double>();
    double best = cfg.landmark_match_radius;
    std::int64_t best_id = -1;
    for (const LandmarkInfo& lm : landmarks) {
      const double d = std::hypot(lm.x - qx, lm.y - qy);
      if (d < best) {
        best = d;
        best_id = lm.landmark_id;
      }
    }
    if (best_id >= 0) {
      query_track_landmark[t["track_id"].get<std::int64_t>()] = best_id;
    } else {
      ++unmatched;
    }
  }

  std::vector<Query> candidates;
  for (const auto& obs : query_session["observations"]) {
    const auto it = query_track_landmark.find(obs["track_id"].get<std::int64_t>());
    if (it == query_track_landmark.end()) continue;
    const std::int64_t count = obs["pole_point_count"].get<std::int64_t>();
    if (count >= cfg.max_pole_points) continue;  // skip embedding what the filter drops
    Query q;
    q.landmark_id = it->second;
    q.range = obs["range"].get<double>();
    q.pole_point_count = count;
    q.embedding = forward(params, read_pgm((manifest_dir / obs["image"].get<std::string>()).string()));
    candidates.push_back(std::move(q));
  }
  const std::vector<Query> queries = select_queries(candidates, cfg.max_pole_points);
  if (queries.empty()) {
    throw DatasetError("eval: no queries below " + std::to_string(cfg.max_pole_points) +
                       " pole points matched the database");
  }

  EvalOutputs out;
  out.report = recall_report(queries, database, bins_from_edges(cfg.bin_edges), method);
  out.num_landmarks = landmarks.size();
  out.unmatched_query_tracks = unmatched;
  out.json_path = (fs::path(cfg.out_dir) / ("report_" + method + ".json")).string();
  out.csv_path = (fs::path(cfg.out_dir) / ("report_" + method + ".csv")).string();
  write_report_json(out.report, out.json_path);
  write_report_csv(out.report, out.csv_path);
  return out;
}

}  // namespace spl
