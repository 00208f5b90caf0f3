#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <vector>

#include "spl/errors.hpp"
#include "spl/pole_detect.hpp"

namespace spl {

/// Adaptive spatial gate: the association radius grows with observation
/// range to absorb range-dependent centroid noise.
struct GatingConfig {
  double base_gate = 0.5;    // meters at range 0
  double range_gain = 0.02;  // meters of gate per meter of range
  int max_missed_frames = 10;
  // An unmatched detection this close to an active track's anchor is a
  // cluster fragment of that track, not a new pole; poles are >= 1 m
  // apart, so 0.7 m never swallows a real neighbor. 0 disables.
  double duplicate_suppression_radius = 0.7;
};

inline void validate(const GatingConfig& cfg) {
  if (cfg.base_gate <= 0.0) throw ConfigError("gating: base_gate must be > 0");
  if (cfg.range_gain < 0.0) throw ConfigError("gating: range_gain must be >= 0");
  if (cfg.max_missed_frames < 0) throw ConfigError("gating: max_missed_frames must be >= 0");
  if (cfg.duplicate_suppression_radius < 0.0) {
    throw ConfigError("gating: duplicate_suppression_radius must be >= 0");
  }
}

inline double gate_radius(double range, const GatingConfig& cfg = {}) {
  return cfg.base_gate + cfg.range_gain * range;
}

enum class TrackState { kActive, kClosed };

/// Cross-frame identity of one physical pole. The anchor is the running
/// mean of member centroids; poles are static, so the mean suppresses
/// per-frame noise.
struct Track {
  std::int64_t track_id = 0;
  std::vector<PoleDetection> detections;  // time-ordered
  double anchor_x = 0.0;
  double anchor_y = 0.0;
  int missed = 0;
  TrackState state = TrackState::kActive;

  // Centroid sums backing the running mean.
  double sum_x = 0.0;
  double sum_y = 0.0;
};

/// One automatically labeled observation: the track id is the identity label.
struct LabeledObservation {
  std::int64_t track_id = 0;
  std::int64_t frame_id = 0;
  PoleDetection detection;
  double range = 0.0;
  std::int64_t pole_point_count = 0;
};

/// Sequential per-frame association of detections into tracks via greedy
/// nearest-neighbor matching under the adaptive gate. Single-owner state:
/// feed frames in strictly increasing frame_id order.
class Tracker {
 public:
  explicit Tracker(const GatingConfig& cfg = {}) : cfg_(cfg) { validate(cfg_); }

  /// Processes one frame worth of detections (may be empty; empty frames
  /// still advance the missed counters). Greedy assignment in ascending
  /// distance order, ties broken by lower detection index; a detection
  /// joins a track only within the gate; each track gains at most one
  /// detection per frame; leftovers open new tracks unless they sit within
  /// the duplicate-suppression radius of an active track.
  void update(std::int64_t frame_id, const std::vector<PoleDetection>& detections,
              const Pose& sensor_pose) {
    (void)sensor_pose;  // ranges are carried by the detections themselves
    if (has_last_frame_ && frame_id <= last_frame_) {
      throw OrderingError("update_tracks: frame " + std::to_string(frame_id) +
                          " is not later than already-tracked frame " +
                          std::to_string(last_frame_));
    }
    last_frame_ = frame_id;
    has_last_frame_ = true;

    struct Pair {
      double dist;
      std::size_t det;
      std::size_t track;
    };
    std::vector<Pair> pairs;
    for (std::size_t ti = 0; ti < tracks_.size(); ++ti) {
      const Track& track = tracks_[ti];
      if (track.state != TrackState::kActive) continue;
      for (std::size_t di = 0; di < detections.size(); ++di) {
        const PoleDetection& det = detections[di];
        const double d = std::hypot(track.anchor_x - det.centroid_x,
                                    track.anchor_y - det.centroid_y);
        if (d <= gate_radius(det.range, cfg_)) {
          pairs.push_back({d, di, ti});
        }
      }
    }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
      if (a.dist != b.dist) return a.dist < b.dist;
      if (a.det != b.det) return a.det < b.det;
      return a.track < b.track;
    });

    std::vector<bool> det_used(detections.size(), false);
    std::vector<bool> track_used(tracks_.size(), false);
    for (const Pair& pair : pairs) {
      if (det_used[pair.det] || track_used[pair.track]) continue;
      det_used[pair.det] = true;
      track_used[pair.track] = true;
      append_detection(tracks_[pair.track], detections[pair.det]);
    }

    for (std::size_t ti = 0; ti < tracks_.size(); ++ti) {
      Track& track = tracks_[ti];
      if (track.state != TrackState::kActive || track_used[ti]) continue;
      ++track.missed;
      if (track.missed > cfg_.max_missed_frames) track.state = TrackState::kClosed;
    }

    for (std::size_t di = 0; di < detections.size(); ++di) {
      if (det_used[di]) continue;
      if (cfg_.duplicate_suppression_radius > 0.0 &&
          near_active_track(detections[di], cfg_.duplicate_suppression_radius)) {
        continue;  // fragment of an already-tracked pole
      }
      Track track;
      track.track_id = next_id_++;
      append_detection(track, detections[di]);
      tracks_.push_back(std::move(track));
    }
  }

  const std::vector<Track>& tracks() const { return tracks_; }
  const GatingConfig& config() const { return cfg_; }

 private:
  bool near_active_track(const PoleDetection& det, double radius) const {
    for (const Track& track : tracks_) {
      if (track.state != TrackState::kActive) continue;
      if (std::hypot(track.anchor_x - det.centroid_x, track.anchor_y - det.centroid_y) <= radius) {
        return true;
      }
    }
    return false;
  }

  void append_detection(Track& track, const PoleDetection& det) {
    track.detections.push_back(det);
    track.sum_x += det.centroid_x;
    track.sum_y += det.centroid_y;
    const double n = static_cast<double>(track.detections.size());
    track.anchor_x = track.sum_x / n;
    track.anchor_y = track.sum_y / n;
    track.missed = 0;
  }

  GatingConfig cfg_;
  std::vector<Track> tracks_;
  std::int64_t next_id_ = 0;
  std::int64_t last_frame_ = 0;
  bool has_last_frame_ = false;
};

/// One labeled observation per (track, frame) membership; tracks shorter
/// than min_track_len are dropped (single-frame tracks carry no multi-view
/// signal). Covers active and closed tracks alike.
inline std::vector<LabeledObservation> export_labels(const std::vector<Track>& tracks,
                                                     int min_track_len = 3) {
  std::vector<LabeledObservation> labels;
  for (const Track& track : tracks) {
    if (static_cast<int>(track.detections.size()) < min_track_len) continue;
    for (const PoleDetection& det : track.detections) {
      LabeledObservation obs;
      obs.track_id = track.track_id;
      obs.frame_id = det.frame_id;
      obs.detection = det;
      obs.range = det.range;
      obs.pole_point_count = det.point_count;
      labels.push_back(std::move(obs));
    }
  }
  return labels;
}

inline void write_tracks_csv(std::ostream& out, const std::vector<Track>& tracks) {
  out << "track_id,frame_id,centroid_x,centroid_y,range,point_count\n";
  char buf[192];
  for (const Track& track : tracks) {
    for (const PoleDetection& d : track.detections) {
      std::snprintf(buf, sizeof(buf), "%lld,%lld,%.9f,%.9f,%.9f,%lld\n",
                    static_cast<long long>(track.track_id), static_cast<long long>(d.frame_id),
                    d.centroid_x, d.centroid_y, d.range, static_cast<long long>(d.point_count));
      out << buf;
    }
  }
}

}  // namespace spl
