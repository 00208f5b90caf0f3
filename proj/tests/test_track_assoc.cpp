#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "spl/rng.hpp"
#include "spl/track_assoc.hpp"

namespace {

using namespace spl;

PoleDetection make_detection(std::int64_t frame_id, double x, double y, int count = 10) {
  PoleDetection det;
  det.frame_id = frame_id;
  det.centroid_x = x;
  det.centroid_y = y;
  det.range = std::hypot(x, y);
  det.point_count = count;
  det.pole_points.assign(count, Point3{x, y, 1.0});
  return det;
}

int active_tracks(const Tracker& tracker) {
  int n = 0;
  for (const Track& t : tracker.tracks()) {
    if (t.state == TrackState::kActive) ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("gate radius is affine in range with the documented defaults") {
  CHECK(gate_radius(0.0) == 0.5);
  CHECK(gate_radius(25.0) == Catch::Approx(0.5 + 0.02 * 25.0));  // = 1.0
  GatingConfig flat;
  flat.range_gain = 0.0;
  CHECK(gate_radius(0.0, flat) == gate_radius(100.0, flat));
}

TEST_CASE("gate radius is positive and non-decreasing in range") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    GatingConfig cfg;
    cfg.base_gate = rng.uniform(0.05, 2.0);
    cfg.range_gain = rng.uniform(0.0, 0.2);
    double prev = 0.0;
    for (double range = 0.0; range <= 60.0; range += 1.5) {
      const double g = gate_radius(range, cfg);
      CHECK(g > 0.0);
      CHECK(g >= prev);
      prev = g;
    }
  }
}

TEST_CASE("a stationary pole stays one track across 20 frames") {
  Tracker tracker;
  Rng rng(11);
  for (int f = 0; f < 20; ++f) {
    const double nx = 0.01 * rng.normal();
    const double ny = 0.01 * rng.normal();
    tracker.update(f, {make_detection(f, 5.0 + nx, 2.0 + ny)}, Pose{});
  }
  REQUIRE(tracker.tracks().size() == 1);
  CHECK(tracker.tracks()[0].detections.size() == 20);
  CHECK(tracker.tracks()[0].state == TrackState::kActive);
}

TEST_CASE("two well-separated poles never swap identities over 50 frames") {
  Tracker tracker;
  Rng rng(12);
  for (int f = 0; f < 50; ++f) {
    std::vector<PoleDetection> dets;
    dets.push_back(make_detection(f, 0.0 + 0.02 * rng.normal(), 0.0 + 0.02 * rng.normal()));
    dets.push_back(make_detection(f, 10.0 + 0.02 * rng.normal(), 0.0 + 0.02 * rng.normal()));
    tracker.update(f, dets, Pose{});
  }
  REQUIRE(tracker.tracks().size() == 2);
  for (const Track& t : tracker.tracks()) {
    REQUIRE(t.detections.size() == 50);
    // All member centroids cluster around one pole: zero identity switches.
    for (const PoleDetection& d : t.detections) {
      CHECK(std::hypot(d.centroid_x - t.anchor_x, d.centroid_y - t.anchor_y) < 0.5);
    }
  }
}

TEST_CASE("a track missed beyond the timeout closes and a new one opens") {
  GatingConfig cfg;  // max_missed_frames = 10
  Tracker tracker(cfg);
  int frame = 0;
  for (; frame < 5; ++frame) {
    tracker.update(frame, {make_detection(frame, 3.0, 3.0)}, Pose{});
  }
  for (int gap = 0; gap < cfg.max_missed_frames + 1; ++gap, ++frame) {
    tracker.update(frame, {}, Pose{});
  }
  tracker.update(frame, {make_detection(frame, 3.0, 3.0)}, Pose{});
  REQUIRE(tracker.tracks().size() == 2);
  CHECK(tracker.tracks()[0].state == TrackState::kClosed);
  CHECK(tracker.tracks()[1].state == TrackState::kActive);
  CHECK(tracker.tracks()[0].track_id != tracker.tracks()[1].track_id);
}

TEST_CASE("a missed track within the timeout is re-acquired") {
  GatingConfig cfg;
  Tracker tracker(cfg);
  int frame = 0;
  for (; frame < 5; ++frame) {
    tracker.update(frame, {make_detection(frame, 3.0, 3.0)}, Pose{});
  }
  for (int gap = 0; gap < cfg.max_missed_frames; ++gap, ++frame) {
    tracker.update(frame, {}, Pose{});
  }
  tracker.update(frame, {make_detection(frame, 3.0, 3.0)}, Pose{});
  REQUIRE(tracker.tracks().size() == 1);
  CHECK(tracker.tracks()[0].detections.size() == 6);
}

TEST_CASE("out-of-order frames raise an ordering error") {
  Tracker tracker;
  tracker.update(10, {make_detection(10, 1.0, 1.0)}, Pose{});
  CHECK_THROWS_AS(tracker.update(10, {}, Pose{}), OrderingError);
  CHECK_THROWS_AS(tracker.update(7, {}, Pose{}), OrderingError);
}

TEST_CASE("per-frame assignment is injective") {
  Tracker tracker;
  Rng rng(13);
  // Several close-by poles with gates large enough to overlap.
  GatingConfig cfg;
  cfg.base_gate = 2.0;
  Tracker crowded(cfg);
  for (int f = 0; f < 30; ++f) {
    std::vector<PoleDetection> dets;
    const int n = 3 + static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i < n; ++i) {
      dets.push_back(make_detection(f, 2.0 * i + 0.3 * rng.normal(), 0.3 * rng.normal()));
    }
    std::map<std::int64_t, std::size_t> before;
    for (const Track& t : crowded.tracks()) before[t.track_id] = t.detections.size();
    crowded.update(f, dets, Pose{});
    std::size_t gained = 0;
    for (const Track& t : crowded.tracks()) {
      const auto it = before.find(t.track_id);
      const std::size_t prev = it == before.end() ? 0 : it->second;
      REQUIRE(t.detections.size() - prev <= 1);  // each track gains at most one
      gained += t.detections.size() - prev;
    }
    CHECK(gained == dets.size());  // every detection lands in exactly one track
  }
}

TEST_CASE("anchors equal the arithmetic mean of member centroids") {
  Tracker tracker;
  Rng rng(14);
  for (int f = 0; f < 40; ++f) {
    std::vector<PoleDetection> dets;
    dets.push_back(make_detection(f, 4.0 + 0.05 * rng.normal(), -1.0 + 0.05 * rng.normal()));
    if (f % 2 == 0) {
      dets.push_back(make_detection(f, -6.0 + 0.05 * rng.normal(), 3.0 + 0.05 * rng.normal()));
    }
    tracker.update(f, dets, Pose{});
    for (const Track& t : tracker.tracks()) {
      double mx = 0.0, my = 0.0;
      for (const PoleDetection& d : t.detections) {
        mx += d.centroid_x;
        my += d.centroid_y;
      }
      mx /= static_cast<double>(t.detections.size());
      my /= static_cast<double>(t.detections.size());
      CHECK(std::abs(t.anchor_x - mx) < 1e-9);
      CHECK(std::abs(t.anchor_y - my) < 1e-9);
    }
  }
}

TEST_CASE("cluster fragments next to an active track do not spawn tracks") {
  Tracker tracker;
  tracker.update(0, {make_detection(0, 5.0, 5.0)}, Pose{});
  // A fragment 0.3 m from the established anchor plus the real detection:
  // the fragment is suppressed, a genuinely separate pole is not.
  std::vector<PoleDetection> dets;
  dets.push_back(make_detection(1, 5.0, 5.0));
  dets.push_back(make_detection(1, 5.3, 5.0));   // fragment
  dets.push_back(make_detection(1, 6.5, 5.0));   // new pole, beyond suppression
  tracker.update(1, dets, Pose{});
  REQUIRE(tracker.tracks().size() == 2);
  CHECK(tracker.tracks()[0].detections.size() == 2);
  CHECK(tracker.tracks()[1].detections.size() == 1);

  // With suppression disabled the fragment opens its own track.
  GatingConfig open_cfg;
  open_cfg.duplicate_suppression_radius = 0.0;
  Tracker unsuppressed(open_cfg);
  unsuppressed.update(0, {make_detection(0, 5.0, 5.0)}, Pose{});
  unsuppressed.update(1, dets, Pose{});
  CHECK(unsuppressed.tracks().size() == 3);
}

TEST_CASE("export_labels keeps full tracks and drops short ones") {
  Tracker tracker;
  for (int f = 0; f < 5; ++f) {
    std::vector<PoleDetection> dets{make_detection(f, 1.0, 1.0)};
    if (f < 2) dets.push_back(make_detection(f, 8.0, 8.0));
    tracker.update(f, dets, Pose{});
  }
  const auto labels = export_labels(tracker.tracks(), 3);
  REQUIRE(labels.size() == 5);
  const std::int64_t id = labels.front().track_id;
  for (const LabeledObservation& obs : labels) {
    CHECK(obs.track_id == id);
    CHECK(obs.range == obs.detection.range);
    CHECK(obs.pole_point_count == obs.detection.point_count);
  }

  Tracker two_frames;
  for (int f = 0; f < 2; ++f) {
    two_frames.update(f, {make_detection(f, 1.0, 1.0)}, Pose{});
  }
  CHECK(export_labels(two_frames.tracks(), 3).empty());
}

TEST_CASE("synthetic multi-pole run keeps label purity at 1.0") {
  // Ground-truth audit on noisy detections of known poles, >= 3 m apart.
  Rng rng(15);
  std::vector<std::array<double, 2>> poles;
  for (int i = 0; i < 12; ++i) {
    poles.push_back({6.0 * (i % 4), 6.0 * (i / 4)});
  }
  Tracker tracker;
  for (int f = 0; f < 100; ++f) {
    std::vector<PoleDetection> dets;
    for (std::size_t pi = 0; pi < poles.size(); ++pi) {
      if (rng.uniform01() < 0.15) continue;  // occasional misses
      dets.push_back(
          make_detection(f, poles[pi][0] + 0.05 * rng.normal(), poles[pi][1] + 0.05 * rng.normal()));
    }
    tracker.update(f, dets, Pose{});
  }
  const auto labels = export_labels(tracker.tracks(), 3);
  REQUIRE(!labels.empty());
  // Majority-pole purity over all exported observations.
  std::map<std::int64_t, std::map<int, int>> votes;
  for (const LabeledObservation& obs : labels) {
    int nearest = -1;
    double best = 1e9;
    for (std::size_t pi = 0; pi < poles.size(); ++pi) {
      const double d = std::hypot(obs.detection.centroid_x - poles[pi][0],
                                  obs.detection.centroid_y - poles[pi][1]);
      if (d < best) {
        best = d;
        nearest = static_cast<int>(pi);
      }
    }
    votes[obs.track_id][nearest] += 1;
  }
  std::size_t pure = 0;
  std::set<int> claimed;
  for (const auto& [track_id, poll] : votes) {
    int best_pole = -1, best_count = 0, total = 0;
    for (const auto& [pole, count] : poll) {
      total += count;
      if (count > best_count) {
        best_count = count;
        best_pole = pole;
      }
    }
    CHECK(claimed.insert(best_pole).second);  // 1-to-1: no two tracks share a pole
    pure += best_count;
    CHECK(best_count == total);  // zero identity switches
  }
  CHECK(static_cast<double>(pure) / labels.size() >= 0.95);
}
