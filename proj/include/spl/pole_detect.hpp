#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <unordered_map>
#include <vector>

#include "spl/geometry.hpp"

namespace spl {

/// Grid-based verticality detector standing in for a learned pole extractor.
/// A 2D occupancy grid over (x, y) keeps per-cell vertical-slab occupancy;
/// cells with enough consecutive occupied slabs are clustered (4-connected)
/// and compact clusters become detections.
struct DetectorConfig {
  double xy_cell = 0.2;       // meters
  double z_slab = 0.5;        // meters
  int min_slabs = 3;          // consecutive occupied slabs required
  double max_footprint = 0.6; // meters, cluster diameter bound
  int min_points = 3;
};

inline void validate(const DetectorConfig& cfg) {
  if (cfg.xy_cell <= 0.0 || cfg.z_slab <= 0.0 || cfg.min_slabs <= 0 || cfg.max_footprint <= 0.0 ||
      cfg.min_points <= 0) {
    throw ConfigError("detector: all parameters must be positive");
  }
  if (cfg.max_footprint < cfg.xy_cell) {
    throw ConfigError("detector: max_footprint must be >= xy_cell");
  }
}

/// One pole hypothesis in a single frame. Points are in the world frame.
struct PoleDetection {
  std::int64_t frame_id = 0;
  double centroid_x = 0.0;  // world frame
  double centroid_y = 0.0;
  double range = 0.0;  // horizontal sensor-to-centroid distance
  std::vector<Point3> pole_points;
  std::int64_t point_count = 0;
};

/// Horizontal (x, y) distance between the sensor and a detection centroid.
inline double range_of(const PoleDetection& detection, const Pose& sensor_pose) {
  return std::hypot(detection.centroid_x - sensor_pose.x, detection.centroid_y - sensor_pose.y);
}

namespace detail {

// Cell key packing; grid indices are well inside 2^31 for any sane scene.
inline std::uint64_t pack_cell(std::int64_t ix, std::int64_t iy) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(ix)) << 32) |
         static_cast<std::uint64_t>(static_cast<std::uint32_t>(iy));
}

struct Cell {
  std::vector<std::uint32_t> point_indices;
  std::vector<std::int64_t> slabs;  // occupied slab indices, unsorted
};

inline bool has_consecutive_run(std::vector<std::int64_t>& slabs, int min_run) {
  if (static_cast<int>(slabs.size()) < min_run) return false;
  std::sort(slabs.begin(), slabs.end());
  slabs.erase(std::unique(slabs.begin(), slabs.end()), slabs.end());
  int run = 1;
  for (std::size_t i = 1; i < slabs.size(); ++i) {
    run = slabs[i] == slabs[i - 1] + 1 ? run + 1 : 1;
    if (run >= min_run) return true;
  }
  return min_run <= 1;
}

}  // namespace detail

/// Extract vertical pole-like structures from one frame. Boundary points are
/// assigned with floor semantics (lower-index cell). Empty frames yield an
/// empty result; detections are sorted by ascending range and never share a
/// point.
inline std::vector<PoleDetection> detect_poles(const LidarFrame& frame,
                                               const DetectorConfig& cfg = {}) {
  validate(cfg);
  std::vector<PoleDetection> detections;
  if (frame.points.empty()) return detections;

  // World-frame copies of all points; detection reasons about gravity-aligned
  // verticality, which only exists in the world frame.
  std::vector<Point3> world(frame.points.size());
  for (std::size_t i = 0; i < frame.points.size(); ++i) {
    world[i] = sensor_to_world(frame.sensor_pose, frame.points[i]);
  }

  std::unordered_map<std::uint64_t, detail::Cell> grid;
  grid.reserve(world.size());
  std::vector<std::uint64_t> insertion_order;
  for (std::uint32_t i = 0; i < world.size(); ++i) {
    const std::int64_t ix = static_cast<std::int64_t>(std::floor(world[i].x / cfg.xy_cell));
    const std::int64_t iy = static_cast<std::int64_t>(std::floor(world[i].y / cfg.xy_cell));
    const std::int64_t islab = static_cast<std::int64_t>(std::floor(world[i].z / cfg.z_slab));
    const std::uint64_t key = detail::pack_cell(ix, iy);
    auto [it, inserted] = grid.try_emplace(key);
    if (inserted) insertion_order.push_back(key);
    it->second.point_indices.push_back(i);
    it->second.slabs.push_back(islab);
  }

  std::unordered_map<std::uint64_t, bool> candidate;
  candidate.reserve(grid.size());
  for (auto& [key, cell] : grid) {
    candidate[key] = detail::has_consecutive_run(cell.slabs, cfg.min_slabs);
  }

  // 4-connected clustering over candidate cells, visited in point insertion
  // order for determinism.
  std::unordered_map<std::uint64_t, bool> visited;
  for (const std::uint64_t seed_key : insertion_order) {
    if (!candidate[seed_key] || visited[seed_key]) continue;
    std::vector<std::uint64_t> stack{seed_key};
    visited[seed_key] = true;
    std::vector<std::uint32_t> member_points;
    while (!stack.empty()) {
      const std::uint64_t key = stack.back();
      stack.pop_back();
      const detail::Cell& cell = grid[key];
      member_points.insert(member_points.end(), cell.point_indices.begin(),
                           cell.point_indices.end());
      const std::int64_t ix = static_cast<std::int32_t>(key >> 32);
      const std::int64_t iy = static_cast<std::int32_t>(key & 0xffffffffull);
      const std::uint64_t neighbors[4] = {
          detail::pack_cell(ix + 1, iy), detail::pack_cell(ix - 1, iy),
          detail::pack_cell(ix, iy + 1), detail::pack_cell(ix, iy - 1)};
      for (const std::uint64_t nkey : neighbors) {
        auto it = candidate.find(nkey);
        if (it != candidate.end() && it->second && !visited[nkey]) {
          visited[nkey] = true;
          stack.push_back(nkey);
        }
      }
    }

    if (static_cast<int>(member_points.size()) < cfg.min_points) continue;

    double min_x = world[member_points[0]].x, max_x = min_x;
    double min_y = world[member_points[0]].y, max_y = min_y;
    for (const std::uint32_t pi : member_points) {
      min_x = std::min(min_x, world[pi].x);
      max_x = std::max(max_x, world[pi].x);
      min_y = std::min(min_y, world[pi].y);
      max_y = std::max(max_y, world[pi].y);
    }
    if (std::hypot(max_x - min_x, max_y - min_y) > cfg.max_footprint) continue;

    std::sort(member_points.begin(), member_points.end());
    PoleDetection det;
    det.frame_id = frame.frame_id;
    det.pole_points.reserve(member_points.size());
    double sum_x = 0.0, sum_y = 0.0;
    for (const std::uint32_t pi : member_points) {
      det.pole_points.push_back(world[pi]);
      sum_x += world[pi].x;
      sum_y += world[pi].y;
    }
    det.point_count = static_cast<std::int64_t>(det.pole_points.size());
    det.centroid_x = sum_x / static_cast<double>(det.point_count);
    det.centroid_y = sum_y / static_cast<double>(det.point_count);
    det.range = range_of(det, frame.sensor_pose);
    detections.push_back(std::move(det));
  }

  std::stable_sort(detections.begin(), detections.end(),
                   [](const PoleDetection& a, const PoleDetection& b) { return a.range < b.range; });
  return detections;
}

inline void write_detections_csv_header(std::ostream& out) {
  out << "frame_id,centroid_x,centroid_y,range,point_count\n";
}

inline void write_detections_csv_rows(std::ostream& out,
                                      const std::vector<PoleDetection>& detections) {
  char buf[160];
  for (const PoleDetection& d : detections) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9f,%.9f,%.9f,%lld\n",
                  static_cast<long long>(d.frame_id), d.centroid_x, d.centroid_y, d.range,
                  static_cast<long long>(d.point_count));
    out << buf;
  }
}

}  // namespace spl
