#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "spl/errors.hpp"
#include "spl/geometry.hpp"
#include "spl/rng.hpp"

namespace spl {

/// Configuration of the synthetic world and the simulated sensor.
///
/// The sensor is a single 360-degree azimuthal sweep with a fixed set of
/// elevation rings, coarse-grained after the HDL-32E. It reproduces the one
/// phenomenon under test (range-induced sparsity) without full sensor
/// fidelity: the number of beams hitting a pole falls off with distance.
struct SynthConfig {
  int num_poles = 20;
  double area_x = 100.0;  // meters
  double area_y = 100.0;
  double pole_height_min = 4.0;
  double pole_height_max = 7.0;
  double pole_radius_min = 0.08;
  double pole_radius_max = 0.20;
  double clutter_density = 0.5;  // objects per 100 m^2
  double angular_resolution_deg = 0.4;
  double max_range = 50.0;
  double noise_sigma = 0.02;  // isotropic Gaussian on range, meters
  int num_rings = 16;
  double elev_min_deg = -15.0;
  double elev_max_deg = 15.0;
  std::uint64_t rng_seed = 0;
};

inline void validate(const SynthConfig& cfg) {
  if (cfg.num_poles < 1) throw ConfigError("synth: num_poles must be >= 1");
  if (cfg.angular_resolution_deg <= 0.0) throw ConfigError("synth: angular_resolution must be > 0");
  if (cfg.max_range <= 0.0) throw ConfigError("synth: max_range must be > 0");
  if (cfg.area_x <= 0.0 || cfg.area_y <= 0.0) throw ConfigError("synth: area must be positive");
  if (cfg.pole_height_max < cfg.pole_height_min || cfg.pole_radius_max < cfg.pole_radius_min) {
    throw ConfigError("synth: pole height/radius ranges inverted");
  }
  if (cfg.num_rings < 1) throw ConfigError("synth: num_rings must be >= 1");
  if (cfg.noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be >= 0");
}

/// Vertical cylinder standing on the ground plane (z in [0, height]).
struct PoleSpec {
  std::int64_t id = 0;
  double x = 0.0;
  double y = 0.0;
  double radius = 0.1;
  double height = 5.0;
};

/// Vertical rectangle: segment (x1,y1)-(x2,y2) extruded to z in [0, height].
struct WallSpec {
  double x1 = 0.0, y1 = 0.0;
  double x2 = 0.0, y2 = 0.0;
  double height = 1.5;
};

/// Axis-aligned ellipsoid (foliage blob) resting near the ground.
struct BlobSpec {
  double x = 0.0, y = 0.0, z = 0.0;  // center
  double sx = 1.0, sy = 1.0, sz = 0.5;  // semi-axes
};

/// Static world geometry: the session template from which traversals are
/// simulated. Pole ids double as the ground-truth landmark identities.
struct World {
  std::vector<PoleSpec> poles;
  std::vector<WallSpec> walls;
  std::vector<BlobSpec> blobs;
};

namespace detail {

inline double point_segment_distance_2d(double px, double py, double x1, double y1,
                                        double x2, double y2) {
  const double vx = x2 - x1, vy = y2 - y1;
  const double wx = px - x1, wy = py - y1;
  const double vv = vx * vx + vy * vy;
  double t = vv > 0.0 ? (wx * vx + wy * vy) / vv : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (x1 + t * vx), py - (y1 + t * vy));
}

}  // namespace detail

/// Lay out poles and static clutter. Deterministic for a fixed seed. Poles
/// are pairwise >= 1 m apart; clutter keeps clear of pole footprints.
/// Clutter vocabulary is walls plus squat foliage blobs: both stay below 2 m
/// of vertical extent so only poles present tall vertical structure.
inline World generate_world(const SynthConfig& cfg) {
  validate(cfg);
  Rng rng(derive_seed(cfg.rng_seed, "synth.world"));
  World world;

  const double margin = 2.0;
  if (cfg.area_x <= 2.0 * margin || cfg.area_y <= 2.0 * margin) {
    throw PlacementError("area " + std::to_string(cfg.area_x) + "x" + std::to_string(cfg.area_y) +
                         " m too small for the 2 m border margin");
  }

  const int max_attempts = 1000 * cfg.num_poles;
  int attempts = 0;
  while (static_cast<int>(world.poles.size()) < cfg.num_poles) {
    if (++attempts > max_attempts) {
      throw PlacementError("cannot place " + std::to_string(cfg.num_poles) +
                           " poles with >= 1 m pairwise separation in a " +
                           std::to_string(cfg.area_x) + "x" + std::to_string(cfg.area_y) +
                           " m area");
    }
    PoleSpec pole;
    pole.id = static_cast<std::int64_t>(world.poles.size());
    pole.x = rng.uniform(margin, cfg.area_x - margin);
    pole.y = rng.uniform(margin, cfg.area_y - margin);
    pole.radius = rng.uniform(cfg.pole_radius_min, cfg.pole_radius_max);
    pole.height = rng.uniform(cfg.pole_height_min, cfg.pole_height_max);
    bool ok = true;
    for (const PoleSpec& other : world.poles) {
      if (std::hypot(pole.x - other.x, pole.y - other.y) < 1.0) {
        ok = false;
        break;
      }
    }
    if (ok) world.poles.push_back(pole);
  }

  const int num_clutter =
      static_cast<int>(std::llround(cfg.clutter_density * cfg.area_x * cfg.area_y / 100.0));
  const double clearance = 0.3;
  for (int i = 0; i < num_clutter; ++i) {
    const bool make_wall = rng.uniform01() < 0.5;
    // A handful of rejection attempts per object; an object that cannot be
    // placed clear of pole footprints is dropped (keeps determinism).
    for (int attempt = 0; attempt < 40; ++attempt) {
      if (make_wall) {
        WallSpec wall;
        const double cx = rng.uniform(margin, cfg.area_x - margin);
        const double cy = rng.uniform(margin, cfg.area_y - margin);
        const double half = 0.5 * rng.uniform(2.0, 8.0);
        const double ang = rng.uniform(0.0, kTwoPi);
        wall.x1 = cx - half * std::cos(ang);
        wall.y1 = cy - half * std::sin(ang);
        wall.x2 = cx + half * std::cos(ang);
        wall.y2 = cy + half * std::sin(ang);
        wall.height = rng.uniform(1.0, 1.8);
        bool ok = true;
        for (const PoleSpec& pole : world.poles) {
          if (detail::point_segment_distance_2d(pole.x, pole.y, wall.x1, wall.y1, wall.x2,
                                                wall.y2) < pole.radius + clearance) {
            ok = false;
            break;
          }
        }
        if (ok) {
          world.walls.push_back(wall);
          break;
        }
      } else {
        BlobSpec blob;
        blob.x = rng.uniform(margin, cfg.area_x - margin);
        blob.y = rng.uniform(margin, cfg.area_y - margin);
        blob.sx = rng.uniform(0.8, 2.0);
        blob.sy = rng.uniform(0.8, 2.0);
        blob.sz = rng.uniform(0.4, 0.9);
        blob.z = blob.sz;  // rests on the ground
        bool ok = true;
        for (const PoleSpec& pole : world.poles) {
          if (std::hypot(blob.x - pole.x, blob.y - pole.y) <
              std::max(blob.sx, blob.sy) + pole.radius + clearance) {
            ok = false;
            break;
          }
        }
        if (ok) {
          world.blobs.push_back(blob);
          break;
        }
      }
    }
  }
  return world;
}

namespace detail {

struct RayHit {
  double t = std::numeric_limits<double>::infinity();
  bool valid = false;
};

/// Nearest intersection of ray o + t*d with the side surface of a vertical
/// cylinder. Caps are ignored; the side surface is what drives the
/// range-vs-coverage geometry.
inline RayHit ray_cylinder(const Point3& o, const Point3& d, const PoleSpec& pole) {
  RayHit hit;
  const double ox = o.x - pole.x, oy = o.y - pole.y;
  const double a = d.x * d.x + d.y * d.y;
  if (a < 1e-12) return hit;  // vertical ray
  const double b = 2.0 * (ox * d.x + oy * d.y);
  const double c = ox * ox + oy * oy - pole.radius * pole.radius;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return hit;
  const double sq = std::sqrt(disc);
  for (const double t : {(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)}) {
    if (t <= 1e-9) continue;
    const double z = o.z + t * d.z;
    if (z < 0.0 || z > pole.height) continue;
    hit.t = t;
    hit.valid = true;
    return hit;  // roots are ordered, first valid is nearest
  }
  return hit;
}

inline RayHit ray_wall(const Point3& o, const Point3& d, const WallSpec& wall) {
  RayHit hit;
  // Solve o_xy + t*d_xy = p1 + u*(p2-p1) for t > 0, u in [0,1].
  const double ex = wall.x2 - wall.x1, ey = wall.y2 - wall.y1;
  const double det = d.x * ey - d.y * ex;
  if (std::abs(det) < 1e-12) return hit;
  const double rx = wall.x1 - o.x, ry = wall.y1 - o.y;
  const double t = (rx * ey - ry * ex) / det;
  const double u = (rx * d.y - ry * d.x) / (-det);
  if (t <= 1e-9 || u < 0.0 || u > 1.0) return hit;
  const double z = o.z + t * d.z;
  if (z < 0.0 || z > wall.height) return hit;
  hit.t = t;
  hit.valid = true;
  return hit;
}

inline RayHit ray_blob(const Point3& o, const Point3& d, const BlobSpec& blob) {
  RayHit hit;
  const double px = (o.x - blob.x) / blob.sx;
  const double py = (o.y - blob.y) / blob.sy;
  const double pz = (o.z - blob.z) / blob.sz;
  const double qx = d.x / blob.sx, qy = d.y / blob.sy, qz = d.z / blob.sz;
  const double a = qx * qx + qy * qy + qz * qz;
  const double b = 2.0 * (px * qx + py * qy + pz * qz);
  const double c = px * px + py * py + pz * pz - 1.0;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0 || a < 1e-15) return hit;
  const double sq = std::sqrt(disc);
  const double t = (-b - sq) / (2.0 * a);
  if (t <= 1e-9) return hit;
  hit.t = t;
  hit.valid = true;
  return hit;
}

/// Angular difference wrapped to [-pi, pi].
inline double angle_diff(double a, double b) {
  double d = std::fmod(a - b + kPi, kTwoPi);
  if (d < 0.0) d += kTwoPi;
  return d - kPi;
}

// One world object flattened for per-frame culling.
struct CullEntry {
  enum Kind { kPole, kWall, kBlob } kind;
  int index;
};

}  // namespace detail

/// Simulate one traversal over a world. Each pose yields one frame of
/// ray-sampled surface points (sensor frame) with Gaussian range noise;
/// returns beyond max_range are dropped, so frames may be empty.
inline Session simulate_traverse(const World& world, const std::vector<Pose>& trajectory,
                                 const SynthConfig& cfg, const std::string& session_id = "synth") {
  validate(cfg);
  if (trajectory.empty()) throw ConfigError("simulate_traverse: trajectory is empty");

  Session session;
  session.session_id = session_id;
  session.ground_truth.emplace();
  for (const PoleSpec& pole : world.poles) {
    (*session.ground_truth)[pole.id] = {pole.x, pole.y};
  }

  Rng rng(derive_seed(cfg.rng_seed, "synth.noise." + session_id));

  const int num_az = std::max(1, static_cast<int>(std::llround(360.0 / cfg.angular_resolution_deg)));
  const double az_step = kTwoPi / num_az;
  std::vector<double> ring_elev(cfg.num_rings);
  for (int j = 0; j < cfg.num_rings; ++j) {
    const double lo = cfg.elev_min_deg * kPi / 180.0;
    const double hi = cfg.elev_max_deg * kPi / 180.0;
    ring_elev[j] = cfg.num_rings == 1 ? 0.5 * (lo + hi)
                                      : lo + (hi - lo) * j / (cfg.num_rings - 1);
  }

  std::vector<std::vector<detail::CullEntry>> buckets(num_az);
  session.frames.reserve(trajectory.size());

  for (std::size_t fi = 0; fi < trajectory.size(); ++fi) {
    const Pose& pose = trajectory[fi];
    LidarFrame frame;
    frame.frame_id = static_cast<std::int64_t>(fi);
    frame.timestamp = 0.1 * static_cast<double>(fi);
    frame.sensor_pose = pose;
    frame.sensor_pose.yaw = normalize_yaw(pose.yaw);

    // Azimuth-bucket culling: each world object registers on the sensor-frame
    // azimuth interval it can subtend from this pose, so a ray only tests
    // the handful of objects in its own bucket.
    for (auto& bucket : buckets) bucket.clear();
    const Point3 origin{pose.x, pose.y, pose.z};
    auto register_object = [&](detail::CullEntry entry, double cx, double cy, double extent) {
      const double dist = std::hypot(cx - pose.x, cy - pose.y);
      if (dist - extent > cfg.max_range) return;
      double half_width;
      if (dist <= extent + 1e-9) {
        half_width = kPi;  // sensor inside or touching: all azimuths
      } else {
        half_width = std::asin(std::min(1.0, extent / dist)) + 2.0 * az_step;
      }
      // Bucket indices live in the sensor frame, like the rays below.
      double center = std::atan2(cy - pose.y, cx - pose.x) - frame.sensor_pose.yaw;
      center = std::fmod(center, kTwoPi);
      if (center < 0.0) center += kTwoPi;
      const int span = std::min(num_az, static_cast<int>(std::ceil(half_width / az_step)) + 1);
      const int center_idx = static_cast<int>(std::floor(center / az_step));
      for (int k = -span; k <= span; ++k) {
        const int idx = ((center_idx + k) % num_az + num_az) % num_az;
        buckets[idx].push_back(entry);
      }
    };
    for (int i = 0; i < static_cast<int>(world.poles.size()); ++i) {
      const PoleSpec& p = world.poles[i];
      register_object({detail::CullEntry::kPole, i}, p.x, p.y, p.radius);
    }
    for (int i = 0; i < static_cast<int>(world.walls.size()); ++i) {
      const WallSpec& w = world.walls[i];
      const double cx = 0.5 * (w.x1 + w.x2), cy = 0.5 * (w.y1 + w.y2);
      const double extent = 0.5 * std::hypot(w.x2 - w.x1, w.y2 - w.y1);
      register_object({detail::CullEntry::kWall, i}, cx, cy, extent);
    }
    for (int i = 0; i < static_cast<int>(world.blobs.size()); ++i) {
      const BlobSpec& b = world.blobs[i];
      register_object({detail::CullEntry::kBlob, i}, b.x, b.y, std::max(b.sx, b.sy));
    }

    for (int ai = 0; ai < num_az; ++ai) {
      if (buckets[ai].empty()) {
        continue;
      }
      const double az_sensor = ai * az_step;
      const double az_world = frame.sensor_pose.yaw + az_sensor;
      for (const double elev : ring_elev) {
        const double ce = std::cos(elev);
        const Point3 dir{ce * std::cos(az_world), ce * std::sin(az_world), std::sin(elev)};
        double best_t = std::numeric_limits<double>::infinity();
        for (const detail::CullEntry& entry : buckets[ai]) {
          detail::RayHit hit;
          switch (entry.kind) {
            case detail::CullEntry::kPole:
              hit = detail::ray_cylinder(origin, dir, world.poles[entry.index]);
              break;
            case detail::CullEntry::kWall:
              hit = detail::ray_wall(origin, dir, world.walls[entry.index]);
              break;
            case detail::CullEntry::kBlob:
              hit = detail::ray_blob(origin, dir, world.blobs[entry.index]);
              break;
          }
          if (hit.valid && hit.t < best_t) best_t = hit.t;
        }
        if (!std::isfinite(best_t) || best_t > cfg.max_range) continue;
        const double t_noisy = best_t + (cfg.noise_sigma > 0.0 ? rng.normal(0.0, cfg.noise_sigma) : 0.0);
        if (t_noisy <= 1e-6 || t_noisy > cfg.max_range) continue;
        const double ca = std::cos(az_sensor), sa = std::sin(az_sensor);
        frame.points.push_back({t_noisy * ce * ca, t_noisy * ce * sa, t_noisy * std::sin(elev)});
      }
    }
    session.frames.push_back(std::move(frame));
  }
  return session;
}

/// Smooth seeded loop through the interior of the area: an ellipse with a
/// low-order radial wobble. Distinct (seed, inset, phase, direction) give
/// distinct traversals over the same world.
inline std::vector<Pose> make_loop_trajectory(const SynthConfig& cfg, int num_frames,
                                              double inset, bool clockwise, double start_phase,
                                              double sensor_z, std::uint64_t seed) {
  if (num_frames < 1) throw ConfigError("trajectory needs at least 1 frame");
  Rng rng(derive_seed(seed, "synth.trajectory"));
  double c[3], s[3];
  for (int k = 0; k < 3; ++k) {
    c[k] = rng.uniform(-1.0, 1.0);
    s[k] = rng.uniform(-1.0, 1.0);
  }
  const double cx = 0.5 * cfg.area_x, cy = 0.5 * cfg.area_y;
  const double a = std::max(1.0, 0.5 * cfg.area_x - inset);
  const double b = std::max(1.0, 0.5 * cfg.area_y - inset);
  const double dir = clockwise ? -1.0 : 1.0;

  auto position = [&](double t) {
    const double u = dir * kTwoPi * t + start_phase;
    double rho = 1.0;
    for (int k = 0; k < 3; ++k) {
      rho += 0.06 * (c[k] * std::cos((k + 1) * u) + s[k] * std::sin((k + 1) * u));
    }
    return std::array<double, 2>{cx + rho * a * std::cos(u), cy + rho * b * std::sin(u)};
  };

  std::vector<Pose> poses(num_frames);
  for (int i = 0; i < num_frames; ++i) {
    const double t = static_cast<double>(i) / num_frames;
    const auto p = position(t);
    const auto q = position(t + 0.25 / num_frames);  // forward difference for heading
    Pose pose;
    pose.x = p[0];
    pose.y = p[1];
    pose.z = sensor_z;
    pose.yaw = normalize_yaw(std::atan2(q[1] - p[1], q[0] - p[0]));
    poses[i] = pose;
  }
  return poses;
}

}  // namespace spl
