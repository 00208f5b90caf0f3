#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spl/errors.hpp"

namespace spl {

inline constexpr double kPi = 3.141592653589793238462643383279502884;
inline constexpr double kTwoPi = 2.0 * kPi;

/// A 3D point in meters. Sensor or world frame depending on context.
struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
  }
};

/// Normalize an angle to (-pi, pi].
inline double normalize_yaw(double yaw) {
  double y = std::fmod(yaw + kPi, kTwoPi);
  if (y <= 0.0) y += kTwoPi;
  return y - kPi;
}

/// Sensor pose in the world frame: position plus heading about +z.
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double yaw = 0.0;  // radians, (-pi, pi]

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z) && std::isfinite(yaw);
  }
};

inline Point3 sensor_to_world(const Pose& pose, const Point3& p) {
  const double c = std::cos(pose.yaw);
  const double s = std::sin(pose.yaw);
  return {pose.x + c * p.x - s * p.y, pose.y + s * p.x + c * p.y, pose.z + p.z};
}

inline Point3 world_to_sensor(const Pose& pose, const Point3& p) {
  const double c = std::cos(pose.yaw);
  const double s = std::sin(pose.yaw);
  const double dx = p.x - pose.x;
  const double dy = p.y - pose.y;
  return {c * dx + s * dy, -s * dx + c * dy, p.z - pose.z};
}

/// One timestamped 360-degree scan. Points are in the sensor frame.
struct LidarFrame {
  std::int64_t frame_id = 0;
  double timestamp = 0.0;  // seconds
  Pose sensor_pose;
  std::vector<Point3> points;
};

/// A full traversal: ordered frames plus, for synthetic worlds, the true
/// pole positions keyed by pole id.
struct Session {
  std::string session_id;
  std::vector<LidarFrame> frames;
  std::optional<std::map<std::int64_t, std::array<double, 2>>> ground_truth;
};

/// Enforces the session invariants shared by every construction path:
/// at least one frame, strictly increasing frame ids, finite poses and
/// coordinates, ground-truth poles pairwise >= 1 m apart.
inline void validate_session(const Session& session) {
  if (session.frames.empty()) {
    throw FormatError("session '" + session.session_id + "' has no frames");
  }
  std::int64_t prev = session.frames.front().frame_id - 1;
  for (const LidarFrame& frame : session.frames) {
    if (frame.frame_id <= prev) {
      throw FormatError("session '" + session.session_id + "': frame_id " +
                        std::to_string(frame.frame_id) + " is not strictly increasing");
    }
    prev = frame.frame_id;
    if (!frame.sensor_pose.finite()) {
      throw FormatError("frame " + std::to_string(frame.frame_id) + ": non-finite sensor pose");
    }
    for (const Point3& p : frame.points) {
      if (!p.finite()) {
        throw FormatError("frame " + std::to_string(frame.frame_id) + ": non-finite point coordinates");
      }
    }
  }
  if (session.ground_truth) {
    const auto& gt = *session.ground_truth;
    for (auto a = gt.begin(); a != gt.end(); ++a) {
      for (auto b = std::next(a); b != gt.end(); ++b) {
        const double d = std::hypot(a->second[0] - b->second[0], a->second[1] - b->second[1]);
        if (d < 1.0) {
          throw FormatError("ground-truth poles " + std::to_string(a->first) + " and " +
                            std::to_string(b->first) + " are closer than 1 m");
        }
      }
    }
  }
}

}  // namespace spl
