#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "spl/errors.hpp"
#include "spl/geometry.hpp"
#include "spl/pole_detect.hpp"

namespace spl {

/// Pole-Image projection grid. Rows bin the pole-centric radius r over
/// [0, r_max]; columns bin the azimuth theta over [0, 2*pi); z acts as a
/// band-pass filter only. Bins are half-open with floor indexing and
/// clamping at the top edge, which makes integer-column rotations exact
/// column shifts.
struct ProjectionConfig {
  int num_rows = 80;
  int num_cols = 360;
  double r_max = 10.0;
  double z_min = -1.0;
  double z_max = 7.0;
  enum class ValueMode { kOccupancyCount } value_mode = ValueMode::kOccupancyCount;
};

inline void validate(const ProjectionConfig& cfg) {
  if (cfg.num_rows < 1 || cfg.num_cols < 1) throw ConfigError("projection: grid must be >= 1x1");
  if (cfg.r_max <= 0.0) throw ConfigError("projection: r_max must be > 0");
  if (cfg.z_max <= cfg.z_min) throw ConfigError("projection: z_max must be > z_min");
}

/// The canonical grayscale signature of one pole observation. Pixel values
/// are per-bin occupancy counts normalized by the image maximum, so every
/// non-empty image peaks at exactly 1.0.
struct PoleImage {
  std::vector<double> pixels;  // row-major, num_rows x num_cols, in [0, 1]
  int num_rows = 0;
  int num_cols = 0;
  std::optional<std::int64_t> track_id;
  double range = 0.0;
  std::int64_t pole_point_count = 0;

  double at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * num_cols + col]; }
  double& at(int row, int col) { return pixels[static_cast<std::size_t>(row) * num_cols + col]; }
};

/// Pole-centric cylindrical coordinates of one point.
struct CylindricalPoint {
  double r = 0.0;      // horizontal distance to the pole centroid
  double theta = 0.0;  // [0, 2*pi), counterclockwise from world +x
  double z = 0.0;      // unchanged world z
};

/// Transform world-frame points into the pole-centric cylindrical system.
/// A point exactly at the centroid maps to (r=0, theta=0).
inline std::vector<CylindricalPoint> to_cylindrical(const std::vector<Point3>& points,
                                                    double centroid_x, double centroid_y) {
  if (!std::isfinite(centroid_x) || !std::isfinite(centroid_y)) {
    throw ConfigError("to_cylindrical: centroid must be finite");
  }
  std::vector<CylindricalPoint> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double dx = points[i].x - centroid_x;
    const double dy = points[i].y - centroid_y;
    CylindricalPoint c;
    c.r = std::hypot(dx, dy);
    if (c.r == 0.0) {
      c.theta = 0.0;
    } else {
      c.theta = std::atan2(dy, dx);
      if (c.theta < 0.0) c.theta += kTwoPi;
      if (c.theta >= kTwoPi) c.theta = 0.0;  // atan2 rounding at the seam
    }
    c.z = points[i].z;
    out[i] = c;
  }
  return out;
}

/// Project cylindrical points onto the occupancy grid. Points with
/// r > r_max or z outside [z_min, z_max] are dropped.
inline PoleImage rasterize(const std::vector<CylindricalPoint>& points,
                           const ProjectionConfig& cfg = {}) {
  validate(cfg);
  PoleImage image;
  image.num_rows = cfg.num_rows;
  image.num_cols = cfg.num_cols;
  image.pixels.assign(static_cast<std::size_t>(cfg.num_rows) * cfg.num_cols, 0.0);

  std::vector<std::int64_t> counts(image.pixels.size(), 0);
  std::int64_t max_count = 0;
  for (const CylindricalPoint& p : points) {
    if (p.r > cfg.r_max || p.z < cfg.z_min || p.z > cfg.z_max) continue;
    int row = static_cast<int>(std::floor(cfg.num_rows * p.r / cfg.r_max));
    int col = static_cast<int>(std::floor(cfg.num_cols * p.theta / kTwoPi));
    row = std::min(row, cfg.num_rows - 1);
    col = std::min(col, cfg.num_cols - 1);
    const std::int64_t c = ++counts[static_cast<std::size_t>(row) * cfg.num_cols + col];
    max_count = std::max(max_count, c);
  }
  if (max_count > 0) {
    for (std::size_t i = 0; i < counts.size(); ++i) {
      image.pixels[i] = static_cast<double>(counts[i]) / static_cast<double>(max_count);
    }
  }
  return image;
}

/// The local 3D context of a detection: every frame point (not only pole
/// points) within horizontal radius r_max of the centroid, in world frame.
inline std::vector<Point3> neighborhood_of(const PoleDetection& detection, const LidarFrame& frame,
                                           const ProjectionConfig& cfg = {}) {
  validate(cfg);
  std::vector<Point3> out;
  for (const Point3& p : frame.points) {
    const Point3 w = sensor_to_world(frame.sensor_pose, p);
    if (std::hypot(w.x - detection.centroid_x, w.y - detection.centroid_y) <= cfg.r_max) {
      out.push_back(w);
    }
  }
  return out;
}

/// Full signature for one detection inside its frame, with retrieval
/// metadata attached.
inline PoleImage make_pole_image(const PoleDetection& detection, const LidarFrame& frame,
                                 const ProjectionConfig& cfg = {},
                                 std::optional<std::int64_t> track_id = std::nullopt) {
  const std::vector<Point3> neighborhood = neighborhood_of(detection, frame, cfg);
  const std::vector<CylindricalPoint> cyl =
      to_cylindrical(neighborhood, detection.centroid_x, detection.centroid_y);
  PoleImage image = rasterize(cyl, cfg);
  image.track_id = track_id;
  image.range = detection.range;
  image.pole_point_count = detection.point_count;
  return image;
}

/// Binary PGM (P5) dump, maxval 255, value = round(255 * pixel).
inline void write_pgm(const PoleImage& image, const std::string& path) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path + "' for writing");
  file << "P5\n" << image.num_cols << " " << image.num_rows << "\n255\n";
  std::string bytes;
  bytes.reserve(image.pixels.size());
  for (const double v : image.pixels) {
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::llround(255.0 * v))));
  }
  file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!file) throw IoError("write failed for '" + path + "'");
}

/// Reads a P5 PGM back into pixel intensities in [0, 1].
inline PoleImage read_pgm(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path + "' for reading");
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  file >> magic >> width >> height >> maxval;
  if (magic != "P5" || width < 1 || height < 1 || maxval != 255) {
    throw FormatError("'" + path + "' is not a maxval-255 P5 PGM");
  }
  file.get();  // single whitespace after maxval
  std::vector<char> bytes(static_cast<std::size_t>(width) * height);
  file.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (file.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw FormatError("'" + path + "': truncated pixel data");
  }
  PoleImage image;
  image.num_rows = height;
  image.num_cols = width;
  image.pixels.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    image.pixels[i] = static_cast<double>(static_cast<unsigned char>(bytes[i])) / 255.0;
  }
  return image;
}

}  // namespace spl
