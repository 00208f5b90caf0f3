#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "spl/geometry.hpp"
#include "spl/session_io.hpp"
#include "spl/synth.hpp"

namespace {

using namespace spl;

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

bool sessions_equal(const Session& a, const Session& b) {
  if (a.session_id != b.session_id || a.frames.size() != b.frames.size()) return false;
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    const LidarFrame& fa = a.frames[i];
    const LidarFrame& fb = b.frames[i];
    if (fa.frame_id != fb.frame_id || fa.timestamp != fb.timestamp) return false;
    if (fa.sensor_pose.x != fb.sensor_pose.x || fa.sensor_pose.y != fb.sensor_pose.y ||
        fa.sensor_pose.z != fb.sensor_pose.z || fa.sensor_pose.yaw != fb.sensor_pose.yaw) {
      return false;
    }
    if (fa.points.size() != fb.points.size()) return false;
    for (std::size_t j = 0; j < fa.points.size(); ++j) {
      if (fa.points[j].x != fb.points[j].x || fa.points[j].y != fb.points[j].y ||
          fa.points[j].z != fb.points[j].z) {
        return false;
      }
    }
  }
  return true;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

int count_points_near(const LidarFrame& frame, double px, double py, double radius) {
  int n = 0;
  for (const Point3& p : frame.points) {
    const Point3 w = sensor_to_world(frame.sensor_pose, p);
    if (std::hypot(w.x - px, w.y - py) <= radius) ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("yaw normalization lands in (-pi, pi]") {
  CHECK(normalize_yaw(kPi) == Catch::Approx(kPi));
  CHECK(normalize_yaw(-kPi) == Catch::Approx(kPi));
  CHECK(normalize_yaw(3.0 * kPi / 2.0) == Catch::Approx(-kPi / 2.0));
  CHECK(normalize_yaw(0.0) == 0.0);
  for (double yaw : {-11.7, -3.2, 2.9, 7.0, 123.456}) {
    const double n = normalize_yaw(yaw);
    CHECK(n > -kPi);
    CHECK(n <= kPi);
    CHECK(std::abs(std::remainder(n - yaw, kTwoPi)) < 1e-9);
  }
}

TEST_CASE("generate_world places exactly the requested poles") {
  SynthConfig cfg;
  cfg.num_poles = 1;
  cfg.clutter_density = 0.0;
  cfg.area_x = cfg.area_y = 30.0;
  cfg.rng_seed = 7;
  const World world = generate_world(cfg);
  REQUIRE(world.poles.size() == 1);
  CHECK(world.walls.empty());
  CHECK(world.blobs.empty());
}

TEST_CASE("generate_world is deterministic for a fixed seed") {
  SynthConfig cfg;
  cfg.num_poles = 12;
  cfg.area_x = cfg.area_y = 80.0;
  cfg.rng_seed = 7;
  const World a = generate_world(cfg);
  const World b = generate_world(cfg);
  REQUIRE(a.poles.size() == b.poles.size());
  for (std::size_t i = 0; i < a.poles.size(); ++i) {
    CHECK(a.poles[i].x == b.poles[i].x);
    CHECK(a.poles[i].y == b.poles[i].y);
    CHECK(a.poles[i].radius == b.poles[i].radius);
    CHECK(a.poles[i].height == b.poles[i].height);
  }
}

TEST_CASE("50 poles in 200x200 keep >= 1 m pairwise separation") {
  SynthConfig cfg;
  cfg.num_poles = 50;
  cfg.area_x = cfg.area_y = 200.0;
  cfg.rng_seed = 1;
  const World world = generate_world(cfg);
  REQUIRE(world.poles.size() == 50);
  double min_sep = 1e9;
  for (std::size_t i = 0; i < world.poles.size(); ++i) {
    for (std::size_t j = i + 1; j < world.poles.size(); ++j) {
      min_sep = std::min(min_sep, std::hypot(world.poles[i].x - world.poles[j].x,
                                             world.poles[i].y - world.poles[j].y));
    }
  }
  CHECK(min_sep >= 1.0);
}

TEST_CASE("impossible pole placement raises a placement error naming the constraint") {
  SynthConfig cfg;
  cfg.num_poles = 500;
  cfg.area_x = cfg.area_y = 10.0;
  cfg.rng_seed = 3;
  REQUIRE_THROWS_MATCHES(generate_world(cfg), PlacementError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("1 m pairwise separation")));
}

TEST_CASE("clutter keeps clear of pole footprints") {
  SynthConfig cfg;
  cfg.num_poles = 20;
  cfg.area_x = cfg.area_y = 100.0;
  cfg.clutter_density = 1.5;
  cfg.rng_seed = 11;
  const World world = generate_world(cfg);
  REQUIRE(world.walls.size() + world.blobs.size() > 0);
  for (const PoleSpec& pole : world.poles) {
    for (const WallSpec& wall : world.walls) {
      const double d = spl::detail::point_segment_distance_2d(pole.x, pole.y, wall.x1, wall.y1,
                                                              wall.x2, wall.y2);
      CHECK(d > pole.radius);
    }
    for (const BlobSpec& blob : world.blobs) {
      CHECK(std::hypot(blob.x - pole.x, blob.y - pole.y) >
            std::max(blob.sx, blob.sy) + pole.radius);
    }
  }
}

TEST_CASE("near pole returns more points than an identical far pole") {
  World world;
  world.poles.push_back({0, 2.0, 0.0, 0.15, 5.0});
  world.poles.push_back({1, 0.0, 20.0, 0.15, 5.0});  // different azimuth: no occlusion
  SynthConfig cfg;
  cfg.noise_sigma = 0.0;
  cfg.max_range = 40.0;
  const std::vector<Pose> traj{{0.0, 0.0, 1.5, 0.0}};
  const Session session = simulate_traverse(world, traj, cfg, "nearfar");
  const int near = count_points_near(session.frames[0], 2.0, 0.0, 0.5);
  const int far = count_points_near(session.frames[0], 0.0, 20.0, 0.5);
  CHECK(near > far);
  CHECK(far > 0);
}

TEST_CASE("pose beyond max_range of everything yields an empty frame") {
  World world;
  world.poles.push_back({0, 0.0, 0.0, 0.15, 5.0});
  SynthConfig cfg;
  cfg.max_range = 10.0;
  const std::vector<Pose> traj{{500.0, 500.0, 1.5, 0.0}};
  const Session session = simulate_traverse(world, traj, cfg, "faraway");
  REQUIRE(session.frames.size() == 1);
  CHECK(session.frames[0].points.empty());
}

TEST_CASE("azimuthal hit count matches the beam-coverage prediction") {
  // Single horizontal ring, no noise: the number of azimuth steps hitting a
  // cylinder of radius r at distance d is the subtended angle over the step.
  World world;
  world.poles.push_back({0, 8.0, 0.0, 0.15, 4.0});
  SynthConfig cfg;
  cfg.angular_resolution_deg = 0.4;
  cfg.noise_sigma = 0.0;
  cfg.num_rings = 1;
  cfg.elev_min_deg = cfg.elev_max_deg = 0.0;
  cfg.max_range = 20.0;
  const std::vector<Pose> traj{{0.0, 0.0, 1.5, 0.0}};
  const Session session = simulate_traverse(world, traj, cfg, "coverage");
  const double step_rad = cfg.angular_resolution_deg * kPi / 180.0;
  const double predicted = 2.0 * std::atan(0.15 / 8.0) / step_rad;
  const double actual = static_cast<double>(session.frames[0].points.size());
  CHECK(std::abs(actual - predicted) <= 2.0);
}

TEST_CASE("per-pole point count is non-increasing in range over many frames") {
  World world;
  world.poles.push_back({0, 0.0, 0.0, 0.15, 5.0});
  SynthConfig cfg;
  cfg.noise_sigma = 0.0;
  cfg.max_range = 60.0;
  std::vector<Pose> traj;
  const int num_frames = 120;
  for (int i = 0; i < num_frames; ++i) {
    traj.push_back({4.0 + 0.3 * i, 0.0, 1.5, 0.0});
  }
  const Session session = simulate_traverse(world, traj, cfg, "sparsity");
  REQUIRE(session.frames.size() == static_cast<std::size_t>(num_frames));
  // Bucket by range (20 frames each) and require the mean count to fall.
  std::vector<double> bucket_means;
  for (int b = 0; b < num_frames / 20; ++b) {
    double sum = 0.0;
    for (int i = 0; i < 20; ++i) {
      sum += count_points_near(session.frames[b * 20 + i], 0.0, 0.0, 0.5);
    }
    bucket_means.push_back(sum / 20.0);
  }
  for (std::size_t b = 1; b < bucket_means.size(); ++b) {
    CHECK(bucket_means[b] <= bucket_means[b - 1] + 0.5);
  }
  CHECK(bucket_means.front() > bucket_means.back());
}

TEST_CASE("simulate_traverse is deterministic and keeps frame ids strictly increasing") {
  SynthConfig cfg;
  cfg.num_poles = 6;
  cfg.area_x = cfg.area_y = 50.0;
  cfg.rng_seed = 9;
  const World world = generate_world(cfg);
  const auto traj = make_loop_trajectory(cfg, 25, 12.0, false, 0.0, 1.5, 4);
  const Session a = simulate_traverse(world, traj, cfg, "det");
  const Session b = simulate_traverse(world, traj, cfg, "det");
  CHECK(sessions_equal(a, b));
  for (std::size_t i = 1; i < a.frames.size(); ++i) {
    CHECK(a.frames[i].frame_id > a.frames[i - 1].frame_id);
  }
  REQUIRE_NOTHROW(validate_session(a));
}

TEST_CASE("session round-trips bit-exactly through both formats") {
  SynthConfig cfg;
  cfg.num_poles = 4;
  cfg.area_x = cfg.area_y = 40.0;
  cfg.rng_seed = 21;
  const World world = generate_world(cfg);
  const auto traj = make_loop_trajectory(cfg, 3, 10.0, false, 0.3, 1.5, 6);
  Session session = simulate_traverse(world, traj, cfg, "roundtrip");
  REQUIRE(session.frames.size() == 3);

  const std::string text_path = temp_path("spl_rt.spls");
  const std::string bin_path = temp_path("spl_rt.splsb");
  write_session(session, text_path, SessionFormat::kText);
  write_session(session, bin_path, SessionFormat::kBinary);
  Session from_text = read_session(text_path);
  Session from_bin = read_session(bin_path);
  session.ground_truth.reset();  // ground truth is not part of the file format
  CHECK(sessions_equal(session, from_text));
  CHECK(sessions_equal(session, from_bin));
}

TEST_CASE("bulk 10k-frame session survives a binary round trip byte-for-byte") {
  Session session;
  session.session_id = "bulk";
  Rng rng(5);
  session.frames.reserve(10000);
  for (int i = 0; i < 10000; ++i) {
    LidarFrame frame;
    frame.frame_id = i;
    frame.timestamp = 0.1 * i;
    frame.sensor_pose = {rng.uniform(-50, 50), rng.uniform(-50, 50), 1.5,
                         normalize_yaw(rng.uniform(-4, 4))};
    const int n = static_cast<int>(rng.uniform_int(4));
    for (int j = 0; j < n; ++j) {
      frame.points.push_back({rng.normal(0, 10), rng.normal(0, 10), rng.uniform(0, 6)});
    }
    session.frames.push_back(std::move(frame));
  }
  const std::string p1 = temp_path("spl_bulk1.splsb");
  const std::string p2 = temp_path("spl_bulk2.splsb");
  write_session(session, p1, SessionFormat::kBinary);
  Session reread = read_session(p1);
  write_session(reread, p2, SessionFormat::kBinary);
  CHECK(read_file(p1) == read_file(p2));
  CHECK(sessions_equal(session, reread));
}

TEST_CASE("non-monotone frame ids are rejected naming the offending frame") {
  const std::string path = temp_path("spl_badorder.spls");
  std::ofstream out(path);
  out << "SPLS 1 bad 3\n"
      << "F 1 0.0 0 0 0 0 0\n"
      << "F 3 0.1 0 0 0 0 0\n"
      << "F 2 0.2 0 0 0 0 0\n";
  out.close();
  REQUIRE_THROWS_MATCHES(read_session(path), FormatError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("frame_id 2")));
}

TEST_CASE("NaN coordinates are rejected with a line number") {
  const std::string path = temp_path("spl_nan.spls");
  std::ofstream out(path);
  out << "SPLS 1 bad 1\n"
      << "F 1 0.0 0 0 0 0 2\n"
      << "1.0 2.0 3.0\n"
      << "nan 2.0 3.0\n";
  out.close();
  REQUIRE_THROWS_MATCHES(
      read_session(path), FormatError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("line 4")));
}

TEST_CASE("malformed headers are rejected") {
  const std::string path = temp_path("spl_badheader.spls");
  {
    std::ofstream out(path);
    out << "SPLX 1 bad 1\n";
  }
  CHECK_THROWS_AS(read_session(path), FormatError);
  {
    std::ofstream out(path);
    out << "SPLS 2 bad 1\n";
  }
  CHECK_THROWS_AS(read_session(path), FormatError);
  {
    std::ofstream out(path);
    out << "SPLS 1 bad\n";
  }
  CHECK_THROWS_AS(read_session(path), FormatError);
}

TEST_CASE("truncated binary payload reports a byte offset") {
  Session session;
  session.session_id = "trunc";
  LidarFrame frame;
  frame.frame_id = 1;
  frame.points = {{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}};
  session.frames.push_back(frame);
  const std::string path = temp_path("spl_trunc.splsb");
  write_session(session, path, SessionFormat::kBinary);
  std::string data = read_file(path);
  std::ofstream out(path, std::ios::binary);
  out.write(data.data(), static_cast<std::streamsize>(data.size() - 10));
  out.close();
  REQUIRE_THROWS_MATCHES(
      read_session(path), FormatError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("offset")));
}
