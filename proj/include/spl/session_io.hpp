#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "spl/errors.hpp"
#include "spl/geometry.hpp"

namespace spl {

/// Session file format "SPLS v1".
///
/// Text variant:
///   SPLS 1 <session_id> <num_frames>
///   F <frame_id> <timestamp> <px> <py> <pz> <yaw> <num_points>
///   <x> <y> <z>                                   (num_points lines)
///
/// Binary variant ("SPLSB 1 ..." header line, then per frame a one-byte 'F'
/// tag followed by the same fields in the same order as little-endian
/// 64-bit floats). Coordinates round-trip bit-exactly in both variants;
/// the text writer emits 17 significant digits.
enum class SessionFormat { kText, kBinary };

namespace detail {

inline void write_f64_le(std::string& out, double v) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double read_f64_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  return std::bit_cast<double>(bits);
}

inline void append_double_text(std::string& out, double v) {
  char buf[40];
  const int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  out.append(buf, static_cast<std::size_t>(n));
}

struct TextCursor {
  std::string_view data;
  std::size_t pos = 0;
  std::size_t line = 1;

  bool eof() const { return pos >= data.size(); }

  std::string_view next_line() {
    const std::size_t start = pos;
    while (pos < data.size() && data[pos] != '\n') ++pos;
    std::string_view result = data.substr(start, pos - start);
    if (pos < data.size()) ++pos;  // skip '\n'
    ++line;
    return result;
  }
};

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) tokens.push_back(line.substr(start, i - start));
  }
  return tokens;
}

inline double parse_double(std::string_view token, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc{} || ptr != token.data() + token.size()) {
    throw FormatError("line " + std::to_string(line) + ": expected a number, got '" +
                      std::string(token) + "'");
  }
  return v;
}

inline std::int64_t parse_i64(std::string_view token, std::size_t line) {
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc{} || ptr != token.data() + token.size()) {
    throw FormatError("line " + std::to_string(line) + ": expected an integer, got '" +
                      std::string(token) + "'");
  }
  return v;
}

}  // namespace detail

inline void write_session(const Session& session, const std::string& path,
                          SessionFormat format = SessionFormat::kText) {
  validate_session(session);
  if (session.session_id.empty() ||
      session.session_id.find_first_of(" \t\r\n") != std::string::npos) {
    throw FormatError("session_id must be a non-empty whitespace-free token");
  }

  std::string out;
  out.reserve(1 << 20);
  const char* magic = format == SessionFormat::kText ? "SPLS" : "SPLSB";
  out += magic;
  out += " 1 ";
  out += session.session_id;
  out += ' ';
  out += std::to_string(session.frames.size());
  out += '\n';

  for (const LidarFrame& frame : session.frames) {
    if (format == SessionFormat::kText) {
      out += "F ";
      out += std::to_string(frame.frame_id);
      out += ' ';
      detail::append_double_text(out, frame.timestamp);
      out += ' ';
      detail::append_double_text(out, frame.sensor_pose.x);
      out += ' ';
      detail::append_double_text(out, frame.sensor_pose.y);
      out += ' ';
      detail::append_double_text(out, frame.sensor_pose.z);
      out += ' ';
      detail::append_double_text(out, frame.sensor_pose.yaw);
      out += ' ';
      out += std::to_string(frame.points.size());
      out += '\n';
      for (const Point3& p : frame.points) {
        detail::append_double_text(out, p.x);
        out += ' ';
        detail::append_double_text(out, p.y);
        out += ' ';
        detail::append_double_text(out, p.z);
        out += '\n';
      }
    } else {
      out.push_back('F');
      detail::write_f64_le(out, static_cast<double>(frame.frame_id));
      detail::write_f64_le(out, frame.timestamp);
      detail::write_f64_le(out, frame.sensor_pose.x);
      detail::write_f64_le(out, frame.sensor_pose.y);
      detail::write_f64_le(out, frame.sensor_pose.z);
      detail::write_f64_le(out, frame.sensor_pose.yaw);
      detail::write_f64_le(out, static_cast<double>(frame.points.size()));
      for (const Point3& p : frame.points) {
        detail::write_f64_le(out, p.x);
        detail::write_f64_le(out, p.y);
        detail::write_f64_le(out, p.z);
      }
    }
  }

  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path + "' for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("write failed for '" + path + "'");
}

namespace detail {

inline Session read_session_text(std::string_view data) {
  TextCursor cur{data};
  const std::size_t header_line = cur.line;
  const auto header = split_ws(cur.next_line());
  if (header.size() != 4 || header[0] != "SPLS" || header[1] != "1") {
    throw FormatError("line " + std::to_string(header_line) +
                      ": malformed header, expected 'SPLS 1 <session_id> <num_frames>'");
  }
  Session session;
  session.session_id = std::string(header[2]);
  const std::int64_t num_frames = parse_i64(header[3], header_line);
  if (num_frames < 1) {
    throw FormatError("line " + std::to_string(header_line) + ": num_frames must be >= 1");
  }
  session.frames.reserve(static_cast<std::size_t>(num_frames));

  std::int64_t prev_id = 0;
  bool have_prev = false;
  for (std::int64_t fi = 0; fi < num_frames; ++fi) {
    if (cur.eof()) {
      throw FormatError("line " + std::to_string(cur.line) + ": expected frame record " +
                        std::to_string(fi) + " of " + std::to_string(num_frames));
    }
    const std::size_t frame_line = cur.line;
    const auto tokens = split_ws(cur.next_line());
    if (tokens.size() != 8 || tokens[0] != "F") {
      throw FormatError("line " + std::to_string(frame_line) +
                        ": malformed frame record, expected "
                        "'F <frame_id> <timestamp> <px> <py> <pz> <yaw> <num_points>'");
    }
    LidarFrame frame;
    frame.frame_id = parse_i64(tokens[1], frame_line);
    if (have_prev && frame.frame_id <= prev_id) {
      throw FormatError("line " + std::to_string(frame_line) + ": frame_id " +
                        std::to_string(frame.frame_id) + " is not strictly increasing");
    }
    prev_id = frame.frame_id;
    have_prev = true;
    frame.timestamp = parse_double(tokens[2], frame_line);
    frame.sensor_pose.x = parse_double(tokens[3], frame_line);
    frame.sensor_pose.y = parse_double(tokens[4], frame_line);
    frame.sensor_pose.z = parse_double(tokens[5], frame_line);
    frame.sensor_pose.yaw = parse_double(tokens[6], frame_line);
    if (!frame.sensor_pose.finite()) {
      throw FormatError("line " + std::to_string(frame_line) + ": non-finite pose in frame " +
                        std::to_string(frame.frame_id));
    }
    const std::int64_t num_points = parse_i64(tokens[7], frame_line);
    if (num_points < 0) {
      throw FormatError("line " + std::to_string(frame_line) + ": negative point count");
    }
    frame.points.reserve(static_cast<std::size_t>(num_points));
    for (std::int64_t pi = 0; pi < num_points; ++pi) {
      const std::size_t point_line = cur.line;
      if (cur.eof()) {
        throw FormatError("line " + std::to_string(point_line) + ": unexpected end of file inside frame " +
                          std::to_string(frame.frame_id));
      }
      const auto pt = split_ws(cur.next_line());
      if (pt.size() != 3) {
        throw FormatError("line " + std::to_string(point_line) + ": expected '<x> <y> <z>'");
      }
      Point3 p{parse_double(pt[0], point_line), parse_double(pt[1], point_line),
               parse_double(pt[2], point_line)};
      if (!p.finite()) {
        throw FormatError("line " + std::to_string(point_line) + ": non-finite coordinate in frame " +
                          std::to_string(frame.frame_id));
      }
      frame.points.push_back(p);
    }
    session.frames.push_back(std::move(frame));
  }
  return session;
}

inline Session read_session_binary(std::string_view data, std::size_t body_offset,
                                   std::string_view header_line) {
  const auto header = split_ws(header_line);
  if (header.size() != 4 || header[0] != "SPLSB" || header[1] != "1") {
    throw FormatError("offset 0: malformed header, expected 'SPLSB 1 <session_id> <num_frames>'");
  }
  Session session;
  session.session_id = std::string(header[2]);
  const std::int64_t num_frames = parse_i64(header[3], 1);
  if (num_frames < 1) throw FormatError("offset 0: num_frames must be >= 1");
  session.frames.reserve(static_cast<std::size_t>(num_frames));

  std::size_t pos = body_offset;
  auto need = [&](std::size_t n) {
    if (pos + n > data.size()) {
      throw FormatError("offset " + std::to_string(pos) + ": unexpected end of file");
    }
  };
  auto take_f64 = [&]() {
    need(8);
    const double v = read_f64_le(data.data() + pos);
    pos += 8;
    return v;
  };

  std::int64_t prev_id = 0;
  bool have_prev = false;
  for (std::int64_t fi = 0; fi < num_frames; ++fi) {
    const std::size_t record_offset = pos;
    need(1);
    if (data[pos] != 'F') {
      throw FormatError("offset " + std::to_string(pos) + ": expected frame tag 'F'");
    }
    ++pos;
    LidarFrame frame;
    frame.frame_id = static_cast<std::int64_t>(take_f64());
    if (have_prev && frame.frame_id <= prev_id) {
      throw FormatError("offset " + std::to_string(record_offset) + ": frame_id " +
                        std::to_string(frame.frame_id) + " is not strictly increasing");
    }
    prev_id = frame.frame_id;
    have_prev = true;
    frame.timestamp = take_f64();
    frame.sensor_pose.x = take_f64();
    frame.sensor_pose.y = take_f64();
    frame.sensor_pose.z = take_f64();
    frame.sensor_pose.yaw = take_f64();
    if (!frame.sensor_pose.finite()) {
      throw FormatError("offset " + std::to_string(record_offset) + ": non-finite pose in frame " +
                        std::to_string(frame.frame_id));
    }
    const double raw_count = take_f64();
    if (!(raw_count >= 0.0) || raw_count != std::floor(raw_count)) {
      throw FormatError("offset " + std::to_string(record_offset) + ": invalid point count");
    }
    const std::int64_t num_points = static_cast<std::int64_t>(raw_count);
    frame.points.resize(static_cast<std::size_t>(num_points));
    for (std::int64_t pi = 0; pi < num_points; ++pi) {
      const std::size_t point_offset = pos;
      Point3 p{take_f64(), take_f64(), take_f64()};
      if (!p.finite()) {
        throw FormatError("offset " + std::to_string(point_offset) +
                          ": non-finite coordinate in frame " + std::to_string(frame.frame_id));
      }
      frame.points[static_cast<std::size_t>(pi)] = p;
    }
    session.frames.push_back(std::move(frame));
  }
  return session;
}

}  // namespace detail

/// Reads either variant, dispatching on the header magic.
inline Session read_session(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path + "' for reading");
  std::string data((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());

  const std::size_t eol = data.find('\n');
  const std::string_view first_line =
      std::string_view(data).substr(0, eol == std::string::npos ? data.size() : eol);
  if (first_line.rfind("SPLSB", 0) == 0) {
    return detail::read_session_binary(data, eol == std::string::npos ? data.size() : eol + 1,
                                       first_line);
  }
  if (first_line.rfind("SPLS", 0) == 0) {
    return detail::read_session_text(data);
  }
  throw FormatError("line 1: unrecognized magic in '" + path + "', expected SPLS or SPLSB");
}

}  // namespace spl
