#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "spl/encoder.hpp"
#include "spl/errors.hpp"
#include "spl/rng.hpp"

namespace spl {

/// One reference embedding per landmark: a single randomly sampled
/// observation from the landmark's reference-session track.
struct DatabaseEntry {
  std::int64_t landmark_id = 0;
  Embedding embedding;
  std::int64_t frame_id = 0;
  double range = 0.0;
};

/// A sparse test-session observation to identify.
struct Query {
  std::int64_t landmark_id = 0;  // ground truth
  Embedding embedding;
  double range = 0.0;
  std::int64_t pole_point_count = 0;
};

/// Half-open/closed range interval with the label used in reports.
struct RangeBin {
  std::string label;
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  bool lo_inclusive = true;
  bool hi_inclusive = true;

  bool contains(double r) const {
    const bool above = lo_inclusive ? r >= lo : r > lo;
    const bool below = std::isinf(hi) ? true : (hi_inclusive ? r <= hi : r < hi);
    return above && below;
  }
};

/// The bins of the range-binned tables: [0,5], (5,10], (10,inf).
inline std::vector<RangeBin> default_bins() {
  return {{"[0,5]m", 0.0, 5.0, true, true},
          {"(5,10]m", 5.0, 10.0, false, true},
          {"(10,inf)m", 10.0, std::numeric_limits<double>::infinity(), false, false}};
}

/// Build bins from interior edges, e.g. {5, 10} gives the default binning.
inline std::vector<RangeBin> bins_from_edges(const std::vector<double>& edges) {
  if (edges.empty()) {
    return {{"[0,inf)m", 0.0, std::numeric_limits<double>::infinity(), true, false}};
  }
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (edges[i] <= 0.0 || (i > 0 && edges[i] <= edges[i - 1])) {
      throw ConfigError("bins: edges must be positive and strictly increasing");
    }
  }
  std::vector<RangeBin> bins;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "[0,%g]m", edges[0]);
  bins.push_back({buf, 0.0, edges[0], true, true});
  for (std::size_t i = 1; i < edges.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "(%g,%g]m", edges[i - 1], edges[i]);
    bins.push_back({buf, edges[i - 1], edges[i], false, true});
  }
  std::snprintf(buf, sizeof(buf), "(%g,inf)m", edges.back());
  bins.push_back({buf, edges.back(), std::numeric_limits<double>::infinity(), false, false});
  return bins;
}

struct BinReport {
  RangeBin bin;
  std::int64_t query_count = 0;
  std::int64_t hits_at[3] = {0, 0, 0};           // K = 1, 5, 10
  std::map<int, double> recall_at;               // empty when query_count == 0
};

struct RetrievalReport {
  std::string method;
  std::int64_t total_queries = 0;
  std::vector<std::int64_t> ranks;  // per-query 1-based rank of the true landmark
  std::int64_t hits_at[3] = {0, 0, 0};
  std::map<int, double> recall_at;  // K in {1, 5, 10}, percentages
  std::vector<BinReport> bins;
};

inline constexpr int kRecallKs[3] = {1, 5, 10};

/// Exact hundredths of 100*hits/total, rounded half away from zero; this is
/// the one formatting path for every reported percentage.
inline std::int64_t percent_hundredths(std::int64_t hits, std::int64_t total) {
  if (total <= 0) throw IntegrityError("percentage of an empty query set");
  const std::int64_t scaled = 10000 * hits;  // 100 (percent) * 100 (hundredths)
  const std::int64_t q = scaled / total;
  const std::int64_t r = scaled % total;
  return q + (2 * r >= total ? 1 : 0);
}

inline double percent_value(std::int64_t hits, std::int64_t total) {
  return static_cast<double>(percent_hundredths(hits, total)) / 100.0;
}

/// "22.01"-style fixed two-decimal rendering.
inline std::string format_percent(std::int64_t hits, std::int64_t total) {
  const std::int64_t h = percent_hundredths(hits, total);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%lld.%02lld", static_cast<long long>(h / 100),
                static_cast<long long>(h % 100));
  return buf;
}

inline std::string format_percent_value(double percent) {
  const std::int64_t h = std::llround(percent * 100.0);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%lld.%02lld", static_cast<long long>(h / 100),
                static_cast<long long>(h % 100));
  return buf;
}

/// All observations of one landmark in the reference session.
struct LandmarkObservations {
  std::int64_t landmark_id = 0;
  std::vector<PoleImage> images;
  std::vector<std::int64_t> frame_ids;
  std::vector<double> ranges;
};

/// One uniformly sampled instance per landmark, embedded. Deterministic for
/// a fixed seed; landmarks are processed in ascending id order.
inline std::vector<DatabaseEntry> build_database(const std::vector<LandmarkObservations>& tracks,
                                                 const EncoderParams& params, std::uint64_t seed) {
  if (tracks.empty()) throw DatasetError("build_database: no reference tracks");
  std::vector<const LandmarkObservations*> ordered;
  ordered.reserve(tracks.size());
  for (const LandmarkObservations& t : tracks) {
    if (t.images.empty()) {
      throw DatasetError("build_database: landmark " + std::to_string(t.landmark_id) +
                         " has no observations");
    }
    ordered.push_back(&t);
  }
  std::sort(ordered.begin(), ordered.end(),
            [](const LandmarkObservations* a, const LandmarkObservations* b) {
              return a->landmark_id < b->landmark_id;
            });
  Rng rng(seed);
  std::vector<DatabaseEntry> entries;
  entries.reserve(ordered.size());
  for (const LandmarkObservations* t : ordered) {
    const std::size_t pick = rng.uniform_int(t->images.size());
    DatabaseEntry entry;
    entry.landmark_id = t->landmark_id;
    entry.embedding = forward(params, t->images[pick]);
    entry.frame_id = t->frame_ids[pick];
    entry.range = t->ranges[pick];
    entries.push_back(std::move(entry));
  }
  return entries;
}

/// Keep only small-pole observations: pole_point_count strictly below the
/// threshold ("below a threshold" reads as <).
inline std::vector<Query> select_queries(const std::vector<Query>& observations,
                                         std::int64_t max_pole_points = 10) {
  std::vector<Query> out;
  for (const Query& q : observations) {
    if (q.pole_point_count < max_pole_points) out.push_back(q);
  }
  return out;
}

inline double cosine(const Embedding& a, const Embedding& b) {
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot;
}

/// Rank the whole database for one query: descending cosine similarity,
/// ties broken by ascending landmark id. Returns a permutation of all ids.
inline std::vector<std::int64_t> rank(const Query& query,
                                      const std::vector<DatabaseEntry>& database) {
  if (database.empty()) throw DatasetError("rank: database is empty");
  struct Scored {
    double sim;
    std::int64_t id;
  };
  std::vector<Scored> scored;
  scored.reserve(database.size());
  for (const DatabaseEntry& entry : database) {
    scored.push_back({cosine(query.embedding, entry.embedding), entry.landmark_id});
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    return a.id < b.id;
  });
  std::vector<std::int64_t> ids(scored.size());
  for (std::size_t i = 0; i < scored.size(); ++i) ids[i] = scored[i].id;
  return ids;
}

/// Overall and range-binned Recall@{1,5,10}. Every query's true id must
/// exist in the database. Empty bins are reported with count 0 and no
/// recall values.
inline RetrievalReport recall_report(const std::vector<Query>& queries,
                                     const std::vector<DatabaseEntry>& database,
                                     const std::vector<RangeBin>& bins = default_bins(),
                                     const std::string& method = "") {
  if (queries.empty()) throw DatasetError("recall_report: no queries");
  std::set<std::int64_t> db_ids;
  for (const DatabaseEntry& entry : database) db_ids.insert(entry.landmark_id);
  for (const Query& q : queries) {
    if (!db_ids.count(q.landmark_id)) {
      throw IntegrityError("query landmark id " + std::to_string(q.landmark_id) +
                           " is absent from the database");
    }
  }

  RetrievalReport report;
  report.method = method;
  report.total_queries = static_cast<std::int64_t>(queries.size());
  report.bins.reserve(bins.size());
  for (const RangeBin& bin : bins) {
    BinReport br;
    br.bin = bin;
    report.bins.push_back(br);
  }

  for (const Query& q : queries) {
    const std::vector<std::int64_t> order = rank(q, database);
    std::int64_t r = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (order[i] == q.landmark_id) {
        r = static_cast<std::int64_t>(i) + 1;
        break;
      }
    }
    report.ranks.push_back(r);
    for (int ki = 0; ki < 3; ++ki) {
      if (r <= kRecallKs[ki]) ++report.hits_at[ki];
    }
    for (BinReport& br : report.bins) {
      if (br.bin.contains(q.range)) {
        ++br.query_count;
        for (int ki = 0; ki < 3; ++ki) {
          if (r <= kRecallKs[ki]) ++br.hits_at[ki];
        }
      }
    }
  }

  for (int ki = 0; ki < 3; ++ki) {
    report.recall_at[kRecallKs[ki]] = percent_value(report.hits_at[ki], report.total_queries);
  }
  for (BinReport& br : report.bins) {
    if (br.query_count > 0) {
      for (int ki = 0; ki < 3; ++ki) {
        br.recall_at[kRecallKs[ki]] = percent_value(br.hits_at[ki], br.query_count);
      }
    }
  }
  return report;
}

/// Report JSON: {method, total_queries, recall: {...}, bins: [...]}.
/// Written by hand to keep field order stable; values carry the exact
/// two-decimal rendering.
inline void write_report_json(const RetrievalReport& report, const std::string& path) {
  std::string out = "{\n";
  out += "  \"method\": \"" + report.method + "\",\n";
  out += "  \"total_queries\": " + std::to_string(report.total_queries) + ",\n";
  out += "  \"recall\": {";
  bool first = true;
  for (const auto& [k, v] : report.recall_at) {
    if (!first) out += ", ";
    out += "\"" + std::to_string(k) + "\": " + format_percent_value(v);
    first = false;
  }
  out += "},\n  \"bins\": [\n";
  for (std::size_t i = 0; i < report.bins.size(); ++i) {
    const BinReport& br = report.bins[i];
    out += "    {\"label\": \"" + br.bin.label + "\", \"lo\": ";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", br.bin.lo);
    out += buf;
    out += ", \"hi\": ";
    if (std::isinf(br.bin.hi)) {
      out += "null";
    } else {
      std::snprintf(buf, sizeof(buf), "%g", br.bin.hi);
      out += buf;
    }
    out += ", \"count\": " + std::to_string(br.query_count);
    if (br.query_count > 0) {
      out += ", \"recall\": {";
      bool f2 = true;
      for (const auto& [k, v] : br.recall_at) {
        if (!f2) out += ", ";
        out += "\"" + std::to_string(k) + "\": " + format_percent_value(v);
        f2 = false;
      }
      out += "}";
    }
    out += i + 1 < report.bins.size() ? "},\n" : "}\n";
  }
  out += "  ]\n}\n";
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path + "' for writing");
  file << out;
  if (!file) throw IoError("write failed for '" + path + "'");
}

/// Companion CSV mirroring the tables' column order. Empty bins keep their
/// row with blank recall cells.
inline void write_report_csv(const RetrievalReport& report, const std::string& path) {
  std::string out = "method,range,n_query,r1,r5,r10\n";
  auto row = [&](const std::string& range_label, std::int64_t count, const std::int64_t* hits) {
    out += report.method + "," + range_label + "," + std::to_string(count);
    for (int ki = 0; ki < 3; ++ki) {
      out += ",";
      if (count > 0) out += format_percent(hits[ki], count);
    }
    out += "\n";
  };
  row("overall", report.total_queries, report.hits_at);
  for (const BinReport& br : report.bins) {
    row(br.bin.label, br.query_count, br.hits_at);
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path + "' for writing");
  file << out;
  if (!file) throw IoError("write failed for '" + path + "'");
}

}  // namespace spl
