// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dexar/metrics.hpp"

namespace dexar::report {

struct MetricRow {
  std::uint64_t sample_id = 0;
  std::string method;
  std::string metric;
  double value = 0.0;
};

struct Flag {
  std::uint64_t sample_id = 0;
  std::string method;
  std::string reason;
};

// All rows of one run plus flags; rows are kept in emission order.
struct MetricReport {
  std::vector<MetricRow> rows;
  std::vector<Flag> flags;
  std::vector<Flag> failures;  // samples that could not be processed

  struct Summary {
    double mean = 0.0;
    std::size_t count = 0;
  };

  // method -> metric -> mean/count, summed in row order.
  std::map<std::string, std::map<std::string, Summary>> aggregate() const {
    std::map<std::string, std::map<std::string, Summary>> out;
    for (const auto& r : rows) {
      auto& s = out[r.method][r.metric];
      s.mean += r.value;
      ++s.count;
    }
    for (auto& [m, per] : out) {
      for (auto& [k, s] : per) s.mean /= static_cast<double>(s.count);
    }
    return out;
  }

  double mean(const std::string& method, const std::string& metric) const {
    const auto agg = aggregate();
    const auto m = agg.find(method);
    if (m == agg.end()) throw std::out_of_range("no rows for method " + method);
    const auto k = m->second.find(metric);
    if (k == m->second.end()) throw std::out_of_range("no rows for metric " + metric);
    return k->second.mean;
  }
};

inline std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string report_csv(const MetricReport& r) {
  std::ostringstream os;
  os << "sample_id,method,metric,value\n";
  for (const auto& row : r.rows) {
    os << row.sample_id << ',' << csv_field(row.method) << ',' << csv_field(row.metric) << ','
       << format_value(row.value) << '\n';
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline void write_report_csv(const std::filesystem::path& path, const MetricReport& r) {
  write_text(path, report_csv(r));
}

inline nlohmann::json aggregate_json(const MetricReport& r) {
  nlohmann::json j;
  j["schema_version"] = 1;
  nlohmann::json methods = nlohmann::json::object();
  for (const auto& [m, per] : r.aggregate()) {
    for (const auto& [k, s] : per) methods[m][k] = {{"mean", s.mean}, {"count", s.count}};
  }
  j["methods"] = methods;
  auto flags_json = [](const std::vector<Flag>& fs) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& f : fs) a.push_back({{"sample_id", f.sample_id}, {"method", f.method}, {"reason", f.reason}});
    return a;
  };
  j["flags"] = flags_json(r.flags);
  j["failures"] = flags_json(r.failures);
  return j;
}

inline void write_aggregate_json(const std::filesystem::path& path, const MetricReport& r) {
  write_text(path, aggregate_json(r).dump(2) + "\n");
}

inline std::string curve_csv(const metrics::Curve& c, bool with_entropy) {
  std::ostringstream os;
  os << (with_entropy ? "p,ppl,ppl_norm,entropy_norm\n" : "p,ppl,ppl_norm\n");
  for (const auto& pt : c.points) {
    os << format_value(pt.p) << ',' << format_value(pt.ppl) << ',' << format_value(pt.ppl_norm);
    if (with_entropy) os << ',' << format_value(pt.entropy_norm);
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) heatmaps

inline std::string encode_pgm(std::span<const double> grid, std::size_t w, std::size_t h) {
  if (grid.size() != w * h) throw std::invalid_argument("pgm: grid size does not match dimensions");
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (double v : grid) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("pgm: grid entry outside [0,1]");
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
  }
  return out;
}

inline void write_pgm(const std::filesystem::path& path, std::span<const double> grid, std::size_t w,
                      std::size_t h) {
  write_text(path, encode_pgm(grid, w, h));
}

struct Pgm {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

inline Pgm parse_pgm(const std::string& bytes) {
  std::istringstream is(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  if (!(is >> magic >> w >> h >> maxval) || magic != "P5" || maxval != 255) {
    throw std::runtime_error("pgm: bad header");
  }
  is.get();  // single whitespace before the payload
  Pgm p{w, h, std::vector<std::uint8_t>(w * h)};
  if (!is.read(reinterpret_cast<char*>(p.pixels.data()), static_cast<std::streamsize>(p.pixels.size()))) {
    throw std::runtime_error("pgm: truncated payload");
  }
  return p;
}

}  // namespace dexar::report
