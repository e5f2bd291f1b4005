#pragma once

// File ingestion and export. All tabular formats are header-first CSV with
// '.' decimal points; IU geometry is either GeoJSON or a point-list CSV.
// Doubles are written in shortest round-trip form so that write/read is an
// identity on record values.

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dast/data.hpp"

namespace dast {
namespace io {

inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) {
    // trim surrounding whitespace and CR
    auto b = field.find_first_not_of(" \t\r");
    auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string()
                                         : field.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& what,
                           std::size_t row) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error("row " + std::to_string(row) + ": field '" +
                             what + "' is not a number: '" + s + "'");
  return v;
}

inline int parse_int(const std::string& s, const std::string& what,
                     std::size_t row) {
  int v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error("row " + std::to_string(row) + ": field '" +
                             what + "' is not an integer: '" + s + "'");
  return v;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// Survey schema: x_km,y_km,t_year,n_examined,n_positive,iu_id[,cov...]
inline Dataset load_surveys(const std::string& path) {
  auto lines = read_lines(path);
  if (lines.empty()) throw std::runtime_error("empty survey file: " + path);
  auto header = split_csv_line(lines[0]);
  const std::vector<std::string> required = {"x_km",       "y_km",
                                             "t_year",     "n_examined",
                                             "n_positive", "iu_id"};
  if (header.size() < required.size())
    throw std::runtime_error("survey header has too few columns in " + path);
  for (std::size_t i = 0; i < required.size(); ++i)
    if (header[i] != required[i])
      throw std::runtime_error("survey header column " + std::to_string(i) +
                               " must be '" + required[i] + "', got '" +
                               header[i] + "'");
  Dataset ds;
  for (std::size_t c = required.size(); c < header.size(); ++c)
    ds.covariate_names.push_back(header[c]);

  for (std::size_t row = 1; row < lines.size(); ++row) {
    if (lines[row].empty()) continue;
    auto f = split_csv_line(lines[row]);
    if (f.size() != header.size())
      throw std::runtime_error("row " + std::to_string(row) + ": expected " +
                               std::to_string(header.size()) +
                               " fields, got " + std::to_string(f.size()));
    SurveyRecord r;
    r.loc.x = parse_double(f[0], "x_km", row);
    r.loc.y = parse_double(f[1], "y_km", row);
    r.t = parse_double(f[2], "t_year", row);
    r.examined = parse_int(f[3], "n_examined", row);
    r.positive = parse_int(f[4], "n_positive", row);
    r.iu_id = f[5];
    if (r.examined < 1)
      throw std::runtime_error("row " + std::to_string(row) +
                               ": n_examined must be >= 1");
    if (r.positive < 0 || r.positive > r.examined)
      throw std::runtime_error("row " + std::to_string(row) +
                               ": positives exceed examined");
    ds.records.push_back(r);
    if (!ds.covariate_names.empty()) {
      std::vector<double> cov;
      for (std::size_t c = required.size(); c < header.size(); ++c)
        cov.push_back(parse_double(f[c], header[c], row));
      ds.covariates.push_back(std::move(cov));
    }
  }
  return ds;
}

inline void save_surveys(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << "x_km,y_km,t_year,n_examined,n_positive,iu_id";
  for (const auto& name : ds.covariate_names) out << ',' << name;
  out << '\n';
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    out << format_double(r.loc.x) << ',' << format_double(r.loc.y) << ','
        << format_double(r.t) << ',' << r.examined << ',' << r.positive << ','
        << r.iu_id;
    if (!ds.covariates.empty())
      for (double v : ds.covariates[i]) out << ',' << format_double(v);
    out << '\n';
  }
}

// MDA schema: iu_id,round_year (one row per round)
inline std::map<std::string, MdaHistory> load_mda(const std::string& path) {
  auto lines = read_lines(path);
  if (lines.empty()) throw std::runtime_error("empty MDA file: " + path);
  auto header = split_csv_line(lines[0]);
  if (header.size() < 2 || header[0] != "iu_id" || header[1] != "round_year")
    throw std::runtime_error("MDA header must be 'iu_id,round_year'");
  std::map<std::string, MdaHistory> out;
  for (std::size_t row = 1; row < lines.size(); ++row) {
    if (lines[row].empty()) continue;
    auto f = split_csv_line(lines[row]);
    if (f.size() < 2)
      throw std::runtime_error("row " + std::to_string(row) +
                               ": expected iu_id,round_year");
    auto& h = out[f[0]];
    h.iu_id = f[0];
    h.round_times.push_back(parse_double(f[1], "round_year", row));
  }
  for (auto& [id, h] : out) h.normalise();
  return out;
}

inline void save_mda(const std::map<std::string, MdaHistory>& mda,
                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << "iu_id,round_year\n";
  for (const auto& [id, h] : mda)
    for (double u : h.round_times)
      out << id << ',' << format_double(u) << '\n';
}

// GeoJSON FeatureCollection with an 'iu_id' property per feature;
// Polygon and MultiPolygon geometries, outer rings only.
inline std::map<std::string, ImplementationUnit> load_iu_geojson(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("type", "") != "FeatureCollection")
    throw std::runtime_error("IU geometry must be a GeoJSON FeatureCollection");
  std::map<std::string, ImplementationUnit> out;
  for (const auto& feat : j.at("features")) {
    std::string id = feat.at("properties").at("iu_id").get<std::string>();
    ImplementationUnit& iu = out[id];
    iu.id = id;
    const auto& geom = feat.at("geometry");
    std::string type = geom.at("type").get<std::string>();
    auto read_ring = [](const nlohmann::json& ring) {
      PolygonRing r;
      for (const auto& pt : ring)
        r.push_back({pt.at(0).get<double>(), pt.at(1).get<double>()});
      if (r.size() > 1 && r.front() == r.back()) r.pop_back();
      return r;
    };
    if (type == "Polygon") {
      iu.polygons.push_back(read_ring(geom.at("coordinates").at(0)));
    } else if (type == "MultiPolygon") {
      for (const auto& poly : geom.at("coordinates"))
        iu.polygons.push_back(read_ring(poly.at(0)));
    } else {
      throw std::runtime_error("unsupported geometry type: " + type);
    }
    if (iu.degenerate())
      throw std::runtime_error("degenerate geometry for IU " + id);
  }
  return out;
}

inline void save_iu_geojson(const std::map<std::string, ImplementationUnit>& ius,
                            const std::string& path) {
  nlohmann::json features = nlohmann::json::array();
  for (const auto& [id, iu] : ius) {
    nlohmann::json coords = nlohmann::json::array();
    for (const auto& ring : iu.polygons) {
      nlohmann::json r = nlohmann::json::array();
      for (const auto& p : ring) r.push_back({p.x, p.y});
      if (!ring.empty()) r.push_back({ring.front().x, ring.front().y});
      coords.push_back({r});
    }
    features.push_back({{"type", "Feature"},
                        {"properties", {{"iu_id", id}}},
                        {"geometry",
                         {{"type", "MultiPolygon"}, {"coordinates", coords}}}});
  }
  nlohmann::json j = {{"type", "FeatureCollection"}, {"features", features}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << j.dump(2) << '\n';
}

// Point-list alternative for discrete community targets: iu_id,x_km,y_km
inline std::map<std::string, ImplementationUnit> load_iu_points(
    const std::string& path) {
  auto lines = read_lines(path);
  if (lines.empty()) throw std::runtime_error("empty IU point file: " + path);
  auto header = split_csv_line(lines[0]);
  if (header.size() < 3 || header[0] != "iu_id" || header[1] != "x_km" ||
      header[2] != "y_km")
    throw std::runtime_error("IU point header must be 'iu_id,x_km,y_km'");
  std::map<std::string, ImplementationUnit> out;
  for (std::size_t row = 1; row < lines.size(); ++row) {
    if (lines[row].empty()) continue;
    auto f = split_csv_line(lines[row]);
    auto& iu = out[f[0]];
    iu.id = f[0];
    iu.points.push_back(
        {parse_double(f[1], "x_km", row), parse_double(f[2], "y_km", row)});
  }
  return out;
}

// Scattered weight points: x_km,y_km,weight
inline WeightSurface load_weight_surface(const std::string& path) {
  auto lines = read_lines(path);
  if (lines.empty()) throw std::runtime_error("empty weight file: " + path);
  auto header = split_csv_line(lines[0]);
  if (header.size() < 3 || header[0] != "x_km" || header[1] != "y_km" ||
      header[2] != "weight")
    throw std::runtime_error("weight header must be 'x_km,y_km,weight'");
  WeightSurface w;
  for (std::size_t row = 1; row < lines.size(); ++row) {
    if (lines[row].empty()) continue;
    auto f = split_csv_line(lines[row]);
    w.points.push_back(
        {parse_double(f[0], "x_km", row), parse_double(f[1], "y_km", row)});
    double v = parse_double(f[2], "weight", row);
    if (!(v >= 0.0))
      throw std::runtime_error("row " + std::to_string(row) +
                               ": weight must be nonnegative");
    w.weights.push_back(v);
  }
  return w;
}

// Links surveys to IUs and MDA histories; every survey IU must have an MDA
// entry (possibly empty) after this step. Returns human-readable warnings
// for survey points falling outside their declared IU.
inline std::vector<std::string> link_dataset(Dataset& ds) {
  std::vector<std::string> warnings;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    auto iu_it = ds.ius.find(r.iu_id);
    if (iu_it == ds.ius.end())
      throw std::runtime_error("record " + std::to_string(i) +
                               ": unknown iu_id '" + r.iu_id + "'");
    if (iu_it->second.has_geometry() && !iu_it->second.contains(r.loc))
      warnings.push_back("record " + std::to_string(i) + " at (" +
                         format_double(r.loc.x) + "," + format_double(r.loc.y) +
                         ") lies outside IU " + r.iu_id);
    if (ds.mda.find(r.iu_id) == ds.mda.end()) {
      MdaHistory empty;
      empty.iu_id = r.iu_id;
      ds.mda.emplace(r.iu_id, std::move(empty));
    }
  }
  ds.validate();
  return warnings;
}

}  // namespace io
}  // namespace dast
