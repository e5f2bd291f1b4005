#pragma once

// Core domain types: survey records, implementation units, MDA histories,
// and the immutable Dataset container shared by all model fits.
//
// Coordinates are planar, in km; distances are Euclidean. Times are
// real-valued years.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dast/rng.hpp"

namespace dast {

struct Location {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Location& a, const Location& b) {
    return a.x == b.x && a.y == b.y;
  }
};

inline double distance(const Location& a, const Location& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

struct SurveyRecord {
  Location loc;
  double t = 0.0;      // survey year
  int examined = 0;    // m_i >= 1
  int positive = 0;    // 0 <= y_i <= m_i
  std::string iu_id;
};

// One ring, implicitly closed (last vertex connects back to the first).
using PolygonRing = std::vector<Location>;

struct WeightSurface {
  std::vector<Location> points;
  std::vector<double> weights;

  // Nearest-point lookup; no interpolation.
  double at(const Location& p) const {
    if (points.empty()) throw std::runtime_error("empty weight surface");
    std::size_t best = 0;
    double best_d = distance(points[0], p);
    for (std::size_t i = 1; i < points.size(); ++i) {
      double d = distance(points[i], p);
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    return weights[best];
  }
};

namespace geom {

inline double ring_area(const PolygonRing& ring) {
  double s = 0.0;
  std::size_t n = ring.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Location& a = ring[i];
    const Location& b = ring[(i + 1) % n];
    s += a.x * b.y - b.x * a.y;
  }
  return 0.5 * std::abs(s);
}

inline double point_segment_distance(const Location& p, const Location& a,
                                     const Location& b) {
  double vx = b.x - a.x, vy = b.y - a.y;
  double wx = p.x - a.x, wy = p.y - a.y;
  double vv = vx * vx + vy * vy;
  double u = vv > 0.0 ? std::clamp((wx * vx + wy * vy) / vv, 0.0, 1.0) : 0.0;
  return std::hypot(wx - u * vx, wy - u * vy);
}

// Ray casting with a boundary tolerance: points within `tol` of an edge
// count as inside.
inline bool point_in_ring(const Location& p, const PolygonRing& ring,
                          double tol) {
  std::size_t n = ring.size();
  if (n < 3) return false;
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    if (point_segment_distance(p, ring[j], ring[i]) <= tol) return true;
    bool crosses = (ring[i].y > p.y) != (ring[j].y > p.y);
    if (crosses) {
      double x_int = ring[j].x + (p.y - ring[j].y) / (ring[i].y - ring[j].y) *
                                     (ring[i].x - ring[j].x);
      if (p.x < x_int) inside = !inside;
    }
  }
  return inside;
}

}  // namespace geom

struct ImplementationUnit {
  std::string id;
  std::vector<PolygonRing> polygons;  // outer rings only
  std::vector<Location> points;       // discrete community alternative
  std::optional<WeightSurface> population_weight;

  static constexpr double kBoundaryTolKm = 1e-6;

  bool has_geometry() const { return !polygons.empty() || !points.empty(); }

  bool degenerate() const {
    double area = 0.0;
    for (const auto& ring : polygons) area += geom::ring_area(ring);
    return area <= 0.0 && points.empty();
  }

  bool contains(const Location& p, double tol = kBoundaryTolKm) const {
    for (const auto& ring : polygons)
      if (geom::point_in_ring(p, ring, tol)) return true;
    for (const auto& q : points)
      if (distance(p, q) <= tol) return true;
    return false;
  }
};

struct MdaHistory {
  std::string iu_id;
  std::vector<double> round_times;  // strictly increasing

  void normalise() {
    std::sort(round_times.begin(), round_times.end());
    auto last = std::unique(round_times.begin(), round_times.end());
    round_times.erase(last, round_times.end());
  }
};

// Immutable after construction; safe to share across threads.
struct Dataset {
  std::vector<SurveyRecord> records;
  std::map<std::string, ImplementationUnit> ius;
  std::map<std::string, MdaHistory> mda;
  std::vector<std::string> covariate_names;
  // row-per-record covariates d(x_i); empty means "intercept only" downstream
  std::vector<std::vector<double>> covariates;

  const MdaHistory* history_for(const std::string& iu_id) const {
    auto it = mda.find(iu_id);
    return it == mda.end() ? nullptr : &it->second;
  }

  void validate() const {
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (r.examined < 1)
        throw std::runtime_error("record " + std::to_string(i) +
                                 ": examined count must be >= 1");
      if (r.positive < 0 || r.positive > r.examined)
        throw std::runtime_error("record " + std::to_string(i) +
                                 ": positives exceed examined");
      if (!std::isfinite(r.loc.x) || !std::isfinite(r.loc.y) ||
          !std::isfinite(r.t))
        throw std::runtime_error("record " + std::to_string(i) +
                                 ": non-finite coordinate or time");
    }
    if (!covariates.empty() && covariates.size() != records.size())
      throw std::runtime_error("covariate rows do not match record count");
  }
};

// Count of rounds strictly before t: a round delivered in the survey year
// does not count (surveys precede same-year rollout).
inline int cumulative_rounds(const MdaHistory& history, double t) {
  return static_cast<int>(std::lower_bound(history.round_times.begin(),
                                           history.round_times.end(), t) -
                          history.round_times.begin());
}

inline int cumulative_rounds(const Dataset& ds, const std::string& iu_id,
                             double t) {
  const MdaHistory* h = ds.history_for(iu_id);
  if (!h) throw std::runtime_error("unknown IU in MDA lookup: " + iu_id);
  return cumulative_rounds(*h, t);
}

struct HoldoutSplit {
  Dataset train;
  Dataset test;
  std::vector<std::size_t> test_indices;  // indices into the source dataset
};

// Year-stratified split: within each calendar year, round-half-up of
// fraction * n_year records go to the test set. Deterministic given seed.
inline HoldoutSplit holdout_split(const Dataset& ds, double fraction,
                                  std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw std::invalid_argument("holdout fraction must be in (0,1)");

  std::map<long, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < ds.records.size(); ++i)
    strata[static_cast<long>(std::floor(ds.records[i].t))].push_back(i);

  std::vector<bool> in_test(ds.records.size(), false);
  for (auto& [year, idx] : strata) {
    auto rng = Rng::substream(seed, "holdout", static_cast<std::uint64_t>(
                                                   year + 1000000L));
    // Fisher-Yates, then take the first n_test
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::size_t j = rng.below(i);
      std::swap(idx[i - 1], idx[j]);
    }
    auto n_test = static_cast<std::size_t>(
        std::floor(fraction * static_cast<double>(idx.size()) + 0.5));
    for (std::size_t k = 0; k < n_test; ++k) in_test[idx[k]] = true;
  }

  HoldoutSplit out;
  out.train.ius = ds.ius;
  out.train.mda = ds.mda;
  out.train.covariate_names = ds.covariate_names;
  out.test.ius = ds.ius;
  out.test.mda = ds.mda;
  out.test.covariate_names = ds.covariate_names;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    Dataset& dst = in_test[i] ? out.test : out.train;
    dst.records.push_back(ds.records[i]);
    if (!ds.covariates.empty()) dst.covariates.push_back(ds.covariates[i]);
    if (in_test[i]) out.test_indices.push_back(i);
  }
  return out;
}

}  // namespace dast
