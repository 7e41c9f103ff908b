#pragma once
// Small road networks shared by the suites.

#include <cmath>
#include <string>
#include <vector>

#include "clops/netgraph.hpp"
#include "clops/scenario.hpp"

namespace fixture {

inline constexpr double kLat0 = 35.0;
inline constexpr double kLon0 = -85.0;

/// Degrees of latitude per meter on the 6367 km sphere.
inline double deg_per_m() { return 180.0 / (M_PI * 6367000.0); }

inline clops::GeoPoint offset(double north_m, double east_m) {
  const double dlat = north_m * deg_per_m();
  const double dlon = east_m * deg_per_m() / std::cos(kLat0 * M_PI / 180.0);
  return {kLat0 + dlat, kLon0 + dlon};
}

/// Straight west-to-east chain n0 -> n1 -> ... with equal link lengths.
inline clops::RoadGraph chain(int links, double length_m, int lanes = 1, double speed = 20.0) {
  using namespace clops;
  std::vector<RoadNode> nodes;
  for (int i = 0; i <= links; ++i) {
    nodes.push_back({"n" + std::to_string(i), offset(0.0, i * length_m), false, 0, 0});
  }
  std::vector<RoadLink> ls;
  for (int i = 0; i < links; ++i) {
    ls.push_back({"l" + std::to_string(i), nodes[i].id, nodes[i + 1].id, length_m / 1000.0, lanes, Density::Medium,
                  speed});
  }
  derive_node_lanes(nodes, ls);
  return RoadGraph(nodes, ls);
}

/// rows x cols grid with links in both directions. Node "r{r}c{c}"; link ids
/// "{from}-{to}".
inline clops::RoadGraph grid(int rows, int cols, double spacing_m, int lanes = 1, double speed = 15.0) {
  using namespace clops;
  std::vector<RoadNode> nodes;
  auto id = [](int r, int c) { return "r" + std::to_string(r) + "c" + std::to_string(c); };
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      nodes.push_back({id(r, c), offset(r * spacing_m, c * spacing_m), false, 0, 0});
    }
  }
  std::vector<RoadLink> ls;
  auto add = [&](const std::string& a, const std::string& b) {
    ls.push_back({a + "-" + b, a, b, spacing_m / 1000.0, lanes, Density::Medium, speed});
  };
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (c + 1 < cols) {
        add(id(r, c), id(r, c + 1));
        add(id(r, c + 1), id(r, c));
      }
      if (r + 1 < rows) {
        add(id(r, c), id(r + 1, c));
        add(id(r + 1, c), id(r, c));
      }
    }
  }
  derive_node_lanes(nodes, ls);
  return RoadGraph(nodes, ls);
}

} // namespace fixture
