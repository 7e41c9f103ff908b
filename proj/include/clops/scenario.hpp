#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "clops/error.hpp"
#include "clops/netgraph.hpp"
#include "clops/signals.hpp"

namespace clops {

struct OdFlow {
  std::string origin;      // node id
  std::string destination; // node id
  double veh_per_hour = 0.0;
  double start_s = 0.0;
  double end_s = 0.0;
  // When set, exactly this many departures are drawn uniformly over
  // [start_s, end_s) instead of a Poisson count.
  std::optional<int> vehicles;

  friend bool operator==(const OdFlow&, const OdFlow&) = default;
};

struct DemandSpec {
  std::vector<OdFlow> flows;
  double penetration_rate = 0.0;

  friend bool operator==(const DemandSpec&, const DemandSpec&) = default;
};

struct Scenario {
  RoadGraph graph;
  DemandSpec demand;
  std::vector<SignalController> signals;
  std::vector<std::string> rsu_nodes; // empty => every signalized node

  friend bool operator==(const Scenario&, const Scenario&) = default;
};

namespace scenario_detail {

using nlohmann::json;

inline const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw SchemaError(where + "." + key, "missing");
  }
  return obj.at(key);
}

inline std::string get_string(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_string()) {
    throw SchemaError(where + "." + key, "expected string");
  }
  return v.get<std::string>();
}

inline double get_number(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_number()) {
    throw SchemaError(where + "." + key, "expected number");
  }
  return v.get<double>();
}

inline int get_int(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_number_integer()) {
    throw SchemaError(where + "." + key, "expected integer");
  }
  return v.get<int>();
}

inline bool get_bool(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_boolean()) {
    throw SchemaError(where + "." + key, "expected boolean");
  }
  return v.get<bool>();
}

inline const json& get_array(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_array()) {
    throw SchemaError(where + "." + key, "expected array");
  }
  return v;
}

} // namespace scenario_detail

inline SignalController signal_from_json(const nlohmann::json& s, const std::string& where) {
  using namespace scenario_detail;
  SignalController c;
  c.node = get_string(s, "node", where);
  c.offset_s = s.contains("offset_s") ? get_number(s, "offset_s", where) : 0.0;
  const json& phases = get_array(s, "phases", where);
  for (std::size_t j = 0; j < phases.size(); ++j) {
    const std::string pw = where + ".phases[" + std::to_string(j) + "]";
    SignalPhase p;
    for (const json& a : get_array(phases[j], "approaches", pw)) {
      if (!a.is_string()) {
        throw SchemaError(pw + ".approaches", "expected string");
      }
      p.approaches.push_back(a.get<std::string>());
    }
    p.green_s = get_number(phases[j], "green_s", pw);
    p.yellow_s = get_number(phases[j], "yellow_s", pw);
    c.phases.push_back(std::move(p));
  }
  return c;
}

inline nlohmann::json signal_to_json(const SignalController& c) {
  nlohmann::json phases = nlohmann::json::array();
  for (const SignalPhase& p : c.phases) {
    phases.push_back({{"approaches", p.approaches}, {"green_s", p.green_s}, {"yellow_s", p.yellow_s}});
  }
  return {{"node", c.node}, {"offset_s", c.offset_s}, {"phases", phases}};
}

/// Parses and validates a scenario document.
inline Scenario parse_scenario(std::string_view json_text) {
  using namespace scenario_detail;
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("scenario JSON: ") + e.what());
  }
  if (!doc.is_object()) {
    throw SchemaError("$", "expected object");
  }

  std::vector<RoadNode> nodes;
  bool lanes_given = true;
  const json& jn = get_array(doc, "nodes", "$");
  for (std::size_t i = 0; i < jn.size(); ++i) {
    const std::string w = "nodes[" + std::to_string(i) + "]";
    RoadNode n;
    n.id = get_string(jn[i], "id", w);
    n.pos = {get_number(jn[i], "lat", w), get_number(jn[i], "lon", w)};
    n.signalized = jn[i].contains("signalized") ? get_bool(jn[i], "signalized", w) : false;
    if (jn[i].contains("in_lanes") || jn[i].contains("out_lanes")) {
      n.in_lanes = get_int(jn[i], "in_lanes", w);
      n.out_lanes = get_int(jn[i], "out_lanes", w);
    } else {
      lanes_given = false;
    }
    nodes.push_back(std::move(n));
  }

  std::unordered_map<std::string, GeoPoint> pos_by_id;
  for (const RoadNode& n : nodes) {
    pos_by_id.emplace(n.id, n.pos);
  }

  std::vector<RoadLink> links;
  const json& jl = get_array(doc, "links", "$");
  for (std::size_t i = 0; i < jl.size(); ++i) {
    const std::string w = "links[" + std::to_string(i) + "]";
    RoadLink l;
    l.id = get_string(jl[i], "id", w);
    l.from = get_string(jl[i], "from", w);
    l.to = get_string(jl[i], "to", w);
    l.lanes = get_int(jl[i], "lanes", w);
    const std::string d = get_string(jl[i], "density", w);
    auto dens = parse_density(d);
    if (!dens) {
      throw SchemaError(w + ".density", "expected low|medium|high, got " + d);
    }
    l.density = *dens;
    l.speed_limit_mps = get_number(jl[i], "speed_limit_mps", w);
    if (jl[i].contains("length_km") && !jl[i].at("length_km").is_null()) {
      l.length_km = get_number(jl[i], "length_km", w);
    } else {
      auto a = pos_by_id.find(l.from);
      auto b = pos_by_id.find(l.to);
      if (a != pos_by_id.end() && b != pos_by_id.end()) {
        l.length_km = haversine_km(a->second, b->second);
      }
    }
    links.push_back(std::move(l));
  }
  if (!lanes_given) {
    derive_node_lanes(nodes, links);
  }

  Scenario sc;
  sc.graph = RoadGraph(std::move(nodes), std::move(links));

  if (doc.contains("demand") && !doc.at("demand").is_null()) {
    const json& jd = doc.at("demand");
    sc.demand.penetration_rate = jd.contains("penetration_rate") ? get_number(jd, "penetration_rate", "demand") : 0.0;
    if (sc.demand.penetration_rate < 0.0 || sc.demand.penetration_rate > 1.0) {
      throw ValidationError("demand.penetration_rate must be in [0, 1]");
    }
    if (jd.contains("flows")) {
      const json& jf = get_array(jd, "flows", "demand");
      for (std::size_t i = 0; i < jf.size(); ++i) {
        const std::string w = "demand.flows[" + std::to_string(i) + "]";
        OdFlow f;
        f.origin = get_string(jf[i], "origin", w);
        f.destination = get_string(jf[i], "destination", w);
        f.veh_per_hour = jf[i].contains("veh_per_hour") ? get_number(jf[i], "veh_per_hour", w) : 0.0;
        f.start_s = get_number(jf[i], "start_s", w);
        f.end_s = get_number(jf[i], "end_s", w);
        if (jf[i].contains("vehicles")) {
          f.vehicles = get_int(jf[i], "vehicles", w);
          if (*f.vehicles < 0) {
            throw ValidationError(w + ".vehicles must be >= 0");
          }
        }
        if (f.veh_per_hour < 0.0) {
          throw ValidationError(w + ".veh_per_hour must be >= 0");
        }
        if (f.end_s < f.start_s) {
          throw ValidationError(w + ": end_s before start_s");
        }
        if (!sc.graph.find_node(f.origin)) {
          throw ValidationError(w + ": unknown origin node " + f.origin);
        }
        if (!sc.graph.find_node(f.destination)) {
          throw ValidationError(w + ": unknown destination node " + f.destination);
        }
        sc.demand.flows.push_back(std::move(f));
      }
    }
  }

  if (doc.contains("signals") && !doc.at("signals").is_null()) {
    const json& js = get_array(doc, "signals", "$");
    for (std::size_t i = 0; i < js.size(); ++i) {
      const std::string w = "signals[" + std::to_string(i) + "]";
      SignalController c = signal_from_json(js[i], w);
      c.validate();
      auto ni = sc.graph.find_node(c.node);
      if (!ni) {
        throw ValidationError(w + ": unknown node " + c.node);
      }
      for (const SignalPhase& p : c.phases) {
        for (const std::string& a : p.approaches) {
          if (a == "*") {
            continue;
          }
          auto li = sc.graph.find_link(a);
          if (!li || sc.graph.to(*li) != *ni) {
            throw ValidationError(w + ": approach " + a + " is not an incoming link of " + c.node);
          }
        }
      }
      sc.signals.push_back(std::move(c));
    }
  }

  if (doc.contains("rsus") && !doc.at("rsus").is_null()) {
    for (const json& r : get_array(doc, "rsus", "$")) {
      if (!r.is_string()) {
        throw SchemaError("rsus", "expected node id strings");
      }
      if (!sc.graph.find_node(r.get<std::string>())) {
        throw ValidationError("rsus: unknown node " + r.get<std::string>());
      }
      sc.rsu_nodes.push_back(r.get<std::string>());
    }
  }
  return sc;
}

/// Road layer only.
inline RoadGraph load_scenario(std::string_view json_text) { return parse_scenario(json_text).graph; }

inline nlohmann::json scenario_to_json(const Scenario& sc) {
  using nlohmann::json;
  json nodes = json::array();
  for (const RoadNode& n : sc.graph.nodes()) {
    nodes.push_back({{"id", n.id},
                     {"lat", n.pos.lat},
                     {"lon", n.pos.lon},
                     {"signalized", n.signalized},
                     {"in_lanes", n.in_lanes},
                     {"out_lanes", n.out_lanes}});
  }
  json links = json::array();
  for (const RoadLink& l : sc.graph.links()) {
    links.push_back({{"id", l.id},
                     {"from", l.from},
                     {"to", l.to},
                     {"lanes", l.lanes},
                     {"density", std::string(to_string(l.density))},
                     {"speed_limit_mps", l.speed_limit_mps},
                     {"length_km", l.length_km}});
  }
  json flows = json::array();
  for (const OdFlow& f : sc.demand.flows) {
    json jf = {{"origin", f.origin},
               {"destination", f.destination},
               {"veh_per_hour", f.veh_per_hour},
               {"start_s", f.start_s},
               {"end_s", f.end_s}};
    if (f.vehicles) {
      jf["vehicles"] = *f.vehicles;
    }
    flows.push_back(std::move(jf));
  }
  json signals = json::array();
  for (const SignalController& c : sc.signals) {
    signals.push_back(signal_to_json(c));
  }
  json doc = {{"nodes", nodes},
              {"links", links},
              {"demand", {{"penetration_rate", sc.demand.penetration_rate}, {"flows", flows}}},
              {"signals", signals}};
  if (!sc.rsu_nodes.empty()) {
    doc["rsus"] = sc.rsu_nodes;
  }
  return doc;
}

inline std::string save_scenario(const Scenario& sc) { return scenario_to_json(sc).dump(2); }

inline std::string save_scenario(const RoadGraph& g) {
  Scenario sc;
  sc.graph = g;
  return save_scenario(sc);
}

struct GridSpec {
  int rows = 4;
  int cols = 4;
  double spacing_m = 200.0;
  int lanes = 2;
  double speed_mps = 13.89;
  GeoPoint origin{35.0, -85.0};
  bool signals = true;        // two-phase signals at interior intersections
  double green_s = 25.0;
  double yellow_s = 3.0;
  int vehicles_per_flow = 50; // four corner-to-corner flows
  double window_s = 60.0;
  double penetration = 0.5;
};

/// Rectangular two-way grid. Nodes are "r{row}c{col}", links "{from}-{to}".
inline Scenario make_grid_scenario(const GridSpec& grid) {
  if (grid.rows < 1 || grid.cols < 1 || grid.rows * grid.cols < 2) {
    throw ValidationError("grid needs at least two nodes");
  }
  if (!(grid.spacing_m > 0.0) || grid.lanes < 1 || !(grid.speed_mps > 0.0)) {
    throw ValidationError("grid spacing, lanes and speed must be positive");
  }
  const double m_per_deg_lat = deg2rad(1.0) * kEarthRadiusKm * 1000.0;
  const double m_per_deg_lon = m_per_deg_lat * std::cos(deg2rad(grid.origin.lat));
  auto id = [](int r, int c) { return "r" + std::to_string(r) + "c" + std::to_string(c); };
  auto interior = [&](int r, int c) { return r > 0 && c > 0 && r + 1 < grid.rows && c + 1 < grid.cols; };
  std::vector<RoadNode> nodes;
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const GeoPoint p{grid.origin.lat + r * grid.spacing_m / m_per_deg_lat,
                       grid.origin.lon + c * grid.spacing_m / m_per_deg_lon};
      nodes.push_back({id(r, c), p, grid.signals && interior(r, c), 0, 0});
    }
  }
  std::vector<RoadLink> links;
  auto add = [&](const std::string& a, const std::string& b) {
    links.push_back({a + "-" + b, a, b, grid.spacing_m / 1000.0, grid.lanes, Density::Medium, grid.speed_mps});
  };
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      if (c + 1 < grid.cols) {
        add(id(r, c), id(r, c + 1));
        add(id(r, c + 1), id(r, c));
      }
      if (r + 1 < grid.rows) {
        add(id(r, c), id(r + 1, c));
        add(id(r + 1, c), id(r, c));
      }
    }
  }
  derive_node_lanes(nodes, links);
  Scenario sc;
  sc.graph = RoadGraph(std::move(nodes), std::move(links));
  for (int r = 1; r + 1 < grid.rows && grid.signals; ++r) {
    for (int c = 1; c + 1 < grid.cols; ++c) {
      const std::string n = id(r, c);
      SignalController ctrl;
      ctrl.node = n;
      ctrl.phases = {{{id(r, c - 1) + "-" + n, id(r, c + 1) + "-" + n}, grid.green_s, grid.yellow_s},
                     {{id(r - 1, c) + "-" + n, id(r + 1, c) + "-" + n}, grid.green_s, grid.yellow_s}};
      ctrl.validate();
      sc.signals.push_back(std::move(ctrl));
    }
  }
  const int R = grid.rows - 1;
  const int C = grid.cols - 1;
  const std::vector<std::pair<std::string, std::string>> od = {
      {id(0, 0), id(R, C)}, {id(R, C), id(0, 0)}, {id(0, C), id(R, 0)}, {id(R, 0), id(0, C)}};
  for (const auto& [o, d] : od) {
    if (o == d || grid.vehicles_per_flow <= 0) {
      continue;
    }
    OdFlow f;
    f.origin = o;
    f.destination = d;
    f.end_s = grid.window_s;
    f.vehicles = grid.vehicles_per_flow;
    sc.demand.flows.push_back(std::move(f));
  }
  sc.demand.penetration_rate = grid.penetration;
  return sc;
}

} // namespace clops
