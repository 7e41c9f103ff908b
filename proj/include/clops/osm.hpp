#pragma once

#include <charconv>
#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <expat.h>

#include "clops/error.hpp"
#include "clops/geo.hpp"
#include "clops/netgraph.hpp"

namespace clops {

struct OsmOptions {
  // Highway classes dropped from the road layer.
  std::set<std::string, std::less<>> excluded_classes{"residential", "service",  "footway",
                                                      "cycleway",    "motorway", "unclassified"};
  // When false a way yields links in digitization order only.
  bool two_way = false;
  Density default_density = Density::Medium;
};

namespace osm_detail {

struct OsmNode {
  GeoPoint pos;
  bool signal = false;
};

struct OsmWay {
  std::string id;
  std::vector<std::string> refs;
  std::string highway;
  std::string lanes;
  std::string maxspeed;
  std::string oneway;
  std::size_t line = 0;
};

struct ParseState {
  XML_Parser parser = nullptr;
  std::unordered_map<std::string, OsmNode> nodes;
  std::vector<std::string> node_order;
  std::vector<OsmWay> ways;
  std::string current_node;
  bool in_way = false;
  std::string error;
  std::size_t error_line = 0;
  std::size_t error_col = 0;
};

inline const char* attr(const XML_Char** atts, std::string_view name) {
  for (int i = 0; atts[i] != nullptr; i += 2) {
    if (name == atts[i]) {
      return atts[i + 1];
    }
  }
  return nullptr;
}

inline bool to_double(const char* s, double& out) {
  if (s == nullptr) {
    return false;
  }
  std::string_view sv(s);
  auto [p, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), out);
  return ec == std::errc() && p == sv.data() + sv.size();
}

inline void fail(ParseState& st, std::string msg) {
  if (st.error.empty()) {
    st.error = std::move(msg);
    st.error_line = XML_GetCurrentLineNumber(st.parser);
    st.error_col = XML_GetCurrentColumnNumber(st.parser) + 1;
  }
  XML_StopParser(st.parser, XML_FALSE);
}

inline void on_start(void* ud, const XML_Char* name, const XML_Char** atts) {
  auto& st = *static_cast<ParseState*>(ud);
  const std::string_view tag(name);
  if (tag == "node") {
    const char* id = attr(atts, "id");
    double lat = 0;
    double lon = 0;
    if (id == nullptr || !to_double(attr(atts, "lat"), lat) || !to_double(attr(atts, "lon"), lon)) {
      fail(st, "node element needs id, lat and lon");
      return;
    }
    GeoPoint p{lat, lon};
    if (!p.valid()) {
      fail(st, std::string("node ") + id + ": coordinates out of range");
      return;
    }
    st.current_node = id;
    if (st.nodes.emplace(id, OsmNode{p, false}).second) {
      st.node_order.emplace_back(id);
    }
  } else if (tag == "way") {
    const char* id = attr(atts, "id");
    if (id == nullptr) {
      fail(st, "way element needs id");
      return;
    }
    st.ways.push_back({id, {}, {}, {}, {}, {}, static_cast<std::size_t>(XML_GetCurrentLineNumber(st.parser))});
    st.in_way = true;
  } else if (tag == "nd" && st.in_way) {
    const char* ref = attr(atts, "ref");
    if (ref == nullptr) {
      fail(st, "nd element needs ref");
      return;
    }
    st.ways.back().refs.emplace_back(ref);
  } else if (tag == "tag") {
    const char* k = attr(atts, "k");
    const char* v = attr(atts, "v");
    if (k == nullptr || v == nullptr) {
      return;
    }
    const std::string_view key(k);
    if (st.in_way) {
      OsmWay& w = st.ways.back();
      if (key == "highway") {
        w.highway = v;
      } else if (key == "lanes") {
        w.lanes = v;
      } else if (key == "maxspeed") {
        w.maxspeed = v;
      } else if (key == "oneway") {
        w.oneway = v;
      }
    } else if (!st.current_node.empty() && key == "highway" && std::string_view(v) == "traffic_signals") {
      st.nodes[st.current_node].signal = true;
    }
  }
}

inline void on_end(void* ud, const XML_Char* name) {
  auto& st = *static_cast<ParseState*>(ud);
  const std::string_view tag(name);
  if (tag == "node") {
    st.current_node.clear();
  } else if (tag == "way") {
    st.in_way = false;
  }
}

inline double default_speed_mps(std::string_view highway) {
  if (highway == "trunk" || highway == "trunk_link") {
    return 80.0 / 3.6;
  }
  if (highway == "primary" || highway == "primary_link") {
    return 60.0 / 3.6;
  }
  if (highway == "secondary" || highway == "secondary_link") {
    return 50.0 / 3.6;
  }
  return 40.0 / 3.6;
}

inline double parse_maxspeed(std::string_view s, double fallback) {
  double value = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || value <= 0) {
    return fallback;
  }
  std::string_view rest(p, s.data() + s.size() - p);
  while (!rest.empty() && rest.front() == ' ') {
    rest.remove_prefix(1);
  }
  return rest == "mph" ? value * 0.44704 : value / 3.6;
}

} // namespace osm_detail

/// Reads OSM XML (node, way, nd, tag elements only) into a road graph. Ways whose
/// highway class is excluded are dropped; the rest are split at shared nodes,
/// signalized nodes, and way endpoints. Link length is the summed haversine
/// length of the collapsed segments.
inline RoadGraph parse_osm_subset(std::string_view xml_text, const OsmOptions& opts = {}) {
  using namespace osm_detail;
  ParseState st;
  std::unique_ptr<std::remove_pointer_t<XML_Parser>, decltype(&XML_ParserFree)> parser(
      XML_ParserCreate(nullptr), &XML_ParserFree);
  st.parser = parser.get();
  XML_SetUserData(st.parser, &st);
  XML_SetElementHandler(st.parser, &on_start, &on_end);
  if (XML_Parse(st.parser, xml_text.data(), static_cast<int>(xml_text.size()), XML_TRUE) ==
      XML_STATUS_ERROR) {
    if (st.error.empty()) {
      throw ParseError(std::string("malformed XML: ") + XML_ErrorString(XML_GetErrorCode(st.parser)),
                       XML_GetCurrentLineNumber(st.parser), XML_GetCurrentColumnNumber(st.parser) + 1);
    }
  }
  if (!st.error.empty()) {
    throw ParseError(st.error, st.error_line, st.error_col);
  }

  std::vector<const OsmWay*> kept;
  std::unordered_map<std::string, int> use_count;
  for (const OsmWay& w : st.ways) {
    if (w.highway.empty() || opts.excluded_classes.contains(w.highway)) {
      continue;
    }
    for (const std::string& ref : w.refs) {
      if (!st.nodes.contains(ref)) {
        throw ValidationError("way " + w.id + " references missing node " + ref);
      }
    }
    if (w.refs.size() < 2) {
      continue;
    }
    kept.push_back(&w);
    for (const std::string& ref : w.refs) {
      ++use_count[ref];
    }
  }

  std::unordered_set<std::string> split;
  for (const OsmWay* w : kept) {
    split.insert(w->refs.front());
    split.insert(w->refs.back());
    for (const std::string& ref : w->refs) {
      if (use_count[ref] > 1 || st.nodes.at(ref).signal) {
        split.insert(ref);
      }
    }
  }

  std::vector<RoadLink> links;
  auto emit = [&](const std::string& id, const std::string& a, const std::string& b, double km,
                  int lanes, double speed) {
    if (km <= 0.0) {
      return; // coincident nodes
    }
    links.push_back({id, a, b, km, lanes, opts.default_density, speed});
  };
  for (const OsmWay* w : kept) {
    int lanes = 1;
    if (!w->lanes.empty()) {
      int v = 0;
      auto [p, ec] = std::from_chars(w->lanes.data(), w->lanes.data() + w->lanes.size(), v);
      if (ec == std::errc() && v >= 1) {
        lanes = v;
      }
    }
    const double speed = parse_maxspeed(w->maxspeed, default_speed_mps(w->highway));
    const bool oneway = w->oneway == "yes" || w->oneway == "true" || w->oneway == "1";
    std::size_t start = 0;
    double km = 0.0;
    int seq = 0;
    for (std::size_t i = 1; i < w->refs.size(); ++i) {
      km += haversine_km(st.nodes.at(w->refs[i - 1]).pos, st.nodes.at(w->refs[i]).pos);
      if (!split.contains(w->refs[i])) {
        continue;
      }
      const std::string base = w->id + "_" + std::to_string(seq++);
      emit(base, w->refs[start], w->refs[i], km, lanes, speed);
      if (opts.two_way && !oneway) {
        emit(base + "r", w->refs[i], w->refs[start], km, lanes, speed);
      }
      start = i;
      km = 0.0;
    }
  }

  std::unordered_set<std::string> used;
  for (const RoadLink& l : links) {
    used.insert(l.from);
    used.insert(l.to);
  }
  std::vector<RoadNode> nodes;
  for (const std::string& id : st.node_order) {
    if (used.contains(id)) {
      const OsmNode& n = st.nodes.at(id);
      nodes.push_back({id, n.pos, n.signal, 0, 0});
    }
  }
  derive_node_lanes(nodes, links);
  return RoadGraph(std::move(nodes), std::move(links));
}

} // namespace clops
