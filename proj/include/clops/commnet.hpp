#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "clops/csv.hpp"
#include "clops/error.hpp"
#include "clops/geo.hpp"
#include "clops/mobility.hpp"
#include "clops/netgraph.hpp"
#include "clops/rng.hpp"
#include "clops/scenario.hpp"
#include "clops/signals.hpp"

namespace clops {

struct Bsm {
  VehicleId sender = 0;
  Tick t = 0;
  GeoPoint pos;
  double speed_mps = 0.0;
  double heading_deg = 0.0;

  friend bool operator==(const Bsm&, const Bsm&) = default;
};

/// Position of a vehicle by linear interpolation between its link endpoints.
inline GeoPoint vehicle_position(const RoadGraph& g, LinkIndex link, double pos_m) {
  const GeoPoint a = g.node(g.from(link)).pos;
  const GeoPoint b = g.node(g.to(link)).pos;
  const double frac = std::clamp(pos_m / g.link(link).length_m(), 0.0, 1.0);
  return interpolate(a, b, frac);
}

inline double link_heading(const RoadGraph& g, LinkIndex link) {
  return bearing_deg(g.node(g.from(link)).pos, g.node(g.to(link)).pos);
}

/// The message a CV broadcasts at tick t. Replayed vehicles repeat their
/// recorded broadcast exactly.
inline Bsm make_bsm(const RoadGraph& g, const Vehicle& v, Tick t) {
  if (v.script) {
    if (const ScriptSample* s = v.script->at(t); s != nullptr && s->geo) {
      return {v.id, t, *s->geo, s->speed_mps, s->heading_deg};
    }
  }
  return {v.id, t, vehicle_position(g, v.link, v.pos_m), v.speed_mps, link_heading(g, v.link)};
}

/// One BSM per CV, in vehicle order.
inline std::vector<Bsm> emit_bsms(const RoadGraph& g, std::span<const Vehicle> vehicles, Tick t) {
  std::vector<Bsm> out;
  for (const Vehicle& v : vehicles) {
    if (v.kind == VehicleKind::CV) {
      out.push_back(make_bsm(g, v, t));
    }
  }
  return out;
}

// ---------------------------------------------------------------- reception

struct UnitDisk {
  double radius_m = 300.0;
};

struct LogDistance {
  double ref_range_m = 10.0;    // d0
  double exponent = 2.5;        // n
  double p0_dbm = 0.0;          // received power at d0
  double threshold_dbm = -30.0; // delivery threshold
  double fading_sigma_db = 0.0; // 0 disables fading

  /// Distance at which the mean received power meets the threshold.
  double cutoff_m() const { return ref_range_m * std::pow(10.0, (p0_dbm - threshold_dbm) / (10.0 * exponent)); }
};

struct ReceptionModel {
  std::variant<UnitDisk, LogDistance> kind = UnitDisk{};

  void validate() const {
    if (const auto* u = std::get_if<UnitDisk>(&kind)) {
      if (!(u->radius_m > 0.0)) {
        throw ValidationError("unit disk radius must be positive");
      }
    } else {
      const auto& l = std::get<LogDistance>(kind);
      if (!(l.ref_range_m > 0.0) || !(l.exponent > 0.0) || l.fading_sigma_db < 0.0) {
        throw ValidationError("log-distance parameters must be positive");
      }
    }
  }

  /// Distance beyond which delivery is impossible (or, with fading, beyond
  /// eight standard deviations of the fading term).
  double max_range_m() const {
    if (const auto* u = std::get_if<UnitDisk>(&kind)) {
      return u->radius_m;
    }
    const auto& l = std::get<LogDistance>(kind);
    const double margin = l.p0_dbm - l.threshold_dbm + 8.0 * l.fading_sigma_db;
    return l.ref_range_m * std::pow(10.0, margin / (10.0 * l.exponent));
  }
};

/// Whether one transmission over distance `d_m` is received. `key` seeds the
/// fading draw and must identify the (transmission, receiver) pair.
inline bool received(const ReceptionModel& m, double d_m, std::uint64_t key) {
  if (const auto* u = std::get_if<UnitDisk>(&m.kind)) {
    return d_m <= u->radius_m;
  }
  const auto& l = std::get<LogDistance>(m.kind);
  const double d = std::max(d_m, l.ref_range_m);
  double power = l.p0_dbm - 10.0 * l.exponent * std::log10(d / l.ref_range_m);
  if (l.fading_sigma_db > 0.0) {
    power += l.fading_sigma_db * keyed_normal(key);
  }
  return power >= l.threshold_dbm;
}

struct Receiver {
  std::uint64_t id = 0;
  GeoPoint pos;
};

inline std::uint64_t fading_key(std::uint64_t seed, Tick t, std::uint64_t sender, std::uint64_t receiver) {
  return hash_values(seed, t, sender, receiver);
}

/// Receivers (other than the sender) that get `b`, sorted by id.
inline std::vector<std::uint64_t> deliver(const Bsm& b, std::span<const Receiver> candidates, const ReceptionModel& m,
                                          std::uint64_t seed) {
  std::vector<std::uint64_t> out;
  for (const Receiver& r : candidates) {
    if (r.id == b.sender) {
      continue;
    }
    if (received(m, haversine_m(b.pos, r.pos), fading_key(seed, b.t, b.sender, r.id))) {
      out.push_back(r.id);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------- RSUs and advisories

struct Rsu {
  std::string id;
  NodeIndex node = 0;
  GeoPoint pos;
};

/// RSUs at the listed nodes, or at every signalized node when none are listed.
inline std::vector<Rsu> place_rsus(const Scenario& sc) {
  std::vector<Rsu> out;
  if (!sc.rsu_nodes.empty()) {
    for (const std::string& id : sc.rsu_nodes) {
      const auto n = sc.graph.find_node(id);
      if (!n) {
        throw ValidationError("RSU at unknown node " + id);
      }
      out.push_back({"rsu-" + id, *n, sc.graph.node(*n).pos});
    }
  } else {
    for (NodeIndex n = 0; n < sc.graph.node_count(); ++n) {
      if (sc.graph.node(n).signalized) {
        out.push_back({"rsu-" + sc.graph.node(n).id, n, sc.graph.node(n).pos});
      }
    }
  }
  return out;
}

enum class AdvisoryKind : std::uint8_t { Detour, LaneClosure };

inline std::string_view to_string(AdvisoryKind k) { return k == AdvisoryKind::Detour ? "detour" : "lane_closure"; }

struct Advisory {
  std::uint64_t id = 0;
  std::string rsu; // issuing RSU id
  std::vector<LinkIndex> links;
  AdvisoryKind kind = AdvisoryKind::Detour;
  Tick valid_from = 0;
  Tick valid_to = std::numeric_limits<Tick>::max(); // exclusive

  bool valid_at(Tick t) const { return t >= valid_from && t < valid_to; }

  void validate() const {
    if (links.empty()) {
      throw ValidationError("advisory " + std::to_string(id) + ": empty link set");
    }
    if (valid_to < valid_from) {
      throw ValidationError("advisory " + std::to_string(id) + ": valid_to before valid_from");
    }
  }

  friend bool operator==(const Advisory&, const Advisory&) = default;
};

/// Key distinguishing an advisory broadcast from vehicle BSMs in fading draws.
inline constexpr std::uint64_t kAdvisoryChannel = 0x4144560000000000ULL;

/// CVs reached by the issuing RSU's broadcast of `a` at tick t (sorted ids).
/// Empty when the advisory is not valid at t or its RSU is unknown.
inline std::vector<VehicleId> disseminate_advisory(const Advisory& a, std::span<const Rsu> rsus,
                                                   std::span<const Receiver> cvs, const ReceptionModel& m, Tick t,
                                                   std::uint64_t seed) {
  if (!a.valid_at(t)) {
    return {};
  }
  const auto rsu = std::find_if(rsus.begin(), rsus.end(), [&](const Rsu& r) { return r.id == a.rsu; });
  if (rsu == rsus.end()) {
    return {};
  }
  std::vector<VehicleId> out;
  for (const Receiver& cv : cvs) {
    if (received(m, haversine_m(rsu->pos, cv.pos), fading_key(seed, t, kAdvisoryChannel ^ a.id, cv.id))) {
      out.push_back(cv.id);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Informed CVs per advisory; grows monotonically.
class InformedSet {
public:
  /// Records receptions and returns those that are new.
  std::vector<VehicleId> record(std::uint64_t advisory, std::span<const VehicleId> reached) {
    std::set<VehicleId>& s = sets_[advisory];
    std::vector<VehicleId> fresh;
    for (VehicleId v : reached) {
      if (s.insert(v).second) {
        fresh.push_back(v);
      }
    }
    return fresh;
  }

  bool contains(std::uint64_t advisory, VehicleId v) const {
    auto it = sets_.find(advisory);
    return it != sets_.end() && it->second.contains(v);
  }

  std::size_t size(std::uint64_t advisory) const {
    auto it = sets_.find(advisory);
    return it == sets_.end() ? 0 : it->second.size();
  }

private:
  std::map<std::uint64_t, std::set<VehicleId>> sets_;
};

/// Closure and detour link sets a vehicle knows about from its advisories.
inline void advised_links(const Vehicle& v, std::span<const Advisory> book, std::vector<LinkIndex>& closed,
                          std::vector<LinkIndex>& advised) {
  for (std::uint64_t id : v.informed) {
    for (const Advisory& a : book) {
      if (a.id == id) {
        auto& dst = a.kind == AdvisoryKind::LaneClosure ? closed : advised;
        dst.insert(dst.end(), a.links.begin(), a.links.end());
      }
    }
  }
}

/// Marks `v` informed of `a` and reroutes it using everything it has been
/// told. Returns true when this call triggered the reroute; non-CVs and repeat
/// notifications are ignored.
inline bool apply_informed(Vehicle& v, const Advisory& a, const RoadGraph& g, std::span<const Advisory> book,
                           double multiplier = kDefaultAdvisoryMultiplier) {
  if (v.kind != VehicleKind::CV) {
    return false;
  }
  auto it = std::lower_bound(v.informed.begin(), v.informed.end(), a.id);
  if (it != v.informed.end() && *it == a.id) {
    return false;
  }
  v.informed.insert(it, a.id);
  if (v.script) {
    return true; // replayed trajectories are not steerable
  }
  std::vector<LinkIndex> closed;
  std::vector<LinkIndex> advised;
  advised_links(v, book, closed, advised);
  v.route = reroute(v, g, closed, advised, multiplier);
  return true;
}

// ---------------------------------------------------------------- BSM log

inline void write_bsm_header(std::ostream& os) { os << "t,sender,lat,lon,speed_mps,heading\n"; }

inline void write_bsm_row(std::ostream& os, const Bsm& b) {
  char t[32];
  std::snprintf(t, sizeof t, "%.1f", tick_seconds(b.t));
  os << t << ',' << b.sender << ',' << format_double(b.pos.lat) << ',' << format_double(b.pos.lon) << ','
     << format_double(b.speed_mps) << ',' << format_double(b.heading_deg) << '\n';
}

struct RowError {
  std::size_t line = 0;
  std::string message;
};

/// Parses a BSM log. Malformed rows are reported and skipped.
inline std::vector<Bsm> parse_bsm_csv(std::string_view text, std::vector<RowError>* errors = nullptr) {
  std::vector<Bsm> out;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string_view line = trim(lines[i]);
    if (line.empty() || (i == 0 && line.starts_with("t,"))) {
      continue;
    }
    const auto f = split_fields(line);
    auto fail = [&](const std::string& msg) {
      if (errors != nullptr) {
        errors->push_back({i + 1, msg});
      }
    };
    if (f.size() != 6) {
      fail("expected 6 fields");
      continue;
    }
    const auto t = parse_double(f[0]);
    const auto sender = parse_int<VehicleId>(f[1]);
    const auto lat = parse_double(f[2]);
    const auto lon = parse_double(f[3]);
    const auto speed = parse_double(f[4]);
    const auto heading = parse_double(f[5]);
    if (!t || !sender || !lat || !lon || !speed || !heading) {
      fail("unparseable field");
      continue;
    }
    const double ticks = *t * 10.0;
    if (std::fabs(ticks - std::round(ticks)) > 1e-6 || *t < 0.0) {
      fail("t not on the 0.1 s lattice");
      continue;
    }
    Bsm b{*sender, static_cast<Tick>(std::llround(ticks)), {*lat, *lon}, *speed, *heading};
    if (!b.pos.valid()) {
      fail("coordinates out of range");
      continue;
    }
    out.push_back(b);
  }
  return out;
}

} // namespace clops
