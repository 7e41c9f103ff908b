#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <queue>
#include <string>
#include <unordered_map>
#include <vector>

#include "clops/error.hpp"
#include "clops/geo.hpp"
#include "clops/netgraph.hpp"
#include "clops/rng.hpp"
#include "clops/scenario.hpp"
#include "clops/signals.hpp"

namespace clops {

using VehicleId = std::uint64_t;

enum class VehicleKind : std::uint8_t { CV, NonCV };

inline std::string_view to_string(VehicleKind k) { return k == VehicleKind::CV ? "cv" : "noncv"; }

struct IdmParams {
  double v0 = 30.0;     // desired speed, m/s (capped by the link speed limit)
  double T = 1.5;       // time headway, s
  double a_max = 1.4;   // m/s^2
  double b_comf = 2.0;  // m/s^2
  double s0 = 2.0;      // minimum gap, m
  double length = 5.0;  // m

  friend bool operator==(const IdmParams&, const IdmParams&) = default;
};

/// Deceleration applied when a leader overlaps the vehicle (gap <= 0).
inline constexpr double kEmergencyDecel = 9.0;

inline constexpr double kNoLeader = std::numeric_limits<double>::infinity();

/// IDM acceleration. `gap_m` is bumper to bumper; kNoLeader for a free road.
/// The result is clamped so that speed stays non-negative over one step `dt`.
inline double idm_accel(const IdmParams& p, double v, double gap_m, double leader_speed_mps,
                        double dt = kStepSeconds) {
  double a;
  if (std::isinf(gap_m)) {
    a = p.a_max * (1.0 - std::pow(v / p.v0, 4));
  } else if (gap_m <= 0.0) {
    a = -kEmergencyDecel;
  } else {
    const double s_star =
        p.s0 + std::max(0.0, v * p.T + v * (v - leader_speed_mps) / (2.0 * std::sqrt(p.a_max * p.b_comf)));
    a = p.a_max * (1.0 - std::pow(v / p.v0, 4) - (s_star / gap_m) * (s_star / gap_m));
  }
  return std::max(a, -v / dt);
}

/// One sample of an externally driven trajectory, on the tick lattice.
struct ScriptSample {
  Tick t = 0;
  LinkIndex link = 0;
  double pos_m = 0.0;
  double speed_mps = 0.0;
  std::optional<GeoPoint> geo; // exact broadcast position, when known
  double heading_deg = 0.0;
};

struct ScriptedTrace {
  std::vector<ScriptSample> samples; // consecutive ticks

  const ScriptSample* at(Tick t) const {
    if (samples.empty() || t < samples.front().t || t > samples.back().t) {
      return nullptr;
    }
    return &samples[static_cast<std::size_t>(t - samples.front().t)];
  }
};

struct Vehicle {
  VehicleId id = 0;
  VehicleKind kind = VehicleKind::NonCV;
  LinkIndex link = 0;
  int lane = 0;
  double pos_m = 0.0;
  double speed_mps = 0.0;
  std::vector<LinkIndex> route;
  std::size_t route_idx = 0;
  IdmParams params;

  Tick depart_tick = 0;       // scheduled departure
  std::size_t flow = 0;       // originating OD flow
  double cv_draw = 1.0;       // uniform draw compared against the penetration rate
  std::vector<std::uint64_t> informed; // advisories received, sorted
  std::shared_ptr<const ScriptedTrace> script;

  bool on_last_link() const { return route_idx + 1 >= route.size(); }
  NodeIndex destination(const RoadGraph& g) const { return g.to(route.back()); }
};

// ---------------------------------------------------------------- routing

inline double free_flow_time_s(const RoadLink& l) { return l.length_m() / l.speed_limit_mps; }

using LinkCost = std::function<double(LinkIndex)>;

/// Dijkstra over directed links. Returns nullopt when `to` is unreachable.
/// Infinite-cost links are never used. Ties resolve toward the lower link index.
inline std::optional<std::vector<LinkIndex>> shortest_path(const RoadGraph& g, NodeIndex from, NodeIndex to,
                                                           const LinkCost& cost) {
  if (from == to) {
    return std::vector<LinkIndex>{};
  }
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(g.node_count(), inf);
  std::vector<LinkIndex> via(g.node_count(), std::numeric_limits<LinkIndex>::max());
  std::vector<bool> done(g.node_count(), false);
  using Item = std::pair<double, NodeIndex>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[from] = 0.0;
  pq.emplace(0.0, from);
  while (!pq.empty()) {
    const auto [d, u] = pq.top();
    pq.pop();
    if (done[u]) {
      continue;
    }
    done[u] = true;
    if (u == to) {
      break;
    }
    for (LinkIndex l : g.out_links(u)) {
      const double c = cost(l);
      if (!std::isfinite(c)) {
        continue;
      }
      const NodeIndex v = g.to(l);
      const double nd = d + c;
      if (nd < dist[v] || (nd == dist[v] && !done[v] && l < via[v])) {
        dist[v] = nd;
        via[v] = l;
        pq.emplace(nd, v);
      }
    }
  }
  if (!std::isfinite(dist[to])) {
    return std::nullopt;
  }
  std::vector<LinkIndex> path;
  for (NodeIndex n = to; n != from; n = g.from(via[n])) {
    path.push_back(via[n]);
  }
  std::reverse(path.begin(), path.end());
  return path;
}

inline std::optional<std::vector<LinkIndex>> free_flow_path(const RoadGraph& g, NodeIndex from, NodeIndex to) {
  return shortest_path(g, from, to, [&g](LinkIndex l) { return free_flow_time_s(g.link(l)); });
}

inline constexpr double kDefaultAdvisoryMultiplier = 5.0;

/// Recomputes the remainder of a route from the end of the vehicle's current
/// link. Closed links cost infinity, advised links cost `multiplier` times
/// their free-flow time. Keeps the current route when the destination becomes
/// unreachable.
inline std::vector<LinkIndex> reroute(const Vehicle& v, const RoadGraph& g, const std::vector<LinkIndex>& closed,
                                      const std::vector<LinkIndex>& advised,
                                      double multiplier = kDefaultAdvisoryMultiplier) {
  std::vector<double> factor(g.link_count(), 1.0);
  for (LinkIndex l : advised) {
    factor.at(l) = multiplier;
  }
  for (LinkIndex l : closed) {
    factor.at(l) = std::numeric_limits<double>::infinity();
  }
  auto path = shortest_path(g, g.to(v.link), v.destination(g),
                            [&](LinkIndex l) { return free_flow_time_s(g.link(l)) * factor[l]; });
  if (!path) {
    return v.route;
  }
  std::vector<LinkIndex> route(v.route.begin(), v.route.begin() + static_cast<std::ptrdiff_t>(v.route_idx) + 1);
  route.insert(route.end(), path->begin(), path->end());
  return route;
}

// ---------------------------------------------------------------- demand

/// Departure schedule for a demand specification, sorted by departure tick
/// then id. Poisson arrivals per flow; flows with a fixed `vehicles` count get
/// that many uniform departure times. Each vehicle is independently a CV with
/// probability `penetration_rate`.
inline std::vector<Vehicle> generate_fleet(const DemandSpec& demand, const RoadGraph& g, std::uint64_t seed,
                                           const IdmParams& params = {}) {
  struct Draft {
    double t;
    std::size_t flow;
    double cv_draw;
  };
  std::vector<Draft> drafts;
  std::vector<std::vector<LinkIndex>> routes(demand.flows.size());
  for (std::size_t f = 0; f < demand.flows.size(); ++f) {
    const OdFlow& od = demand.flows[f];
    auto o = g.find_node(od.origin);
    auto d = g.find_node(od.destination);
    if (!o || !d) {
      throw ValidationError("flow " + od.origin + "->" + od.destination + ": unknown node");
    }
    auto path = free_flow_path(g, *o, *d);
    if (!path || path->empty()) {
      throw ValidationError("flow " + od.origin + "->" + od.destination + ": destination unreachable");
    }
    routes[f] = std::move(*path);
    Rng rng(hash_values(seed, 0x666c6f77ULL, f));
    Rng cv_rng(hash_values(seed, 0x6376ULL, f));
    const double span = od.end_s - od.start_s;
    if (od.vehicles) {
      std::vector<double> ts;
      for (int i = 0; i < *od.vehicles; ++i) {
        ts.push_back(od.start_s + rng.uniform() * span);
      }
      std::sort(ts.begin(), ts.end());
      for (double t : ts) {
        drafts.push_back({t, f, cv_rng.uniform()});
      }
    } else if (od.veh_per_hour > 0.0) {
      const double rate = od.veh_per_hour / 3600.0;
      for (double t = od.start_s + rng.exponential(rate); t < od.end_s; t += rng.exponential(rate)) {
        drafts.push_back({t, f, cv_rng.uniform()});
      }
    }
  }
  std::stable_sort(drafts.begin(), drafts.end(), [](const Draft& a, const Draft& b) { return a.t < b.t; });
  std::vector<Vehicle> fleet;
  fleet.reserve(drafts.size());
  for (std::size_t i = 0; i < drafts.size(); ++i) {
    Vehicle v;
    v.id = i + 1;
    v.flow = drafts[i].flow;
    v.route = routes[v.flow];
    v.link = v.route.front();
    v.lane = static_cast<int>(v.id % static_cast<std::uint64_t>(g.link(v.link).lanes));
    v.params = params;
    v.depart_tick = static_cast<Tick>(std::ceil(drafts[i].t * 10.0 - 1e-9));
    v.cv_draw = drafts[i].cv_draw;
    v.kind = v.cv_draw < demand.penetration_rate ? VehicleKind::CV : VehicleKind::NonCV;
    fleet.push_back(std::move(v));
  }
  return fleet;
}

// ---------------------------------------------------------------- signals and closures

/// Signal controllers indexed by approach link.
class SignalTable {
public:
  SignalTable() = default;
  SignalTable(const RoadGraph& g, std::vector<SignalController> ctrls) : ctrls_(std::move(ctrls)) {
    by_node_.assign(g.node_count(), -1);
    for (std::size_t i = 0; i < ctrls_.size(); ++i) {
      auto n = g.find_node(ctrls_[i].node);
      if (!n) {
        throw ValidationError("signal at unknown node " + ctrls_[i].node);
      }
      by_node_[*n] = static_cast<int>(i);
    }
    link_to_ = std::vector<NodeIndex>(g.link_count());
    link_ids_.resize(g.link_count());
    for (LinkIndex l = 0; l < g.link_count(); ++l) {
      link_to_[l] = g.to(l);
      link_ids_[l] = g.link(l).id;
    }
  }

  /// Aspect at the downstream end of `link`; Green when the node is uncontrolled.
  Aspect aspect(LinkIndex link, Tick t) const {
    if (by_node_.empty()) {
      return Aspect::Green;
    }
    const int c = by_node_[link_to_[link]];
    if (c < 0) {
      return Aspect::Green;
    }
    return approach_aspect(ctrls_[static_cast<std::size_t>(c)], link_ids_[link], tick_seconds(t));
  }

  void replace(const RoadGraph& g, SignalController ctrl) {
    auto n = g.find_node(ctrl.node);
    if (!n) {
      throw ValidationError("signal at unknown node " + ctrl.node);
    }
    ctrl.validate();
    if (by_node_[*n] >= 0) {
      ctrls_[static_cast<std::size_t>(by_node_[*n])] = std::move(ctrl);
    } else {
      by_node_[*n] = static_cast<int>(ctrls_.size());
      ctrls_.push_back(std::move(ctrl));
    }
  }

  const std::vector<SignalController>& controllers() const { return ctrls_; }

private:
  std::vector<SignalController> ctrls_;
  std::vector<int> by_node_;
  std::vector<NodeIndex> link_to_;
  std::vector<std::string> link_ids_;
};

struct LaneClosure {
  LinkIndex link = 0;
  std::vector<int> lanes; // empty means every lane
  Tick from = 0;
  Tick to = std::numeric_limits<Tick>::max(); // exclusive

  bool active(Tick t) const { return t >= from && t < to; }
  bool covers(int lane) const { return lanes.empty() || std::find(lanes.begin(), lanes.end(), lane) != lanes.end(); }
};

class ClosureTable {
public:
  void add(LaneClosure c) { closures_.push_back(std::move(c)); }
  const std::vector<LaneClosure>& all() const { return closures_; }

  bool lane_closed(LinkIndex link, int lane, Tick t) const {
    for (const LaneClosure& c : closures_) {
      if (c.link == link && c.active(t) && c.covers(lane)) {
        return true;
      }
    }
    return false;
  }

  /// Lane a vehicle takes when entering `link` from lane `lane`: the same index
  /// if it exists and is open, else the nearest open lane (lower index on ties).
  std::optional<int> entry_lane(const RoadGraph& g, LinkIndex link, int lane, Tick t) const {
    const int lanes = g.link(link).lanes;
    const int want = std::min(lane, lanes - 1);
    for (int d = 0; d < lanes; ++d) {
      for (int cand : {want - d, want + d}) {
        if (cand >= 0 && cand < lanes && !lane_closed(link, cand, t)) {
          return cand;
        }
      }
    }
    return std::nullopt;
  }

  /// Links with at least one closed lane at t.
  std::vector<LinkIndex> closed_links(Tick t) const {
    std::vector<LinkIndex> out;
    for (const LaneClosure& c : closures_) {
      if (c.active(t)) {
        out.push_back(c.link);
      }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

private:
  std::vector<LaneClosure> closures_;
};

// ---------------------------------------------------------------- stepping

/// Rear of the upstream-most vehicle in a lane, as seen at frame start.
struct LaneTail {
  double back_m = std::numeric_limits<double>::infinity(); // position minus length
  double speed_mps = 0.0;
  bool present() const { return std::isfinite(back_m); }
};

/// Frame-start tails of every (link, lane), indexed by lane_offset(link) + lane.
class TailBoard {
public:
  TailBoard() = default;
  explicit TailBoard(const RoadGraph& g) {
    offset_.reserve(g.link_count() + 1);
    for (const RoadLink& l : g.links()) {
      offset_.push_back(offset_.back() + static_cast<std::size_t>(l.lanes));
    }
    tails_.assign(offset_.back(), LaneTail{});
  }

  std::size_t slot(LinkIndex link, int lane) const { return offset_[link] + static_cast<std::size_t>(lane); }
  const LaneTail& at(LinkIndex link, int lane) const { return tails_[slot(link, lane)]; }
  LaneTail& at(LinkIndex link, int lane) { return tails_[slot(link, lane)]; }
  void clear() { std::fill(tails_.begin(), tails_.end(), LaneTail{}); }
  std::size_t size() const { return tails_.size(); }
  LaneTail& at_slot(std::size_t s) { return tails_[s]; }

  void observe(const Vehicle& v) {
    if (v.script) {
      return; // replayed bodies do not interact
    }
    LaneTail& t = at(v.link, v.lane);
    const double back = v.pos_m - v.params.length;
    if (back < t.back_m) {
      t = {back, v.speed_mps};
    }
  }

private:
  std::vector<std::size_t> offset_{0};
  std::vector<LaneTail> tails_;
};

struct Arrival {
  VehicleId id = 0;
  VehicleKind kind = VehicleKind::NonCV;
  std::size_t flow = 0;
  Tick depart_tick = 0;
  Tick arrive_tick = 0;
  bool informed = false;
};

struct Handoff {
  int to_partition = 0;
  Vehicle vehicle;
};

struct StepContext {
  const RoadGraph* graph = nullptr;
  const SignalTable* signals = nullptr;
  const ClosureTable* closures = nullptr;
  const TailBoard* tails = nullptr;
  const std::vector<int>* link_owner = nullptr; // mobility partition per link
  int partition = 0;
  Tick t = 0; // frame start; the step advances to t + 1
};

struct StepOutput {
  std::vector<Handoff> handoffs;
  std::vector<Arrival> arrivals;
};

namespace mobility_detail {

inline bool must_stop(Aspect a, double dist_to_line, double v, const IdmParams& p) {
  if (a == Aspect::Red) {
    return true;
  }
  return a == Aspect::Yellow && dist_to_line >= v * v / (2.0 * p.b_comf);
}

inline IdmParams effective(const IdmParams& p, const RoadLink& l) {
  IdmParams q = p;
  q.v0 = std::min(p.v0, l.speed_limit_mps);
  return q;
}

} // namespace mobility_detail

/// Owner of each link: the mobility partition of its upstream node.
inline std::vector<int> link_owners(const RoadGraph& g, const std::vector<int>& node_assignment) {
  std::vector<int> owner(g.link_count());
  for (LinkIndex l = 0; l < g.link_count(); ++l) {
    owner[l] = node_assignment.at(g.from(l));
  }
  return owner;
}

/// Advances every vehicle of one partition by one 0.1 s step. Accelerations
/// are computed from frame-start state only (own lanes plus the tail board
/// for downstream links), so the result does not depend on how links are
/// grouped into partitions. `vehicles` stays sorted by id.
inline StepOutput step_partition(std::vector<Vehicle>& vehicles, const StepContext& ctx) {
  using namespace mobility_detail;
  const RoadGraph& g = *ctx.graph;
  const Tick t_new = ctx.t + 1;
  StepOutput out;

  // Leader order per lane: by link id, then position descending.
  std::vector<std::size_t> order;
  order.reserve(vehicles.size());
  for (std::size_t i = 0; i < vehicles.size(); ++i) {
    const Vehicle& v = vehicles[i];
    if (v.link >= g.link_count()) {
      throw SimulationError("vehicle " + std::to_string(v.id) + " on unknown link");
    }
    if (!v.script && (*ctx.link_owner)[v.link] != ctx.partition) {
      throw SimulationError("vehicle " + std::to_string(v.id) + " is not owned by partition " +
                            std::to_string(ctx.partition));
    }
    if (!v.script) {
      order.push_back(i);
    }
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Vehicle& x = vehicles[a];
    const Vehicle& y = vehicles[b];
    if (x.link != y.link) {
      return x.link < y.link;
    }
    if (x.lane != y.lane) {
      return x.lane < y.lane;
    }
    if (x.pos_m != y.pos_m) {
      return x.pos_m > y.pos_m;
    }
    return x.id < y.id;
  });

  struct Plan {
    double accel = 0.0;
    double max_pos = std::numeric_limits<double>::infinity();
  };
  std::vector<Plan> plans(vehicles.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Vehicle& v = vehicles[order[k]];
    const RoadLink& link = g.link(v.link);
    const double L = link.length_m();
    const IdmParams p = effective(v.params, link);
    double a = idm_accel(p, v.speed_mps, kNoLeader, 0.0);
    Plan& plan = plans[order[k]];

    const bool has_leader = k > 0 && vehicles[order[k - 1]].link == v.link && vehicles[order[k - 1]].lane == v.lane;
    if (has_leader) {
      const Vehicle& lead = vehicles[order[k - 1]];
      const double back = lead.pos_m - lead.params.length;
      a = std::min(a, idm_accel(p, v.speed_mps, back - v.pos_m, lead.speed_mps));
      plan.max_pos = std::max(v.pos_m, back);
    } else if (!v.on_last_link()) {
      const LinkIndex next = v.route[v.route_idx + 1];
      const auto lane = ctx.closures->entry_lane(g, next, v.lane, ctx.t);
      if (!lane) {
        a = std::min(a, idm_accel(p, v.speed_mps, L - v.pos_m, 0.0));
        plan.max_pos = std::max(v.pos_m, std::nextafter(L, 0.0));
      } else {
        const LaneTail& tail = ctx.tails->at(next, *lane);
        if (tail.present()) {
          a = std::min(a, idm_accel(p, v.speed_mps, L - v.pos_m + tail.back_m, tail.speed_mps));
          plan.max_pos = std::max(v.pos_m, L + tail.back_m);
        }
      }
    }
    const Aspect aspect = ctx.signals->aspect(v.link, ctx.t);
    if (must_stop(aspect, L - v.pos_m, v.speed_mps, p)) {
      a = std::min(a, idm_accel(p, v.speed_mps, L - v.pos_m, 0.0));
      plan.max_pos = std::min(plan.max_pos, std::max(v.pos_m, std::nextafter(L, 0.0)));
    }
    plan.accel = std::max(a, -v.speed_mps / kStepSeconds);
  }

  std::vector<Vehicle> kept;
  kept.reserve(vehicles.size());
  for (std::size_t i = 0; i < vehicles.size(); ++i) {
    Vehicle v = std::move(vehicles[i]);
    if (v.script) {
      const ScriptSample* s = v.script->at(t_new);
      if (s == nullptr) {
        out.arrivals.push_back({v.id, v.kind, v.flow, v.depart_tick, t_new, !v.informed.empty()});
        continue;
      }
      v.link = s->link;
      v.pos_m = s->pos_m;
      v.speed_mps = s->speed_mps;
      v.route = {s->link};
      v.route_idx = 0;
      const int owner = (*ctx.link_owner)[v.link];
      if (owner != ctx.partition) {
        out.handoffs.push_back({owner, std::move(v)});
      } else {
        kept.push_back(std::move(v));
      }
      continue;
    }
    const Plan& plan = plans[i];
    const double a = plan.accel;
    double x;
    double s;
    if (v.speed_mps + a * kStepSeconds <= 0.0) {
      x = v.pos_m + (a < 0.0 ? v.speed_mps * v.speed_mps / (-2.0 * a) : 0.0);
      s = 0.0;
    } else {
      x = v.pos_m + v.speed_mps * kStepSeconds + 0.5 * a * kStepSeconds * kStepSeconds;
      s = v.speed_mps + a * kStepSeconds;
    }
    if (x > plan.max_pos) {
      x = plan.max_pos;
      s = std::min(s, (x - v.pos_m) / kStepSeconds);
    }
    v.pos_m = x;
    v.speed_mps = s;

    bool gone = false;
    while (v.pos_m >= g.link(v.link).length_m()) {
      if (v.on_last_link()) {
        out.arrivals.push_back({v.id, v.kind, v.flow, v.depart_tick, t_new, !v.informed.empty()});
        gone = true;
        break;
      }
      const LinkIndex next = v.route[v.route_idx + 1];
      const auto lane = ctx.closures->entry_lane(g, next, v.lane, ctx.t);
      if (!lane) {
        v.pos_m = std::nextafter(g.link(v.link).length_m(), 0.0);
        v.speed_mps = 0.0;
        break;
      }
      v.pos_m -= g.link(v.link).length_m();
      v.link = next;
      v.lane = *lane;
      ++v.route_idx;
    }
    if (gone) {
      continue;
    }
    const int owner = (*ctx.link_owner)[v.link];
    if (owner != ctx.partition) {
      out.handoffs.push_back({owner, std::move(v)});
    } else {
      kept.push_back(std::move(v));
    }
  }
  vehicles = std::move(kept);
  return out;
}

/// Inserts due departures at the start of their first link when the entry lane
/// has room. Blocked departures stay queued; a blocked lane holds back later
/// departures for the same lane so queue order is preserved. Returns the
/// number inserted.
inline std::size_t insert_departures(std::vector<Vehicle>& vehicles, std::vector<Vehicle>& pending, const RoadGraph& g,
                                     const ClosureTable& closures, Tick t) {
  if (pending.empty()) {
    return 0;
  }
  TailBoard local(g);
  for (const Vehicle& v : vehicles) {
    local.observe(v);
  }
  std::vector<bool> blocked(local.size(), false);
  std::vector<Vehicle> still;
  std::size_t inserted = 0;
  for (Vehicle& v : pending) {
    if (v.depart_tick > t) {
      still.push_back(std::move(v));
      continue;
    }
    if (v.script) {
      if (v.script->at(t) == nullptr) {
        still.push_back(std::move(v));
        continue;
      }
      const ScriptSample& s = *v.script->at(t);
      v.link = s.link;
      v.pos_m = s.pos_m;
      v.speed_mps = s.speed_mps;
      v.route = {s.link};
      v.route_idx = 0;
      vehicles.push_back(std::move(v));
      ++inserted;
      continue;
    }
    const auto lane = closures.entry_lane(g, v.link, v.lane, t);
    if (!lane) {
      still.push_back(std::move(v));
      continue;
    }
    const std::size_t slot = local.slot(v.link, *lane);
    const LaneTail& tail = local.at(v.link, *lane);
    const RoadLink& link = g.link(v.link);
    const double want = std::min(v.params.v0, link.speed_limit_mps);
    const double speed = tail.present() ? std::min(want, tail.speed_mps) : want;
    const bool room = !tail.present() || tail.back_m >= v.params.s0 + speed * v.params.T;
    if (blocked[slot] || !room) {
      blocked[slot] = true;
      still.push_back(std::move(v));
      continue;
    }
    v.lane = *lane;
    v.pos_m = 0.0;
    v.speed_mps = speed;
    local.observe(v);
    vehicles.push_back(std::move(v));
    ++inserted;
  }
  pending = std::move(still);
  std::sort(vehicles.begin(), vehicles.end(), [](const Vehicle& a, const Vehicle& b) { return a.id < b.id; });
  return inserted;
}

// ---------------------------------------------------------------- output

inline void write_trajectory_header(std::ostream& os) { os << "t,vehicle_id,kind,link,lane,pos_m,speed_mps\n"; }

inline void write_trajectory_row(std::ostream& os, const RoadGraph& g, Tick t, const Vehicle& v) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.1f,%llu,%s,", tick_seconds(t), static_cast<unsigned long long>(v.id),
                v.kind == VehicleKind::CV ? "cv" : "noncv");
  os << buf << g.link(v.link).id;
  std::snprintf(buf, sizeof buf, ",%d,%.6f,%.6f\n", v.lane, v.pos_m, v.speed_mps);
  os << buf;
}

} // namespace clops
