#pragma once

#include <algorithm>
#include <atomic>
#include <barrier>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <ctime>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "clops/command.hpp"
#include "clops/commnet.hpp"
#include "clops/error.hpp"
#include "clops/mobility.hpp"
#include "clops/netgraph.hpp"
#include "clops/partitioner.hpp"
#include "clops/rng.hpp"
#include "clops/scenario.hpp"
#include "clops/signals.hpp"

namespace clops {

// ---------------------------------------------------------------- lookahead

/// Links whose endpoints lie in different partitions.
inline std::vector<LinkIndex> cut_links(const RoadGraph& g, const PartitionPlan& plan) {
  std::vector<LinkIndex> out;
  for (LinkIndex l = 0; l < g.link_count(); ++l) {
    if (plan.assignment.at(g.from(l)) != plan.assignment.at(g.to(l))) {
      out.push_back(l);
    }
  }
  return out;
}

/// Highest speed a vehicle can carry on `link`: its own limit or the limit of
/// any feeding link, whichever is larger.
inline double max_link_speed(const RoadGraph& g, LinkIndex link) {
  double v = g.link(link).speed_limit_mps;
  for (LinkIndex in : g.in_links(g.from(link))) {
    v = std::max(v, g.link(in).speed_limit_mps);
  }
  return v;
}

/// Unrounded mobility lookahead; infinity when the plan cuts no link.
inline double mobility_lookahead_s(const RoadGraph& g, const PartitionPlan& plan) {
  double la = std::numeric_limits<double>::infinity();
  for (LinkIndex l : cut_links(g, plan)) {
    la = std::min(la, g.link(l).length_m() / max_link_speed(g, l));
  }
  return la;
}

/// Safe parallel horizon in seconds, floored to the tick lattice (at least
/// one step). CV coupling caps it at the BSM period.
inline double plan_lookahead(const RoadGraph& g, const PartitionPlan& plan, bool comm_coupling) {
  plan.validate(g.node_count());
  double la = mobility_lookahead_s(g, plan);
  if (comm_coupling) {
    la = std::min(la, kStepSeconds);
  }
  if (std::isinf(la)) {
    return la;
  }
  return tick_seconds(std::max<Tick>(1, floor_ticks(la)));
}

// ---------------------------------------------------------------- config and results

enum class SimMode : std::uint8_t { CLSim, HILS };

inline std::string_view to_string(SimMode m) { return m == SimMode::CLSim ? "clsim" : "hils"; }

/// Externally driven vehicles for HILS mode. Each vehicle carries its script;
/// its depart tick is the first scripted tick.
struct ReplayFeed {
  std::vector<Vehicle> vehicles;
};

struct SimConfig {
  std::shared_ptr<const Scenario> scenario;
  PartitionPlan mobility_plan;
  PartitionPlan comm_plan;
  int workers = 1;
  std::uint64_t seed = 1;
  double duration_s = 60.0;
  ReceptionModel reception;
  std::optional<double> penetration; // overrides the scenario's rate
  double comm_work_factor = 0.0;
  SimMode mode = SimMode::CLSim;
  std::shared_ptr<const ReplayFeed> feed;
  std::vector<TimedCommand> commands; // pre-scheduled, applied in order
  IdmParams idm;
  double advisory_multiplier = kDefaultAdvisoryMultiplier;
  bool self_check = false; // parallel runs re-run sequentially and compare digests

  Tick frames() const { return to_ticks(duration_s, "duration"); }

  void validate() const {
    if (!scenario) {
      throw ValidationError("config: no scenario");
    }
    if (workers < 1) {
      throw ValidationError("config: worker count must be >= 1");
    }
    if (frames() < 0) {
      throw ValidationError("config: negative duration");
    }
    const std::size_t n = scenario->graph.node_count();
    mobility_plan.validate(n);
    comm_plan.validate(n);
    reception.validate();
    if (penetration && !(*penetration >= 0.0 && *penetration <= 1.0)) {
      throw ValidationError("config: penetration must lie in [0, 1]");
    }
    if (comm_work_factor < 0.0) {
      throw ValidationError("config: negative work factor");
    }
    if (mode == SimMode::HILS && !feed) {
      throw ValidationError("config: HILS mode needs a replay feed");
    }
  }
};

/// One vehicle's state at a frame boundary.
struct VehicleRecord {
  VehicleId id = 0;
  VehicleKind kind = VehicleKind::NonCV;
  LinkIndex link = 0;
  int lane = 0;
  double pos_m = 0.0;
  double speed_mps = 0.0;
  double length_m = 0.0;
  int partition = 0;
  std::uint32_t informed = 0; // advisories known
  bool scripted = false;
};

struct WorkerTiming {
  std::int64_t compute_ns = 0;
  std::int64_t exchange_ns = 0;
};

struct ConservationReport {
  std::int64_t frames_checked = 0;
  std::int64_t vehicle_violations = 0;
  std::int64_t duplicate_violations = 0;
  std::int64_t ownership_violations = 0;
  std::int64_t bsm_violations = 0;
  std::int64_t delivery_violations = 0;
  std::vector<std::string> messages; // first few, for diagnostics

  std::int64_t total() const {
    return vehicle_violations + duplicate_violations + ownership_violations + bsm_violations + delivery_violations;
  }
  bool ok() const { return total() == 0; }

  void note(std::string msg) {
    if (messages.size() < 16) {
      messages.push_back(std::move(msg));
    }
  }
};

struct SimResult {
  std::uint64_t digest = 0;
  std::uint64_t cv_digest = 0;
  Tick frames = 0;
  int workers = 1;
  std::size_t fleet = 0;
  std::size_t departed = 0;
  std::size_t arrived = 0;
  std::size_t in_network = 0;
  std::uint64_t bsms = 0;
  std::uint64_t deliveries = 0;
  std::uint64_t cross_partition_deliveries = 0;
  std::uint64_t cross_worker_messages = 0;
  std::uint64_t advisory_receptions = 0;
  std::uint64_t reroutes = 0;
  std::vector<Arrival> arrivals; // by arrival tick, then id
  std::vector<TimedCommand> applied_commands;
  std::vector<std::string> rejected_commands;
  ConservationReport conservation;
  std::vector<WorkerTiming> worker_timing;
  std::vector<std::int64_t> partition_compute_ns; // mobility partitions
  double wall_s = 0.0;
  double lookahead_s = 0.0;
};

/// Frame-boundary view handed to observers (after deliveries of frame `frame`).
struct FrameView {
  Tick frame = 0; // the frame that just ran; state is at tick frame + 1
  std::span<const VehicleRecord> vehicles;
  const WorldState* world = nullptr;
  std::span<const WorkerTiming> worker_timing;      // this frame
  std::span<const std::int64_t> partition_compute; // this frame
  std::size_t informed_cvs = 0;
};

/// Optional observer and command source. Runs on the controller role, so it
/// must not block for long except to implement pausing.
class FrameHooks {
public:
  virtual ~FrameHooks() = default;
  /// Commands to apply before `frame` runs.
  virtual void before_frame(Tick /*frame*/, std::vector<Command>& /*out*/) {}
  virtual void after_frame(const FrameView& /*view*/) {}
  virtual bool stop_requested() { return false; }
};

struct SimSinks {
  std::ostream* trajectory = nullptr;
  std::ostream* bsms = nullptr;
  FrameHooks* hooks = nullptr;
};

// ---------------------------------------------------------------- digest

class Digest {
public:
  void add(std::uint64_t v) { h_ = hash_combine(h_, v); }
  std::uint64_t value() const { return h_; }

  static std::uint64_t quantize(double x) { return static_cast<std::uint64_t>(std::llround(x * 1e6)); }

  void add_record(Tick t, const VehicleRecord& r) {
    add(static_cast<std::uint64_t>(t));
    add(r.id);
    add(r.link);
    add(quantize(r.pos_m));
    add(quantize(r.speed_mps));
  }

  void add_bsm(const Bsm& b) {
    add(static_cast<std::uint64_t>(b.t));
    add(b.sender);
    add(std::bit_cast<std::uint64_t>(b.pos.lat));
    add(std::bit_cast<std::uint64_t>(b.pos.lon));
    add(std::bit_cast<std::uint64_t>(b.speed_mps));
    add(std::bit_cast<std::uint64_t>(b.heading_deg));
  }

private:
  std::uint64_t h_ = 0x636c6f7073ULL;
};

inline std::string hex_digest(std::uint64_t d) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
  return buf;
}

inline void write_record_row(std::ostream& os, const RoadGraph& g, Tick t, const VehicleRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.1f,%llu,%s,", tick_seconds(t), static_cast<unsigned long long>(r.id),
                r.kind == VehicleKind::CV ? "cv" : "noncv");
  os << buf << g.link(r.link).id;
  std::snprintf(buf, sizeof buf, ",%d,%.6f,%.6f\n", r.lane, r.pos_m, r.speed_mps);
  os << buf;
}

// ---------------------------------------------------------------- engine

namespace cosim_detail {

inline std::int64_t thread_cpu_ns() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<std::int64_t>(ts.tv_sec) * 1'000'000'000 + ts.tv_nsec;
}

inline constexpr std::uint64_t kRsuIdBase = 1ULL << 63;
inline constexpr int kBusyUnit = 256;

struct BsmMsg {
  Bsm bsm;
  LinkIndex link = 0;
  int origin = 0; // sender's comm partition
  int dest = 0;   // receiving comm partition
};

struct InformedMsg {
  VehicleId vehicle = 0;
  std::uint64_t advisory = 0;
  int partition = 0; // mobility partition holding the vehicle
};

/// Byte buffer used for cross-worker messages.
class Wire {
public:
  template <typename T>
  void put(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    if (pos_ + sizeof(T) > buf_.size()) {
      throw SimulationError("truncated exchange buffer");
    }
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  bool done() const { return pos_ >= buf_.size(); }
  void clear() {
    buf_.clear();
    pos_ = 0;
  }

private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

inline void put_vehicle(Wire& w, const Vehicle& v) {
  w.put(v.id);
  w.put(v.kind);
  w.put(v.link);
  w.put(v.lane);
  w.put(v.pos_m);
  w.put(v.speed_mps);
  w.put(static_cast<std::uint64_t>(v.route.size()));
  for (LinkIndex l : v.route) {
    w.put(l);
  }
  w.put(static_cast<std::uint64_t>(v.route_idx));
  w.put(v.params);
  w.put(v.depart_tick);
  w.put(static_cast<std::uint64_t>(v.flow));
  w.put(v.cv_draw);
  w.put(static_cast<std::uint64_t>(v.informed.size()));
  for (std::uint64_t a : v.informed) {
    w.put(a);
  }
  w.put(static_cast<std::uint8_t>(v.script ? 1 : 0));
}

template <typename ScriptLookup>
Vehicle get_vehicle(Wire& w, const ScriptLookup& scripts) {
  Vehicle v;
  v.id = w.get<VehicleId>();
  v.kind = w.get<VehicleKind>();
  v.link = w.get<LinkIndex>();
  v.lane = w.get<int>();
  v.pos_m = w.get<double>();
  v.speed_mps = w.get<double>();
  v.route.resize(w.get<std::uint64_t>());
  for (LinkIndex& l : v.route) {
    l = w.get<LinkIndex>();
  }
  v.route_idx = w.get<std::uint64_t>();
  v.params = w.get<IdmParams>();
  v.depart_tick = w.get<Tick>();
  v.flow = w.get<std::uint64_t>();
  v.cv_draw = w.get<double>();
  v.informed.resize(w.get<std::uint64_t>());
  for (std::uint64_t& a : v.informed) {
    a = w.get<std::uint64_t>();
  }
  if (w.get<std::uint8_t>() != 0) {
    v.script = scripts(v.id);
  }
  return v;
}

/// Messages from one worker to another within a frame.
struct Channel {
  std::vector<Handoff> handoffs;
  std::vector<BsmMsg> bsms;
  std::vector<InformedMsg> informed;
  Wire wire_handoffs;
  Wire wire_bsms;
  Wire wire_informed;
  std::uint64_t n_handoffs = 0;
  std::uint64_t n_bsms = 0;
  std::uint64_t n_informed = 0;
};

struct Box {
  double lat_min = 90.0;
  double lat_max = -90.0;
  double lon_min = 180.0;
  double lon_max = -180.0;

  void extend(const GeoPoint& p) {
    lat_min = std::min(lat_min, p.lat);
    lat_max = std::max(lat_max, p.lat);
    lon_min = std::min(lon_min, p.lon);
    lon_max = std::max(lon_max, p.lon);
  }
  bool empty() const { return lat_min > lat_max; }

  /// Grows the box by at least `m` metres in every direction.
  void pad(double m) {
    if (empty()) {
      return;
    }
    const double dlat = 1.5 * m / (kEarthRadiusKm * 1000.0) * 180.0 / std::numbers::pi;
    const double worst = std::min(89.0, std::max(std::fabs(lat_min), std::fabs(lat_max)) + dlat);
    const double dlon = dlat / std::cos(worst * std::numbers::pi / 180.0);
    lat_min -= dlat;
    lat_max += dlat;
    lon_min -= dlon;
    lon_max += dlon;
  }
  bool contains(const GeoPoint& p) const {
    return p.lat >= lat_min && p.lat <= lat_max && p.lon >= lon_min && p.lon <= lon_max;
  }
};

} // namespace cosim_detail

/// The partitioned co-simulation kernel. Each frame runs three phases
/// separated by barriers:
///   1. mobility: apply advisory notifications, step, route handoffs;
///   2. exchange: insert handoffs and departures, record state, route BSMs;
///      the traffic controller then checks conservation and extends the digest;
///   3. communication: deliver BSMs and advisories, route notifications;
///      the network controller then applies the next frame's commands.
/// All cross-worker application orders are sorted, so results do not depend
/// on the worker count.
class Engine {
public:
  Engine(SimConfig cfg, SimSinks sinks = {}) : cfg_(std::move(cfg)), sinks_(sinks) {
    cfg_.validate();
    const Scenario& sc = *cfg_.scenario;
    const RoadGraph& g = sc.graph;
    P_ = cfg_.workers;
    M_ = cfg_.mobility_plan.k;
    C_ = cfg_.comm_plan.k;
    link_owner_ = link_owners(g, cfg_.mobility_plan.assignment);
    comm_owner_ = link_owners(g, cfg_.comm_plan.assignment);
    world_ = WorldState(sc, cfg_.penetration.value_or(sc.demand.penetration_rate));
    rsus_ = place_rsus(sc);
    tails_ = TailBoard(g);
    frames_ = cfg_.frames();

    mob_.resize(static_cast<std::size_t>(M_));
    comm_.resize(static_cast<std::size_t>(C_));
    workers_.resize(static_cast<std::size_t>(P_));
    for (int m = 0; m < M_; ++m) {
      workers_[static_cast<std::size_t>(m % P_)].mob.push_back(m);
    }
    for (int c = 0; c < C_; ++c) {
      workers_[static_cast<std::size_t>(c % P_)].comm.push_back(c);
    }
    channels_.resize(static_cast<std::size_t>(P_ * P_));
    partition_ns_.assign(static_cast<std::size_t>(M_), 0);
    partition_ns_total_.assign(static_cast<std::size_t>(M_), 0);

    // Comm regions: every link a partition's receivers can be on, plus its RSUs.
    for (LinkIndex l = 0; l < g.link_count(); ++l) {
      auto& box = comm_[static_cast<std::size_t>(comm_owner_[l])].region;
      box.extend(g.node(g.from(l)).pos);
      box.extend(g.node(g.to(l)).pos);
    }
    for (std::size_t i = 0; i < rsus_.size(); ++i) {
      auto& cs = comm_[static_cast<std::size_t>(cfg_.comm_plan.assignment[rsus_[i].node])];
      cs.rsus.push_back({cosim_detail::kRsuIdBase | rsus_[i].node, rsus_[i].pos});
      cs.region.extend(rsus_[i].pos);
    }
    for (CommState& cs : comm_) {
      cs.region.pad(cfg_.reception.max_range_m());
    }

    std::vector<Vehicle> fleet;
    if (cfg_.mode == SimMode::HILS) {
      fleet = cfg_.feed->vehicles;
      for (Vehicle& v : fleet) {
        if (!v.script || v.script->samples.empty()) {
          throw ValidationError("replay vehicle " + std::to_string(v.id) + " has no script");
        }
        for (const ScriptSample& s : v.script->samples) {
          if (s.link >= g.link_count()) {
            throw ValidationError("replay vehicle " + std::to_string(v.id) + " references an unknown link");
          }
        }
        v.link = v.script->samples.front().link;
        v.depart_tick = v.script->samples.front().t;
        v.route = {v.link};
        scripts_[v.id] = v.script;
      }
      std::stable_sort(fleet.begin(), fleet.end(), [](const Vehicle& a, const Vehicle& b) {
        return a.depart_tick != b.depart_tick ? a.depart_tick < b.depart_tick : a.id < b.id;
      });
    } else {
      DemandSpec demand = sc.demand;
      demand.penetration_rate = world_.penetration;
      fleet = generate_fleet(demand, g, cfg_.seed, cfg_.idm);
    }
    fleet_size_ = fleet.size();
    bool any_cv = world_.penetration > 0.0;
    for (Vehicle& v : fleet) {
      any_cv = any_cv || v.kind == VehicleKind::CV;
      mob_[static_cast<std::size_t>(link_owner_[v.link])].pending.push_back(std::move(v));
    }
    lookahead_s_ = plan_lookahead(g, cfg_.mobility_plan, any_cv);

    for (const TimedCommand& tc : cfg_.commands) {
      if (tc.frame < 0) {
        throw ValidationError("command scheduled before frame 0");
      }
    }
    std::stable_sort(cfg_.commands.begin(), cfg_.commands.end(),
                     [](const TimedCommand& a, const TimedCommand& b) { return a.frame < b.frame; });
  }

  /// Runs to completion. `threaded` = false executes every worker inline.
  SimResult run(bool threaded) {
    using clock = std::chrono::steady_clock;
    if (sinks_.trajectory != nullptr) {
      write_trajectory_header(*sinks_.trajectory);
    }
    if (sinks_.bsms != nullptr) {
      write_bsm_header(*sinks_.bsms);
    }
    frame_ = 0;
    begin_frame();
    const auto start = clock::now();
    if (!threaded) {
      while (!stop_) {
        for (int w = 0; w < P_; ++w) {
          phase1(w);
        }
        complete1();
        for (int w = 0; w < P_; ++w) {
          phase2(w);
        }
        complete2();
        for (int w = 0; w < P_; ++w) {
          phase3(w);
        }
        complete3();
      }
    } else {
      std::barrier b1(P_, Completion{this, 1});
      std::barrier b2(P_, Completion{this, 2});
      std::barrier b3(P_, Completion{this, 3});
      std::vector<std::jthread> threads;
      for (int w = 0; w < P_; ++w) {
        threads.emplace_back([&, w] {
          while (!stop_) {
            phase1(w);
            b1.arrive_and_wait();
            phase2(w);
            b2.arrive_and_wait();
            phase3(w);
            b3.arrive_and_wait();
          }
        });
      }
      threads.clear();
    }
    result_.wall_s = std::chrono::duration<double>(clock::now() - start).count();
    if (!abort_message_.empty()) {
      throw SimulationError(abort_message_);
    }
    return finish();
  }

private:
  struct Completion {
    Engine* e;
    int which;
    void operator()() noexcept {
      if (which == 1) {
        e->complete1();
      } else if (which == 2) {
        e->complete2();
      } else {
        e->complete3();
      }
    }
  };

  struct MobilityState {
    std::vector<Vehicle> vehicles; // sorted by id
    std::vector<Vehicle> pending;  // by departure tick
  };

  struct CommState {
    std::vector<Receiver> rsus;
    cosim_detail::Box region;
    InformedSet informed;
  };

  struct WorkerState {
    std::vector<int> mob;
    std::vector<int> comm;
    std::vector<VehicleRecord> records;
    std::vector<Bsm> emitted;
    std::vector<Arrival> arrivals;
    std::size_t departed = 0;
    std::uint64_t deliveries = 0;
    std::uint64_t cross_deliveries = 0;
    std::uint64_t cross_messages = 0;
    std::uint64_t receptions = 0;
    std::uint64_t reroutes = 0;
    std::int64_t delivery_violations = 0;
    WorkerTiming frame;
    WorkerTiming total;
    std::string error;
  };

  cosim_detail::Channel& channel(int src, int dst) {
    return channels_[static_cast<std::size_t>(src * P_ + dst)];
  }
  int mob_worker(int m) const { return m % P_; }
  int comm_worker(int c) const { return c % P_; }
  const RoadGraph& graph() const { return cfg_.scenario->graph; }

  std::shared_ptr<const ScriptedTrace> script_of(VehicleId id) const {
    auto it = scripts_.find(id);
    return it == scripts_.end() ? nullptr : it->second;
  }

  void busy(std::uint64_t seed) {
    const int n = static_cast<int>(cfg_.comm_work_factor * cosim_detail::kBusyUnit);
    std::uint64_t x = seed;
    for (int i = 0; i < n; ++i) {
      x = mix64(x);
    }
    sink_.fetch_xor(x, std::memory_order_relaxed);
  }

  void fail(int w, const std::string& where, const std::exception& e) {
    workers_[static_cast<std::size_t>(w)].error = where + " frame " + std::to_string(frame_) + ": " + e.what();
    failed_.store(true);
  }

  // Phase 1: notifications, mobility step, outgoing handoffs.
  void phase1(int w) {
    using cosim_detail::thread_cpu_ns;
    WorkerState& ws = workers_[static_cast<std::size_t>(w)];
    if (failed_.load()) {
      return;
    }
    ws.frame = {};
    const std::int64_t t0 = thread_cpu_ns();
    std::int64_t xchg = 0;
    int current = -1;
    try {
      // Advisory notifications routed here during the previous frame.
      std::vector<cosim_detail::InformedMsg> inbox;
      for (int src = 0; src < P_; ++src) {
        auto& ch = channel(src, w);
        if (src == w) {
          inbox.insert(inbox.end(), ch.informed.begin(), ch.informed.end());
          ch.informed.clear();
        } else {
          const std::int64_t x0 = thread_cpu_ns();
          for (std::uint64_t i = 0; i < ch.n_informed; ++i) {
            cosim_detail::InformedMsg m;
            m.vehicle = ch.wire_informed.get<VehicleId>();
            m.advisory = ch.wire_informed.get<std::uint64_t>();
            m.partition = ch.wire_informed.get<int>();
            inbox.push_back(m);
          }
          ch.wire_informed.clear();
          ch.n_informed = 0;
          xchg += thread_cpu_ns() - x0;
        }
      }
      std::sort(inbox.begin(), inbox.end(), [](const auto& a, const auto& b) {
        return std::tie(a.partition, a.vehicle, a.advisory) < std::tie(b.partition, b.vehicle, b.advisory);
      });
      for (const auto& msg : inbox) {
        current = msg.partition;
        auto& vs = mob_[static_cast<std::size_t>(msg.partition)].vehicles;
        auto it = std::lower_bound(vs.begin(), vs.end(), msg.vehicle,
                                   [](const Vehicle& v, VehicleId id) { return v.id < id; });
        const Advisory* a = world_.advisory(msg.advisory);
        if (it == vs.end() || it->id != msg.vehicle || a == nullptr) {
          ++ws.delivery_violations;
          continue;
        }
        if (apply_informed(*it, *a, graph(), world_.advisories, cfg_.advisory_multiplier) && !it->script) {
          ++ws.reroutes;
        }
      }

      for (int m : ws.mob) {
        current = m;
        const std::int64_t p0 = thread_cpu_ns();
        StepContext ctx;
        ctx.graph = &graph();
        ctx.signals = &world_.signals;
        ctx.closures = &world_.closures;
        ctx.tails = &tails_;
        ctx.link_owner = &link_owner_;
        ctx.partition = m;
        ctx.t = frame_;
        StepOutput out = step_partition(mob_[static_cast<std::size_t>(m)].vehicles, ctx);
        ws.arrivals.insert(ws.arrivals.end(), out.arrivals.begin(), out.arrivals.end());
        partition_ns_[static_cast<std::size_t>(m)] = thread_cpu_ns() - p0;
        for (Handoff& h : out.handoffs) {
          if (h.to_partition < 0 || h.to_partition >= M_) {
            throw SimulationError("handoff to nonexistent partition " + std::to_string(h.to_partition));
          }
          const int dst = mob_worker(h.to_partition);
          auto& ch = channel(w, dst);
          if (dst == w) {
            ch.handoffs.push_back(std::move(h));
          } else {
            const std::int64_t x0 = thread_cpu_ns();
            ch.wire_handoffs.put(h.to_partition);
            cosim_detail::put_vehicle(ch.wire_handoffs, h.vehicle);
            ++ch.n_handoffs;
            ++ws.cross_messages;
            xchg += thread_cpu_ns() - x0;
          }
        }
      }
    } catch (const std::exception& e) {
      fail(w, "partition " + std::to_string(current), e);
    }
    ws.frame.compute_ns += thread_cpu_ns() - t0 - xchg;
    ws.frame.exchange_ns += xchg;
  }

  // Phase 2: inbound handoffs, departures, state records, BSM routing.
  void phase2(int w) {
    using cosim_detail::thread_cpu_ns;
    WorkerState& ws = workers_[static_cast<std::size_t>(w)];
    if (failed_.load()) {
      return;
    }
    const std::int64_t t0 = thread_cpu_ns();
    std::int64_t xchg = 0;
    int current = -1;
    try {
      std::vector<Handoff> inbox;
      for (int src = 0; src < P_; ++src) {
        auto& ch = channel(src, w);
        if (src == w) {
          for (Handoff& h : ch.handoffs) {
            inbox.push_back(std::move(h));
          }
          ch.handoffs.clear();
        } else {
          const std::int64_t x0 = thread_cpu_ns();
          for (std::uint64_t i = 0; i < ch.n_handoffs; ++i) {
            Handoff h;
            h.to_partition = ch.wire_handoffs.get<int>();
            h.vehicle = cosim_detail::get_vehicle(ch.wire_handoffs, [&](VehicleId id) { return script_of(id); });
            inbox.push_back(std::move(h));
          }
          ch.wire_handoffs.clear();
          ch.n_handoffs = 0;
          xchg += thread_cpu_ns() - x0;
        }
      }
      std::sort(inbox.begin(), inbox.end(), [](const Handoff& a, const Handoff& b) {
        return a.to_partition != b.to_partition ? a.to_partition < b.to_partition : a.vehicle.id < b.vehicle.id;
      });
      for (Handoff& h : inbox) {
        if (mob_worker(h.to_partition) != w) {
          throw SimulationError("handoff for partition " + std::to_string(h.to_partition) + " reached worker " +
                                std::to_string(w));
        }
        mob_[static_cast<std::size_t>(h.to_partition)].vehicles.push_back(std::move(h.vehicle));
      }

      const Tick t_new = frame_ + 1;
      const RoadGraph& g = graph();
      for (int m : ws.mob) {
        current = m;
        const std::int64_t p0 = thread_cpu_ns();
        MobilityState& ms = mob_[static_cast<std::size_t>(m)];
        std::sort(ms.vehicles.begin(), ms.vehicles.end(),
                  [](const Vehicle& a, const Vehicle& b) { return a.id < b.id; });
        if (cfg_.mode == SimMode::CLSim) {
          for (Vehicle& v : ms.pending) {
            if (v.depart_tick > t_new) {
              break;
            }
            v.kind = v.cv_draw < world_.penetration ? VehicleKind::CV : VehicleKind::NonCV;
          }
        }
        ws.departed += insert_departures(ms.vehicles, ms.pending, g, world_.closures, t_new);
        for (const Vehicle& v : ms.vehicles) {
          ws.records.push_back({v.id, v.kind, v.link, v.lane, v.pos_m, v.speed_mps, v.params.length, m,
                                static_cast<std::uint32_t>(v.informed.size()), v.script != nullptr});
          if (v.kind != VehicleKind::CV) {
            continue;
          }
          const Bsm b = make_bsm(g, v, t_new);
          ws.emitted.push_back(b);
          const int own = comm_owner_[v.link];
          for (int c = 0; c < C_; ++c) {
            if (c != own && !comm_[static_cast<std::size_t>(c)].region.contains(b.pos)) {
              continue;
            }
            const int dst = comm_worker(c);
            auto& ch = channel(w, dst);
            if (dst == w) {
              ch.bsms.push_back({b, v.link, own, c});
            } else {
              const std::int64_t x0 = thread_cpu_ns();
              ch.wire_bsms.put(cosim_detail::BsmMsg{b, v.link, own, c});
              ++ch.n_bsms;
              ++ws.cross_messages;
              busy(b.sender ^ static_cast<std::uint64_t>(c));
              xchg += thread_cpu_ns() - x0;
            }
          }
        }
        partition_ns_[static_cast<std::size_t>(m)] += thread_cpu_ns() - p0;
      }
    } catch (const std::exception& e) {
      fail(w, "partition " + std::to_string(current), e);
    }
    ws.frame.compute_ns += thread_cpu_ns() - t0 - xchg;
    ws.frame.exchange_ns += xchg;
  }

  // Phase 3: BSM deliveries and advisory dissemination per comm partition.
  void phase3(int w) {
    using cosim_detail::thread_cpu_ns;
    WorkerState& ws = workers_[static_cast<std::size_t>(w)];
    if (failed_.load()) {
      return;
    }
    const std::int64_t t0 = thread_cpu_ns();
    std::int64_t xchg = 0;
    int current = -1;
    try {
      std::vector<cosim_detail::BsmMsg> inbox;
      for (int src = 0; src < P_; ++src) {
        auto& ch = channel(src, w);
        if (src == w) {
          inbox.insert(inbox.end(), ch.bsms.begin(), ch.bsms.end());
          ch.bsms.clear();
        } else {
          const std::int64_t x0 = thread_cpu_ns();
          for (std::uint64_t i = 0; i < ch.n_bsms; ++i) {
            inbox.push_back(ch.wire_bsms.get<cosim_detail::BsmMsg>());
            busy(inbox.back().bsm.sender);
          }
          ch.wire_bsms.clear();
          ch.n_bsms = 0;
          xchg += thread_cpu_ns() - x0;
        }
      }
      std::sort(inbox.begin(), inbox.end(), [](const auto& a, const auto& b) {
        return a.dest != b.dest ? a.dest < b.dest : a.bsm.sender < b.bsm.sender;
      });
      const Tick t_new = frame_ + 1;
      auto begin = inbox.begin();
      for (int c : ws.comm) {
        current = c;
        auto end = std::find_if(begin, inbox.end(), [&](const auto& m) { return m.dest != c; });
        std::span<const cosim_detail::BsmMsg> msgs(begin, end);
        begin = end;
        CommState& cs = comm_[static_cast<std::size_t>(c)];

        std::vector<Receiver> receivers = cs.rsus;
        std::vector<Receiver> own_cvs;
        std::vector<LinkIndex> own_links;
        for (std::size_t i = 0; i < msgs.size(); ++i) {
          const auto& m = msgs[i];
          if (!std::binary_search(emitted_senders_.begin(), emitted_senders_.end(), m.bsm.sender) ||
              (i > 0 && msgs[i - 1].bsm.sender == m.bsm.sender)) {
            ++ws.delivery_violations;
          }
          if (m.origin == c) {
            receivers.push_back({m.bsm.sender, m.bsm.pos});
            own_cvs.push_back({m.bsm.sender, m.bsm.pos});
            own_links.push_back(m.link);
          }
        }
        for (const auto& m : msgs) {
          const std::size_t got = deliver(m.bsm, receivers, cfg_.reception, cfg_.seed).size();
          ws.deliveries += got;
          if (m.origin != c) {
            ws.cross_deliveries += got;
          }
        }
        for (const Advisory& a : world_.advisories) {
          const auto reached = disseminate_advisory(a, rsus_, own_cvs, cfg_.reception, t_new, cfg_.seed);
          for (VehicleId id : cs.informed.record(a.id, reached)) {
            ++ws.receptions;
            const auto pos = static_cast<std::size_t>(
                std::lower_bound(own_cvs.begin(), own_cvs.end(), id,
                                 [](const Receiver& r, VehicleId v) { return r.id < v; }) -
                own_cvs.begin());
            const int part = link_owner_[own_links[pos]];
            const int dst = mob_worker(part);
            auto& ch = channel(w, dst);
            if (dst == w) {
              ch.informed.push_back({id, a.id, part});
            } else {
              const std::int64_t x0 = thread_cpu_ns();
              ch.wire_informed.put(id);
              ch.wire_informed.put(a.id);
              ch.wire_informed.put(part);
              ++ch.n_informed;
              ++ws.cross_messages;
              xchg += thread_cpu_ns() - x0;
            }
          }
        }
      }
    } catch (const std::exception& e) {
      fail(w, "comm partition " + std::to_string(current), e);
    }
    ws.frame.compute_ns += thread_cpu_ns() - t0 - xchg;
    ws.frame.exchange_ns += xchg;
  }

  void complete1() noexcept {}

  // Traffic controller: conservation checks, digest, logs, tail board.
  void complete2() noexcept {
    if (failed_.load()) {
      return;
    }
    try {
      const Tick t_new = frame_ + 1;
      records_.clear();
      std::vector<Bsm> bsms;
      for (WorkerState& ws : workers_) {
        records_.insert(records_.end(), ws.records.begin(), ws.records.end());
        bsms.insert(bsms.end(), ws.emitted.begin(), ws.emitted.end());
        departed_ += ws.departed;
        for (const Arrival& a : ws.arrivals) {
          arrivals_.push_back(a);
        }
        ws.records.clear();
        ws.emitted.clear();
        ws.arrivals.clear();
        ws.departed = 0;
      }
      std::sort(records_.begin(), records_.end(),
                [](const VehicleRecord& a, const VehicleRecord& b) { return a.id < b.id; });
      std::sort(bsms.begin(), bsms.end(), [](const Bsm& a, const Bsm& b) { return a.sender < b.sender; });

      ConservationReport& cr = result_.conservation;
      ++cr.frames_checked;
      if (records_.size() + arrivals_.size() != departed_) {
        ++cr.vehicle_violations;
        cr.note("frame " + std::to_string(frame_) + ": " + std::to_string(records_.size()) + " in network, " +
                std::to_string(departed_) + " departed, " + std::to_string(arrivals_.size()) + " arrived");
      }
      std::size_t cvs = 0;
      emitted_senders_.clear();
      for (std::size_t i = 0; i < records_.size(); ++i) {
        const VehicleRecord& r = records_[i];
        if (i > 0 && records_[i - 1].id == r.id) {
          ++cr.duplicate_violations;
          cr.note("frame " + std::to_string(frame_) + ": vehicle " + std::to_string(r.id) + " duplicated");
        }
        if (link_owner_[r.link] != r.partition) {
          ++cr.ownership_violations;
        }
        if (r.kind == VehicleKind::CV) {
          ++cvs;
          emitted_senders_.push_back(r.id);
        }
      }
      if (bsms.size() != cvs) {
        ++cr.bsm_violations;
        cr.note("frame " + std::to_string(frame_) + ": " + std::to_string(bsms.size()) + " BSMs for " +
                std::to_string(cvs) + " CVs");
      } else {
        for (std::size_t i = 0; i < bsms.size(); ++i) {
          if (bsms[i].sender != emitted_senders_[i]) {
            ++cr.bsm_violations;
            break;
          }
        }
      }

      for (const VehicleRecord& r : records_) {
        digest_.add_record(t_new, r);
      }
      for (const Bsm& b : bsms) {
        cv_digest_.add_bsm(b);
      }
      result_.bsms += bsms.size();
      if (sinks_.trajectory != nullptr) {
        for (const VehicleRecord& r : records_) {
          write_record_row(*sinks_.trajectory, graph(), t_new, r);
        }
      }
      if (sinks_.bsms != nullptr) {
        for (const Bsm& b : bsms) {
          write_bsm_row(*sinks_.bsms, b);
        }
      }

      tails_.clear();
      for (const VehicleRecord& r : records_) {
        if (r.scripted) {
          continue;
        }
        LaneTail& tail = tails_.at(r.link, r.lane);
        const double back = r.pos_m - r.length_m;
        if (back < tail.back_m) {
          tail = {back, r.speed_mps};
        }
      }
    } catch (const std::exception& e) {
      abort_message_ = std::string("controller frame ") + std::to_string(frame_) + ": " + e.what();
      failed_.store(true);
    }
  }

  // Network controller: statistics, observers, next frame's commands.
  void complete3() noexcept {
    try {
      if (failed_.load()) {
        for (const WorkerState& ws : workers_) {
          if (!ws.error.empty() && abort_message_.empty()) {
            abort_message_ = ws.error;
          }
        }
        if (abort_message_.empty()) {
          abort_message_ = "run aborted at frame " + std::to_string(frame_);
        }
        stop_ = true;
        return;
      }
      std::vector<WorkerTiming> frame_timing;
      for (WorkerState& ws : workers_) {
        result_.deliveries += ws.deliveries;
        result_.cross_partition_deliveries += ws.cross_deliveries;
        result_.cross_worker_messages += ws.cross_messages;
        result_.advisory_receptions += ws.receptions;
        result_.reroutes += ws.reroutes;
        result_.conservation.delivery_violations += ws.delivery_violations;
        ws.deliveries = ws.cross_deliveries = ws.cross_messages = ws.receptions = ws.reroutes = 0;
        ws.delivery_violations = 0;
        ws.total.compute_ns += ws.frame.compute_ns;
        ws.total.exchange_ns += ws.frame.exchange_ns;
        frame_timing.push_back(ws.frame);
      }
      for (std::size_t m = 0; m < partition_ns_.size(); ++m) {
        partition_ns_total_[m] += partition_ns_[m];
      }
      if (sinks_.hooks != nullptr) {
        FrameView view;
        view.frame = frame_;
        view.vehicles = records_;
        view.world = &world_;
        view.worker_timing = frame_timing;
        view.partition_compute = partition_ns_;
        for (const VehicleRecord& r : records_) {
          view.informed_cvs += r.kind == VehicleKind::CV && r.informed > 0 ? 1 : 0;
        }
        sinks_.hooks->after_frame(view);
      }
      ++frame_;
      if (frame_ >= frames_ || (sinks_.hooks != nullptr && sinks_.hooks->stop_requested())) {
        stop_ = true;
        return;
      }
      begin_frame();
    } catch (const std::exception& e) {
      abort_message_ = std::string("controller frame ") + std::to_string(frame_) + ": " + e.what();
      failed_.store(true);
      stop_ = true;
    }
  }

  void apply(const Command& c) {
    if (!affects_world(c)) {
      return;
    }
    try {
      validate_command(c, *cfg_.scenario, rsus_, &world_);
      apply_to_world(world_, *cfg_.scenario, rsus_, c, frame_);
    } catch (const ValidationError& e) {
      result_.rejected_commands.push_back("frame " + std::to_string(frame_) + " command " + std::to_string(c.id) +
                                          ": " + e.what());
    }
  }

  void begin_frame() {
    if (frames_ == 0) {
      stop_ = true;
      return;
    }
    while (next_command_ < cfg_.commands.size() && cfg_.commands[next_command_].frame <= frame_) {
      apply(cfg_.commands[next_command_++].command);
    }
    if (sinks_.hooks != nullptr) {
      std::vector<Command> live;
      sinks_.hooks->before_frame(frame_, live);
      if (sinks_.hooks->stop_requested()) {
        stop_ = true;
        return;
      }
      for (const Command& c : live) {
        apply(c);
      }
    }
  }

  SimResult finish() {
    SimResult r = std::move(result_);
    r.digest = digest_.value();
    r.cv_digest = cv_digest_.value();
    r.frames = frame_;
    r.workers = P_;
    r.fleet = fleet_size_;
    r.departed = departed_;
    r.arrived = arrivals_.size();
    r.in_network = records_.size();
    std::sort(arrivals_.begin(), arrivals_.end(), [](const Arrival& a, const Arrival& b) {
      return a.arrive_tick != b.arrive_tick ? a.arrive_tick < b.arrive_tick : a.id < b.id;
    });
    r.arrivals = std::move(arrivals_);
    r.applied_commands = world_.applied;
    for (const WorkerState& ws : workers_) {
      r.worker_timing.push_back(ws.total);
    }
    r.partition_compute_ns = partition_ns_total_;
    r.lookahead_s = lookahead_s_;
    return r;
  }

  SimConfig cfg_;
  SimSinks sinks_;
  int P_ = 1;
  int M_ = 1;
  int C_ = 1;
  Tick frames_ = 0;
  Tick frame_ = 0;
  std::vector<int> link_owner_;
  std::vector<int> comm_owner_;
  WorldState world_;
  std::vector<Rsu> rsus_;
  TailBoard tails_;
  std::vector<MobilityState> mob_;
  std::vector<CommState> comm_;
  std::vector<WorkerState> workers_;
  std::vector<cosim_detail::Channel> channels_;
  std::unordered_map<VehicleId, std::shared_ptr<const ScriptedTrace>> scripts_;
  std::vector<std::int64_t> partition_ns_;
  std::vector<std::int64_t> partition_ns_total_;
  std::vector<VehicleRecord> records_;
  std::vector<VehicleId> emitted_senders_;
  std::vector<Arrival> arrivals_;
  std::size_t departed_ = 0;
  std::size_t fleet_size_ = 0;
  std::size_t next_command_ = 0;
  Digest digest_;
  Digest cv_digest_;
  SimResult result_;
  double lookahead_s_ = 0.0;
  bool stop_ = false;
  std::atomic<bool> failed_{false};
  std::atomic<std::uint64_t> sink_{0};
  std::string abort_message_;
};

/// Every partition on one thread, in partition order. Ignores `workers`.
inline SimResult run_sequential(SimConfig cfg, SimSinks sinks = {}) {
  cfg.workers = 1;
  return Engine(std::move(cfg), sinks).run(false);
}

inline SimResult run_parallel(SimConfig cfg, SimSinks sinks = {}) {
  const bool check = cfg.self_check;
  SimConfig copy = cfg;
  SimResult r = Engine(std::move(cfg), sinks).run(true);
  if (check) {
    const SimResult ref = run_sequential(std::move(copy));
    if (ref.digest != r.digest || ref.cv_digest != r.cv_digest) {
      throw SimulationError("digest divergence: parallel " + hex_digest(r.digest) + " vs sequential " +
                            hex_digest(ref.digest));
    }
  }
  return r;
}

// ---------------------------------------------------------------- scaling

struct ScalingRow {
  int workers = 1;
  double compute_fraction = 0.0;
  double exchange_fraction = 0.0;
  double wall_s = 0.0;
  double speedup = 1.0;
  bool crossover = false; // exchange fraction >= compute fraction
};

struct ScalingReport {
  std::vector<ScalingRow> rows;
  std::optional<int> p_star; // smallest P with a crossover
};

/// Fractions of worker capacity (P x wall time) spent computing and
/// exchanging for one run.
inline std::pair<double, double> time_fractions(const SimResult& r) {
  double c = 0.0;
  double x = 0.0;
  for (const WorkerTiming& t : r.worker_timing) {
    c += static_cast<double>(t.compute_ns);
    x += static_cast<double>(t.exchange_ns);
  }
  const double cap = r.wall_s * 1e9 * static_cast<double>(r.worker_timing.size());
  if (cap <= 0.0) {
    return {0.0, 0.0};
  }
  return {c / cap, x / cap};
}

inline ScalingReport scaling_harness(const SimConfig& base, const std::vector<int>& ps, int repetitions = 3) {
  if (ps.empty()) {
    throw ValidationError("scaling harness needs at least one worker count");
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  ScalingReport rep;
  double base_wall = 0.0;
  for (int p : ps) {
    std::vector<double> cf;
    std::vector<double> xf;
    std::vector<double> wall;
    for (int i = 0; i < std::max(1, repetitions); ++i) {
      SimConfig cfg = base;
      cfg.workers = p;
      const SimResult r = run_parallel(cfg);
      const auto [c, x] = time_fractions(r);
      cf.push_back(c);
      xf.push_back(x);
      wall.push_back(r.wall_s);
    }
    ScalingRow row;
    row.workers = p;
    row.compute_fraction = median(cf);
    row.exchange_fraction = median(xf);
    row.wall_s = median(wall);
    if (rep.rows.empty()) {
      base_wall = row.wall_s;
    }
    row.speedup = row.wall_s > 0.0 ? base_wall / row.wall_s : 1.0;
    row.crossover = row.exchange_fraction >= row.compute_fraction && row.exchange_fraction > 0.0;
    if (row.crossover && (!rep.p_star || p < *rep.p_star)) {
      rep.p_star = p;
    }
    rep.rows.push_back(row);
  }
  return rep;
}

// ---------------------------------------------------------------- outputs

inline void write_arrivals_csv(std::ostream& os, const SimResult& r) {
  os << "vehicle_id,kind,flow,depart_t,arrive_t,travel_time_s,informed\n";
  char buf[200];
  for (const Arrival& a : r.arrivals) {
    std::snprintf(buf, sizeof buf, "%llu,%s,%zu,%.1f,%.1f,%.1f,%d\n", static_cast<unsigned long long>(a.id),
                  a.kind == VehicleKind::CV ? "cv" : "noncv", a.flow, tick_seconds(a.depart_tick),
                  tick_seconds(a.arrive_tick), tick_seconds(a.arrive_tick - a.depart_tick), a.informed ? 1 : 0);
    os << buf;
  }
}

inline nlohmann::json result_to_json(const SimResult& r) {
  nlohmann::json timing = nlohmann::json::array();
  for (const WorkerTiming& t : r.worker_timing) {
    timing.push_back({{"compute_ns", t.compute_ns}, {"exchange_ns", t.exchange_ns}});
  }
  const auto [cf, xf] = time_fractions(r);
  const ConservationReport& c = r.conservation;
  return {
      {"digest", hex_digest(r.digest)},
      {"cv_digest", hex_digest(r.cv_digest)},
      {"frames", r.frames},
      {"workers", r.workers},
      {"fleet", r.fleet},
      {"departed", r.departed},
      {"arrived", r.arrived},
      {"in_network", r.in_network},
      {"bsms", r.bsms},
      {"deliveries", r.deliveries},
      {"cross_partition_deliveries", r.cross_partition_deliveries},
      {"cross_worker_messages", r.cross_worker_messages},
      {"advisory_receptions", r.advisory_receptions},
      {"reroutes", r.reroutes},
      {"lookahead_s", std::isinf(r.lookahead_s) ? nlohmann::json(nullptr) : nlohmann::json(r.lookahead_s)},
      {"wall_s", r.wall_s},
      {"compute_fraction", cf},
      {"exchange_fraction", xf},
      {"worker_timing", timing},
      {"rejected_commands", r.rejected_commands},
      {"conservation",
       {{"frames_checked", c.frames_checked},
        {"vehicle_violations", c.vehicle_violations},
        {"duplicate_violations", c.duplicate_violations},
        {"ownership_violations", c.ownership_violations},
        {"bsm_violations", c.bsm_violations},
        {"delivery_violations", c.delivery_violations}}},
  };
}

} // namespace clops
