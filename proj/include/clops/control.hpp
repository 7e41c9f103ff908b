#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "clops/command.hpp"
#include "clops/commnet.hpp"
#include "clops/cosim.hpp"
#include "clops/error.hpp"
#include "clops/partitioner.hpp"
#include "clops/scenario.hpp"

namespace clops {

// ---------------------------------------------------------------- config files

inline nlohmann::json reception_to_json(const ReceptionModel& m) {
  if (const auto* u = std::get_if<UnitDisk>(&m.kind)) {
    return {{"model", "unit_disk"}, {"radius_m", u->radius_m}};
  }
  const auto& l = std::get<LogDistance>(m.kind);
  return {{"model", "log_distance"}, {"ref_range_m", l.ref_range_m},   {"exponent", l.exponent},
          {"p0_dbm", l.p0_dbm},      {"threshold_dbm", l.threshold_dbm}, {"fading_sigma_db", l.fading_sigma_db}};
}

inline ReceptionModel reception_from_json(const nlohmann::json& j) {
  using namespace scenario_detail;
  ReceptionModel m;
  const std::string model = get_string(j, "model", "reception");
  if (model == "unit_disk") {
    m.kind = UnitDisk{get_number(j, "radius_m", "reception")};
  } else if (model == "log_distance") {
    LogDistance l;
    l.ref_range_m = get_number(j, "ref_range_m", "reception");
    l.exponent = get_number(j, "exponent", "reception");
    l.p0_dbm = get_number(j, "p0_dbm", "reception");
    l.threshold_dbm = get_number(j, "threshold_dbm", "reception");
    l.fading_sigma_db = get_number(j, "fading_sigma_db", "reception");
    m.kind = l;
  } else {
    throw SchemaError("reception.model", "expected unit_disk|log_distance");
  }
  m.validate();
  return m;
}

inline nlohmann::json idm_to_json(const IdmParams& p) {
  return {{"v0", p.v0}, {"T", p.T}, {"a_max", p.a_max}, {"b_comf", p.b_comf}, {"s0", p.s0}, {"length", p.length}};
}

inline IdmParams idm_from_json(const nlohmann::json& j) {
  using namespace scenario_detail;
  IdmParams p;
  p.v0 = get_number(j, "v0", "idm");
  p.T = get_number(j, "T", "idm");
  p.a_max = get_number(j, "a_max", "idm");
  p.b_comf = get_number(j, "b_comf", "idm");
  p.s0 = get_number(j, "s0", "idm");
  p.length = get_number(j, "length", "idm");
  return p;
}

/// Everything needed to re-run a CLSim configuration; scheduled commands are
/// stored separately in a RunRecord.
inline nlohmann::json config_to_json(const SimConfig& cfg) {
  if (cfg.mode != SimMode::CLSim) {
    throw ValidationError("only CLSim configurations can be recorded");
  }
  const RoadGraph& g = cfg.scenario->graph;
  auto plan = [&](const PartitionPlan& p) {
    return plan_to_json(p, g, cut_metrics(link_weights(g, p.mode), p));
  };
  nlohmann::json j = {{"scenario", scenario_to_json(*cfg.scenario)},
                      {"mobility_plan", plan(cfg.mobility_plan)},
                      {"comm_plan", plan(cfg.comm_plan)},
                      {"workers", cfg.workers},
                      {"seed", cfg.seed},
                      {"duration_s", cfg.duration_s},
                      {"reception", reception_to_json(cfg.reception)},
                      {"comm_work_factor", cfg.comm_work_factor},
                      {"idm", idm_to_json(cfg.idm)},
                      {"advisory_multiplier", cfg.advisory_multiplier}};
  j["penetration"] = cfg.penetration ? nlohmann::json(*cfg.penetration) : nlohmann::json(nullptr);
  return j;
}

inline SimConfig config_from_json(const nlohmann::json& j) {
  using namespace scenario_detail;
  SimConfig cfg;
  auto sc = std::make_shared<Scenario>(parse_scenario(require(j, "scenario", "config").dump()));
  cfg.mobility_plan = plan_from_json(require(j, "mobility_plan", "config"), sc->graph);
  cfg.comm_plan = plan_from_json(require(j, "comm_plan", "config"), sc->graph);
  cfg.scenario = std::move(sc);
  cfg.workers = get_int(j, "workers", "config");
  cfg.seed = require(j, "seed", "config").get<std::uint64_t>();
  cfg.duration_s = get_number(j, "duration_s", "config");
  cfg.reception = reception_from_json(require(j, "reception", "config"));
  cfg.comm_work_factor = get_number(j, "comm_work_factor", "config");
  cfg.idm = idm_from_json(require(j, "idm", "config"));
  cfg.advisory_multiplier = get_number(j, "advisory_multiplier", "config");
  if (j.contains("penetration") && !j.at("penetration").is_null()) {
    cfg.penetration = get_number(j, "penetration", "config");
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------- run records

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h = (h ^ c) * 0x100000001b3ULL;
  }
  return h;
}

struct ManifestEntry {
  std::string name; // relative to the record's directory
  std::uint64_t bytes = 0;
  std::string checksum;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot read " + p.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, std::string_view text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) {
    throw ValidationError("cannot write " + p.string());
  }
  out << text;
}

inline ManifestEntry manifest_entry(const std::filesystem::path& dir, const std::string& name) {
  const std::string bytes = read_file(dir / name);
  return {name, bytes.size(), hex_digest(fnv1a64(bytes))};
}

/// A finished run: enough to replay it and to check its output files.
struct RunRecord {
  SimConfig config;                  // duration covers the frames actually run
  std::vector<TimedCommand> commands; // every accepted command with its effect frame
  std::uint64_t digest = 0;
  std::uint64_t cv_digest = 0;
  Tick frames = 0;
  std::vector<ManifestEntry> outputs;
};

inline constexpr const char* kRunRecordFormat = "clops-run/1";

inline nlohmann::json record_body(const RunRecord& r) {
  nlohmann::json cmds = nlohmann::json::array();
  for (const TimedCommand& c : r.commands) {
    cmds.push_back({{"frame", c.frame}, {"command", command_to_json(c.command)}});
  }
  nlohmann::json outs = nlohmann::json::array();
  for (const ManifestEntry& m : r.outputs) {
    outs.push_back({{"name", m.name}, {"bytes", m.bytes}, {"checksum", m.checksum}});
  }
  return {{"format", kRunRecordFormat},
          {"config", config_to_json(r.config)},
          {"commands", cmds},
          {"digest", hex_digest(r.digest)},
          {"cv_digest", hex_digest(r.cv_digest)},
          {"frames", r.frames},
          {"outputs", outs}};
}

inline nlohmann::json record_to_json(const RunRecord& r) {
  nlohmann::json j = record_body(r);
  j["checksum"] = hex_digest(fnv1a64(j.dump()));
  return j;
}

inline std::uint64_t parse_hex64(const std::string& s, const char* what) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw IntegrityError(std::string("run record: bad ") + what);
  }
  return v;
}

/// Parses and verifies a record. `dir`, when given, is where the manifest's
/// files live; each must exist with the recorded size and checksum.
inline RunRecord record_from_json(const nlohmann::json& j, const std::optional<std::filesystem::path>& dir = {}) {
  if (!j.is_object() || !j.contains("checksum") || !j.at("checksum").is_string()) {
    throw IntegrityError("run record: missing checksum");
  }
  nlohmann::json body = j;
  body.erase("checksum");
  if (hex_digest(fnv1a64(body.dump())) != j.at("checksum").get<std::string>()) {
    throw IntegrityError("run record: checksum mismatch");
  }
  if (body.value("format", "") != kRunRecordFormat) {
    throw IntegrityError("run record: unknown format");
  }
  RunRecord r;
  try {
    r.config = config_from_json(body.at("config"));
    for (const auto& c : body.at("commands")) {
      r.commands.push_back({c.at("frame").get<Tick>(), command_from_json(c.at("command"))});
    }
    r.frames = body.at("frames").get<Tick>();
    for (const auto& m : body.at("outputs")) {
      r.outputs.push_back({m.at("name").get<std::string>(), m.at("bytes").get<std::uint64_t>(),
                           m.at("checksum").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("run record: ") + e.what());
  }
  r.digest = parse_hex64(body.at("digest").get<std::string>(), "digest");
  r.cv_digest = parse_hex64(body.at("cv_digest").get<std::string>(), "cv_digest");
  if (dir) {
    for (const ManifestEntry& m : r.outputs) {
      if (!std::filesystem::exists(*dir / m.name)) {
        throw IntegrityError("manifest lists missing file " + m.name);
      }
      if (manifest_entry(*dir, m.name) != m) {
        throw IntegrityError("manifest mismatch for " + m.name);
      }
    }
  }
  return r;
}

inline void save_run(const RunRecord& r, const std::filesystem::path& path) {
  write_file(path, record_to_json(r).dump(2) + "\n");
}

/// Loads and verifies a record file; output files are checked relative to its
/// directory.
inline RunRecord load_run(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    throw IntegrityError("run record " + path.string() + " is truncated or malformed");
  }
  return record_from_json(j, path.parent_path());
}

/// Re-runs a record headless: its configuration plus the world-changing
/// commands at their recorded frames.
inline SimResult replay_run(const RunRecord& r, SimSinks sinks = {}) {
  SimConfig cfg = r.config;
  cfg.commands.clear();
  for (const TimedCommand& c : r.commands) {
    if (affects_world(c.command)) {
      cfg.commands.push_back(c);
    }
  }
  std::stable_sort(cfg.commands.begin(), cfg.commands.end(),
                   [](const TimedCommand& a, const TimedCommand& b) { return a.frame < b.frame; });
  cfg.duration_s = tick_seconds(r.frames);
  return run_sequential(std::move(cfg), sinks);
}

// ---------------------------------------------------------------- snapshots

inline std::string_view to_string(Aspect a) {
  switch (a) {
  case Aspect::Green:
    return "green";
  case Aspect::Yellow:
    return "yellow";
  case Aspect::Red:
    return "red";
  }
  return "?";
}

/// One frame of live state as JSON.
inline nlohmann::json snapshot_json(const FrameView& v, const Scenario& sc, int mobility_partitions) {
  const RoadGraph& g = sc.graph;
  const Tick t = v.frame + 1;
  nlohmann::json parts = nlohmann::json::array();
  for (int p = 0; p < mobility_partitions; ++p) {
    nlohmann::json vehicles = nlohmann::json::array();
    for (const VehicleRecord& r : v.vehicles) {
      if (r.partition != p) {
        continue;
      }
      vehicles.push_back({{"id", r.id},
                          {"kind", std::string(to_string(r.kind))},
                          {"link", g.link(r.link).id},
                          {"lane", r.lane},
                          {"pos_m", r.pos_m},
                          {"speed_mps", r.speed_mps},
                          {"informed", r.informed > 0},
                          {"scripted", r.scripted}});
    }
    const auto pi = static_cast<std::size_t>(p);
    parts.push_back({{"partition", p},
                     {"compute_ns", pi < v.partition_compute.size() ? v.partition_compute[pi] : 0},
                     {"vehicles", vehicles}});
  }
  nlohmann::json workers = nlohmann::json::array();
  for (std::size_t w = 0; w < v.worker_timing.size(); ++w) {
    workers.push_back({{"worker", w},
                       {"compute_ns", v.worker_timing[w].compute_ns},
                       {"exchange_ns", v.worker_timing[w].exchange_ns}});
  }
  nlohmann::json signals = nlohmann::json::array();
  nlohmann::json closures = nlohmann::json::array();
  nlohmann::json advisories = nlohmann::json::array();
  nlohmann::json commands = nlohmann::json::array();
  if (v.world != nullptr) {
    for (const SignalController& c : v.world->signals.controllers()) {
      nlohmann::json approaches = nlohmann::json::object();
      const NodeIndex n = *g.find_node(c.node);
      for (LinkIndex l : g.in_links(n)) {
        approaches[g.link(l).id] = std::string(to_string(v.world->signals.aspect(l, t)));
      }
      signals.push_back({{"node", c.node}, {"approaches", approaches}});
    }
    for (const LaneClosure& c : v.world->closures.all()) {
      if (c.active(t)) {
        closures.push_back({{"link", g.link(c.link).id}, {"lanes", c.lanes}});
      }
    }
    for (const Advisory& a : v.world->advisories) {
      if (!a.valid_at(t)) {
        continue;
      }
      nlohmann::json links = nlohmann::json::array();
      for (LinkIndex l : a.links) {
        links.push_back(g.link(l).id);
      }
      advisories.push_back({{"id", a.id}, {"rsu", a.rsu}, {"kind", std::string(to_string(a.kind))}, {"links", links}});
    }
    for (const TimedCommand& c : v.world->applied) {
      commands.push_back({{"id", c.command.id}, {"kind", std::string(command_kind(c.command))}, {"frame", c.frame}});
    }
  }
  return {{"type", "snapshot"},   {"frame", v.frame},   {"t", tick_seconds(t)},
          {"partitions", parts},  {"workers", workers}, {"signals", signals},
          {"closures", closures}, {"advisories", advisories}, {"commands", commands}, {"informed_cvs", v.informed_cvs}};
}

struct StreamItem {
  enum class Kind : std::uint8_t { Snapshot, Gap, Keepalive, End };
  Kind kind = Kind::Snapshot;
  double t = 0.0;
  std::size_t dropped = 0; // Gap only
  std::string json;        // one NDJSON line without the newline
};

/// Bounded single-consumer queue. A full queue drops its oldest item and the
/// consumer later sees one gap marker counting the drops.
class SnapshotQueue {
public:
  explicit SnapshotQueue(std::size_t capacity) : capacity_(std::max<std::size_t>(capacity, 1)) {}

  void push(StreamItem item) {
    {
      std::lock_guard lock(mu_);
      if (closed_) {
        return;
      }
      if (items_.size() >= capacity_) {
        items_.pop_front();
        ++dropped_;
        ++total_dropped_;
      }
      items_.push_back(std::move(item));
    }
    cv_.notify_one();
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  /// Next item, or nullopt on timeout. After close, drains then reports End.
  std::optional<StreamItem> pop(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, timeout, [&] { return !items_.empty() || dropped_ > 0 || closed_; });
    if (dropped_ > 0) {
      StreamItem gap;
      gap.kind = StreamItem::Kind::Gap;
      gap.dropped = dropped_;
      gap.t = items_.empty() ? 0.0 : items_.front().t;
      gap.json = nlohmann::json{{"type", "gap"}, {"dropped", dropped_}}.dump();
      dropped_ = 0;
      return gap;
    }
    if (!items_.empty()) {
      StreamItem it = std::move(items_.front());
      items_.pop_front();
      return it;
    }
    if (closed_) {
      StreamItem end;
      end.kind = StreamItem::Kind::End;
      end.json = R"({"type":"end"})";
      return end;
    }
    return std::nullopt;
  }

  std::size_t total_dropped() const {
    std::lock_guard lock(mu_);
    return total_dropped_;
  }

private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<StreamItem> items_;
  std::size_t capacity_;
  std::size_t dropped_ = 0;
  std::size_t total_dropped_ = 0;
  bool closed_ = false;
};

/// A consumer's view of a session's snapshots. Idle periods yield keepalive
/// repeats of the last snapshot, so a paused session keeps showing constant t.
class Subscription {
public:
  Subscription(int every, std::size_t capacity, std::chrono::milliseconds keepalive)
      : every_(every), keepalive_(keepalive), queue_(std::make_shared<SnapshotQueue>(capacity)) {}

  int every() const { return every_; }
  SnapshotQueue& queue() { return *queue_; }

  StreamItem next() {
    if (ended_) {
      return end_item();
    }
    auto item = queue_->pop(keepalive_);
    if (!item) {
      StreamItem ka;
      ka.kind = StreamItem::Kind::Keepalive;
      if (last_) {
        nlohmann::json j = nlohmann::json::parse(last_->json);
        j["keepalive"] = true;
        ka.t = last_->t;
        ka.json = j.dump();
      } else {
        ka.json = R"({"type":"keepalive"})";
      }
      return ka;
    }
    if (item->kind == StreamItem::Kind::Snapshot) {
      last_ = *item;
    } else if (item->kind == StreamItem::Kind::End) {
      ended_ = true;
    }
    return *item;
  }

private:
  static StreamItem end_item() {
    StreamItem end;
    end.kind = StreamItem::Kind::End;
    end.json = R"({"type":"end"})";
    return end;
  }

  int every_;
  std::chrono::milliseconds keepalive_;
  std::shared_ptr<SnapshotQueue> queue_;
  std::optional<StreamItem> last_;
  bool ended_ = false;
};

// ---------------------------------------------------------------- sessions

enum class SessionState : std::uint8_t { Created, Running, Finished, Stopped, Failed };

inline std::string_view to_string(SessionState s) {
  switch (s) {
  case SessionState::Created:
    return "created";
  case SessionState::Running:
    return "running";
  case SessionState::Finished:
    return "finished";
  case SessionState::Stopped:
    return "stopped";
  case SessionState::Failed:
    return "failed";
  }
  return "?";
}

struct SessionOptions {
  double rate = 1.0; // sim seconds per wall second; 0 runs as fast as possible
  std::size_t queue_capacity = 64;
  std::chrono::milliseconds keepalive{500};
};

struct Ack {
  std::uint64_t id = 0;
  std::string kind;
  bool accepted = false;
  Tick frame = 0; // frame of effect
  std::string reason;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"id", id}, {"kind", kind}, {"accepted", accepted}};
    if (accepted) {
      j["frame"] = frame;
      j["t"] = tick_seconds(frame);
    } else {
      j["error"] = {{"code", "rejected"}, {"message", reason}};
    }
    return j;
  }
};

/// A live simulation steered through apply_command and observed through
/// subscriptions. Commands take effect at the start of the frame in their
/// acknowledgment.
class Session : public FrameHooks {
public:
  Session(std::uint64_t id, SimConfig cfg, SessionOptions opts = {})
      : id_(id), cfg_(std::move(cfg)), opts_(opts), rate_(opts.rate) {
    cfg_.validate();
    if (cfg_.mode != SimMode::CLSim) {
      throw ValidationError("sessions run in CLSim mode");
    }
    rsus_ = place_rsus(*cfg_.scenario);
    for (const TimedCommand& c : cfg_.commands) {
      if (const auto* a = std::get_if<InjectAdvisory>(&c.command.body)) {
        advisory_ids_.push_back(a->advisory.id);
      }
    }
  }

  ~Session() override {
    request_stop();
    if (runner_.joinable()) {
      runner_.join();
    }
  }

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  std::uint64_t id() const { return id_; }
  const SimConfig& config() const { return cfg_; }

  SessionState state() const {
    std::lock_guard lock(mu_);
    return state_;
  }

  bool paused() const {
    std::lock_guard lock(mu_);
    return paused_;
  }

  Tick next_frame() const {
    std::lock_guard lock(mu_);
    return next_frame_;
  }

  void start() {
    std::lock_guard lock(mu_);
    if (state_ != SessionState::Created) {
      throw ValidationError("session " + std::to_string(id_) + " already started");
    }
    state_ = SessionState::Running;
    wall_origin_ = std::chrono::steady_clock::now();
    runner_ = std::thread([this] { run(); });
  }

  void request_stop() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
  }

  /// Stops (if running) and waits for the run to end.
  void stop() {
    request_stop();
    join();
  }

  /// Waits for the run to end and returns its result.
  SimResult wait() {
    join();
    std::lock_guard lock(mu_);
    if (state_ == SessionState::Failed) {
      throw SimulationError(error_);
    }
    if (!result_) {
      throw ValidationError("session " + std::to_string(id_) + " has not run");
    }
    return *result_;
  }

  std::string error() const {
    std::lock_guard lock(mu_);
    return error_;
  }

  /// Validates and enqueues a command. The acknowledgment names the frame
  /// before which it takes effect.
  Ack apply_command(Command c) {
    std::unique_lock lock(mu_);
    Ack ack;
    ack.id = c.id = next_command_id_++;
    ack.kind = std::string(command_kind(c));
    if (state_ == SessionState::Finished || state_ == SessionState::Stopped || state_ == SessionState::Failed) {
      ack.reason = "session " + std::to_string(id_) + " is " + std::string(to_string(state_));
      return ack;
    }
    try {
      validate_command(c, *cfg_.scenario, rsus_, nullptr);
      if (const auto* a = std::get_if<InjectAdvisory>(&c.body)) {
        if (std::find(advisory_ids_.begin(), advisory_ids_.end(), a->advisory.id) != advisory_ids_.end()) {
          throw ValidationError("advisory " + std::to_string(a->advisory.id) + " already exists");
        }
        advisory_ids_.push_back(a->advisory.id);
      }
    } catch (const ValidationError& e) {
      ack.reason = e.what();
      return ack;
    }
    ack.accepted = true;
    ack.frame = next_frame_;
    c.issued_t = tick_seconds(next_frame_);
    history_.push_back({next_frame_, c});
    std::visit(
        [&](const auto& b) {
          using B = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<B, Pause>) {
            paused_ = true;
          } else if constexpr (std::is_same_v<B, Resume>) {
            paused_ = false;
            reset_pacing();
          } else if constexpr (std::is_same_v<B, SetRate>) {
            rate_ = b.sim_per_wall;
            reset_pacing();
          } else {
            pending_.push_back(c);
          }
        },
        c.body);
    lock.unlock();
    cv_.notify_all();
    return ack;
  }

  /// Snapshots every `every` frames. Slow consumers lose the oldest items.
  std::shared_ptr<Subscription> subscribe(int every, std::optional<std::size_t> capacity = {}) {
    if (every < 1) {
      throw ValidationError("snapshot interval must be >= 1 frame");
    }
    auto sub = std::make_shared<Subscription>(every, capacity.value_or(opts_.queue_capacity), opts_.keepalive);
    std::lock_guard lock(mu_);
    if (state_ != SessionState::Created && state_ != SessionState::Running) {
      sub->queue().close();
    }
    subs_.push_back(sub);
    return sub;
  }

  /// Record of a finished or stopped run.
  RunRecord record() const {
    std::lock_guard lock(mu_);
    if (!result_) {
      throw ValidationError("session " + std::to_string(id_) + " has no completed run");
    }
    RunRecord r;
    r.config = cfg_;
    r.config.commands.clear();
    r.config.duration_s = tick_seconds(result_->frames);
    r.commands = result_->applied_commands;
    for (const TimedCommand& c : history_) {
      if (!affects_world(c.command)) {
        r.commands.push_back(c);
      }
    }
    std::stable_sort(r.commands.begin(), r.commands.end(), [](const TimedCommand& a, const TimedCommand& b) {
      return a.frame != b.frame ? a.frame < b.frame : a.command.id < b.command.id;
    });
    r.digest = result_->digest;
    r.cv_digest = result_->cv_digest;
    r.frames = result_->frames;
    return r;
  }

  std::size_t subscribers() const {
    std::lock_guard lock(mu_);
    return subs_.size();
  }

  std::vector<TimedCommand> history() const {
    std::lock_guard lock(mu_);
    return history_;
  }

  // Engine hooks, called on the controller thread.

  void before_frame(Tick frame, std::vector<Command>& out) override {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !paused_ || stop_; });
    out.insert(out.end(), pending_.begin(), pending_.end());
    pending_.clear();
    next_frame_ = frame + 1;
  }

  void after_frame(const FrameView& v) override {
    std::vector<std::shared_ptr<Subscription>> targets;
    double rate;
    std::chrono::steady_clock::time_point origin;
    Tick origin_frame;
    {
      std::lock_guard lock(mu_);
      for (const auto& s : subs_) {
        if ((v.frame + 1) % s->every() == 0) {
          targets.push_back(s);
        }
      }
      rate = rate_;
      origin = wall_origin_;
      origin_frame = origin_frame_;
    }
    if (!targets.empty()) {
      StreamItem item;
      item.t = tick_seconds(v.frame + 1);
      item.json = snapshot_json(v, *cfg_.scenario, cfg_.mobility_plan.k).dump();
      for (const auto& s : targets) {
        s->queue().push(item);
      }
    }
    if (rate > 0.0) {
      const double sim = tick_seconds(v.frame + 1 - origin_frame);
      const auto due = origin + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                    std::chrono::duration<double>(sim / rate));
      std::unique_lock lock(mu_);
      cv_.wait_until(lock, due, [&] { return stop_ || wall_origin_ != origin; });
    }
  }

  bool stop_requested() override {
    std::lock_guard lock(mu_);
    return stop_;
  }

private:
  void reset_pacing() {
    wall_origin_ = std::chrono::steady_clock::now();
    origin_frame_ = next_frame_;
  }

  void join() {
    if (runner_.joinable() && runner_.get_id() != std::this_thread::get_id()) {
      std::lock_guard join_lock(join_mu_);
      if (runner_.joinable()) {
        runner_.join();
      }
    }
  }

  void run() {
    std::optional<SimResult> result;
    std::string error;
    try {
      result = run_parallel(cfg_, {nullptr, nullptr, this});
    } catch (const std::exception& e) {
      error = e.what();
    }
    std::vector<std::shared_ptr<Subscription>> subs;
    {
      std::lock_guard lock(mu_);
      if (result) {
        state_ = stop_ && result->frames < cfg_.frames() ? SessionState::Stopped : SessionState::Finished;
        result_ = std::move(result);
      } else {
        state_ = SessionState::Failed;
        error_ = error;
      }
      subs = subs_;
    }
    for (const auto& s : subs) {
      s->queue().close();
    }
  }

  std::uint64_t id_;
  SimConfig cfg_;
  SessionOptions opts_;
  std::vector<Rsu> rsus_;

  mutable std::mutex mu_;
  std::mutex join_mu_;
  std::condition_variable cv_;
  SessionState state_ = SessionState::Created;
  bool paused_ = false;
  bool stop_ = false;
  double rate_;
  std::chrono::steady_clock::time_point wall_origin_;
  Tick origin_frame_ = 0;
  Tick next_frame_ = 0;
  std::uint64_t next_command_id_ = 1;
  std::vector<Command> pending_;
  std::vector<TimedCommand> history_;
  std::vector<std::uint64_t> advisory_ids_;
  std::vector<std::shared_ptr<Subscription>> subs_;
  std::optional<SimResult> result_;
  std::string error_;
  std::thread runner_;
};

inline std::shared_ptr<Subscription> stream_snapshots(Session& s, int every_n_frames) {
  return s.subscribe(every_n_frames);
}

// ---------------------------------------------------------------- service

struct ServerConfig {
  SimConfig base;                    // scenario, plans and run defaults for new sessions
  std::filesystem::path record_dir;  // stopped sessions are saved here when set
  std::size_t max_sessions = 8;      // sessions that are created or running
  SessionOptions session;            // default pacing is 1x
};

/// HTTP front end: JSON request/response endpoints plus an NDJSON snapshot
/// stream per session.
class Server {
public:
  explicit Server(ServerConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.base.validate();
    routes();
  }

  ~Server() { stop(); }

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and serves on a background thread. Port 0 picks a free port.
  int start(const std::string& host, int port) {
    const int bound = port == 0 ? http_.bind_to_any_port(host) : (http_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) {
      throw ValidationError("cannot bind " + host + ":" + std::to_string(port));
    }
    thread_ = std::thread([this] { http_.listen_after_bind(); });
    http_.wait_until_ready();
    return bound;
  }

  /// Serves on the calling thread until stop().
  void listen(const std::string& host, int port) {
    if (!http_.listen(host, port)) {
      throw ValidationError("cannot bind " + host + ":" + std::to_string(port));
    }
  }

  void stop() {
    std::vector<std::shared_ptr<Session>> all;
    {
      std::lock_guard lock(mu_);
      for (auto& [_, s] : sessions_) {
        all.push_back(s);
      }
    }
    for (auto& s : all) {
      s->request_stop();
    }
    http_.stop();
    if (thread_.joinable()) {
      thread_.join();
    }
    for (auto& s : all) {
      s->stop();
    }
  }

  std::shared_ptr<Session> session(std::uint64_t id) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  std::filesystem::path record_path(std::uint64_t id) const {
    return cfg_.record_dir / ("session-" + std::to_string(id) + ".json");
  }

private:
  using json = nlohmann::json;

  static void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    reply(res, status, {{"error", {{"code", code}, {"message", message}}}});
  }

  std::shared_ptr<Session> find(const httplib::Request& req, httplib::Response& res) const {
    std::uint64_t id = 0;
    const std::string& s = req.matches[1];
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), id);
    auto found = ec == std::errc() && p == s.data() + s.size() ? session(id) : nullptr;
    if (!found) {
      error(res, 404, "not_found", "no session " + s);
    }
    return found;
  }

  static json status_json(const Session& s) {
    return {{"id", s.id()},
            {"state", std::string(to_string(s.state()))},
            {"paused", s.paused()},
            {"next_frame", s.next_frame()}};
  }

  void routes() {
    http_.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) { create(req, res); });

    http_.Get(R"(/sessions/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      if (auto s = find(req, res)) {
        reply(res, 200, status_json(*s));
      }
    });

    http_.Post(R"(/sessions/(\d+)/start)", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = find(req, res);
      if (!s) {
        return;
      }
      try {
        s->start();
      } catch (const ValidationError& e) {
        return error(res, 409, "conflict", e.what());
      }
      reply(res, 200, status_json(*s));
    });

    http_.Post(R"(/sessions/(\d+)/stop)", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = find(req, res);
      if (!s) {
        return;
      }
      if (s->state() == SessionState::Created) {
        return error(res, 409, "conflict", "session was never started");
      }
      s->stop();
      json body = status_json(*s);
      if (s->state() == SessionState::Failed) {
        body["error"] = {{"code", "failed"}, {"message", s->error()}};
        return reply(res, 500, body);
      }
      const RunRecord rec = s->record();
      body["digest"] = hex_digest(rec.digest);
      body["frames"] = rec.frames;
      if (!cfg_.record_dir.empty()) {
        std::filesystem::create_directories(cfg_.record_dir);
        save_run(rec, record_path(s->id()));
        body["record"] = record_path(s->id()).string();
      }
      reply(res, 200, body);
    });

    http_.Post(R"(/sessions/(\d+)/commands)", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = find(req, res);
      if (!s) {
        return;
      }
      Command c;
      try {
        c = command_from_json(json::parse(req.body));
      } catch (const json::parse_error& e) {
        return error(res, 400, "malformed_json", e.what());
      } catch (const std::exception& e) {
        return error(res, 400, "bad_command", e.what());
      }
      const Ack ack = s->apply_command(std::move(c));
      reply(res, ack.accepted ? 200 : 422, ack.to_json());
    });

    http_.Get(R"(/sessions/(\d+)/record)", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = find(req, res);
      if (!s) {
        return;
      }
      try {
        reply(res, 200, record_to_json(s->record()));
      } catch (const ValidationError& e) {
        error(res, 409, "not_finished", e.what());
      }
    });

    http_.Get(R"(/sessions/(\d+)/stream)", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = find(req, res);
      if (!s) {
        return;
      }
      int every = 1;
      if (req.has_param("every")) {
        const std::string v = req.get_param_value("every");
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), every);
        if (ec != std::errc() || p != v.data() + v.size() || every < 1) {
          return error(res, 400, "bad_request", "every must be a positive integer");
        }
      }
      auto sub = s->subscribe(every);
      res.set_chunked_content_provider("application/x-ndjson", [sub](std::size_t, httplib::DataSink& sink) {
        const StreamItem item = sub->next();
        const std::string line = item.json + "\n";
        if (!sink.write(line.data(), line.size())) {
          return false;
        }
        if (item.kind == StreamItem::Kind::End) {
          sink.done();
        }
        return true;
      });
    });

    http_.Get("/scenario", [this](const httplib::Request&, httplib::Response& res) {
      reply(res, 200, scenario_to_json(*cfg_.base.scenario));
    });

    http_.Get("/plans", [this](const httplib::Request&, httplib::Response& res) {
      const json c = config_to_json(cfg_.base);
      reply(res, 200, {{"mobility", c.at("mobility_plan")}, {"comm", c.at("comm_plan")}});
    });
  }

  void create(const httplib::Request& req, httplib::Response& res) {
    json body = json::object();
    if (!req.body.empty()) {
      try {
        body = json::parse(req.body);
      } catch (const json::parse_error& e) {
        return error(res, 400, "malformed_json", e.what());
      }
      if (!body.is_object()) {
        return error(res, 400, "bad_request", "expected a JSON object");
      }
    }
    SimConfig cfg = cfg_.base;
    SessionOptions opts = cfg_.session;
    try {
      if (body.contains("seed")) {
        cfg.seed = body.at("seed").get<std::uint64_t>();
      }
      if (body.contains("duration_s")) {
        cfg.duration_s = body.at("duration_s").get<double>();
      }
      if (body.contains("workers")) {
        cfg.workers = body.at("workers").get<int>();
      }
      if (body.contains("penetration")) {
        cfg.penetration = body.at("penetration").get<double>();
      }
      if (body.contains("comm_work_factor")) {
        cfg.comm_work_factor = body.at("comm_work_factor").get<double>();
      }
      if (body.contains("rate")) {
        opts.rate = body.at("rate").get<double>();
      }
      if (body.contains("keepalive_ms")) {
        opts.keepalive = std::chrono::milliseconds(body.at("keepalive_ms").get<int>());
      }
      if (body.contains("queue_capacity")) {
        opts.queue_capacity = body.at("queue_capacity").get<std::size_t>();
      }
      if (!(opts.rate >= 0.0)) {
        throw ValidationError("rate must be >= 0");
      }
      cfg.validate();
    } catch (const std::exception& e) {
      return error(res, 400, "bad_request", e.what());
    }
    std::lock_guard lock(mu_);
    std::size_t live = 0;
    for (const auto& [_, s] : sessions_) {
      const SessionState st = s->state();
      live += st == SessionState::Created || st == SessionState::Running ? 1 : 0;
    }
    if (live >= cfg_.max_sessions) {
      return error(res, 503, "session_limit", "at most " + std::to_string(cfg_.max_sessions) + " live sessions");
    }
    const std::uint64_t id = next_id_++;
    auto s = std::make_shared<Session>(id, std::move(cfg), opts);
    sessions_[id] = s;
    reply(res, 201, status_json(*s));
  }

  ServerConfig cfg_;
  httplib::Server http_;
  std::thread thread_;
  mutable std::mutex mu_;
  std::map<std::uint64_t, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_id_ = 1;
};

} // namespace clops
