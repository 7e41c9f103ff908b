#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "clops/commnet.hpp"
#include "clops/cosim.hpp"
#include "clops/csv.hpp"
#include "clops/error.hpp"
#include "clops/geo.hpp"
#include "clops/mobility.hpp"
#include "clops/netgraph.hpp"
#include "clops/signals.hpp"

namespace clops {

// ---------------------------------------------------------------- sensor records

enum class SensorSource : std::uint8_t { Loop, Video, Magnetometer, SignalLogger };

inline std::string_view to_string(SensorSource s) {
  switch (s) {
  case SensorSource::Loop:
    return "loop";
  case SensorSource::Video:
    return "video";
  case SensorSource::Magnetometer:
    return "magnetometer";
  case SensorSource::SignalLogger:
    return "signal";
  }
  return "?";
}

enum class SignalEventCode : std::uint8_t { GreenStart, YellowStart, DetOn, DetOff, PedWalk };

inline std::optional<SignalEventCode> parse_signal_event(std::string_view s) {
  if (s == "green_start") {
    return SignalEventCode::GreenStart;
  }
  if (s == "yellow_start") {
    return SignalEventCode::YellowStart;
  }
  if (s == "det_on") {
    return SignalEventCode::DetOn;
  }
  if (s == "det_off") {
    return SignalEventCode::DetOff;
  }
  if (s == "ped_walk") {
    return SignalEventCode::PedWalk;
  }
  return std::nullopt;
}

struct DetectorEvent {
  bool on = true;
  friend bool operator==(const DetectorEvent&, const DetectorEvent&) = default;
};

struct CountReport {
  int count = 0;
  std::optional<double> mean_speed_mps;
  friend bool operator==(const CountReport&, const CountReport&) = default;
};

struct SignalEvent {
  SignalEventCode code = SignalEventCode::GreenStart;
  friend bool operator==(const SignalEvent&, const SignalEvent&) = default;
};

struct SensorRecord {
  SensorSource source = SensorSource::Loop;
  std::string node;
  std::optional<int> lane; // absent when lanes are tied to one output
  double t = 0.0;
  std::variant<DetectorEvent, CountReport, SignalEvent> payload;

  friend bool operator==(const SensorRecord&, const SensorRecord&) = default;
};

struct SensorLogError {
  std::string file;
  std::size_t line = 0;
  std::string message;
};

struct SensorLogs {
  std::vector<SensorRecord> records; // sorted by t, stable in source order
  std::vector<Bsm> bsms;             // sorted by (t, sender)
  std::vector<SensorLogError> errors;
};

namespace hils_detail {

inline std::optional<int> parse_lane(std::string_view s, bool& ok) {
  s = trim(s);
  ok = true;
  if (s.empty()) {
    return std::nullopt;
  }
  auto v = parse_int<int>(s);
  if (!v || *v < 0) {
    ok = false;
    return std::nullopt;
  }
  return v;
}

template <typename RowFn>
void for_rows(std::string_view text, const std::string& file, std::vector<SensorLogError>& errors, RowFn fn) {
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string_view line = trim(lines[i]);
    if (line.empty() || (i == 0 && line.starts_with("t,"))) {
      continue;
    }
    if (auto err = fn(split_fields(line))) {
      errors.push_back({file, i + 1, *err});
    }
  }
}

inline std::optional<double> parse_time(std::string_view s) {
  auto t = parse_double(s);
  if (!t || !std::isfinite(*t) || *t < 0.0) {
    return std::nullopt;
  }
  return t;
}

} // namespace hils_detail

/// Loop CSV: `t,node,lane,event` with event on|off. An empty lane marks loops
/// wired to one shared output.
inline std::vector<SensorRecord> parse_loop_csv(std::string_view text, const std::string& file,
                                                std::vector<SensorLogError>& errors) {
  using namespace hils_detail;
  std::vector<SensorRecord> out;
  for_rows(text, file, errors, [&](const std::vector<std::string_view>& f) -> std::optional<std::string> {
    if (f.size() != 4) {
      return "expected 4 fields";
    }
    const auto t = parse_time(f[0]);
    bool lane_ok = false;
    const auto lane = parse_lane(f[2], lane_ok);
    const std::string_view ev = trim(f[3]);
    if (!t || !lane_ok || trim(f[1]).empty()) {
      return "unparseable field";
    }
    if (ev != "on" && ev != "off") {
      return "unknown event code '" + std::string(ev) + "'";
    }
    out.push_back({SensorSource::Loop, std::string(trim(f[1])), lane, *t, DetectorEvent{ev == "on"}});
    return std::nullopt;
  });
  return out;
}

/// Video or magnetometer CSV: `t,node,lane,count,mean_speed_mps`; the speed
/// may be empty.
inline std::vector<SensorRecord> parse_count_csv(std::string_view text, SensorSource source, const std::string& file,
                                                 std::vector<SensorLogError>& errors) {
  using namespace hils_detail;
  std::vector<SensorRecord> out;
  for_rows(text, file, errors, [&](const std::vector<std::string_view>& f) -> std::optional<std::string> {
    if (f.size() != 5) {
      return "expected 5 fields";
    }
    const auto t = parse_time(f[0]);
    bool lane_ok = false;
    const auto lane = parse_lane(f[2], lane_ok);
    const auto count = parse_int<int>(f[3]);
    std::optional<double> speed;
    if (!trim(f[4]).empty()) {
      speed = parse_double(f[4]);
      if (!speed || *speed < 0.0) {
        return "unparseable field";
      }
    }
    if (!t || !lane_ok || !count || *count < 0 || trim(f[1]).empty()) {
      return "unparseable field";
    }
    out.push_back({source, std::string(trim(f[1])), lane, *t, CountReport{*count, speed}});
    return std::nullopt;
  });
  return out;
}

/// Signal-logger CSV: `t,node,event`.
inline std::vector<SensorRecord> parse_signal_csv(std::string_view text, const std::string& file,
                                                  std::vector<SensorLogError>& errors) {
  using namespace hils_detail;
  std::vector<SensorRecord> out;
  for_rows(text, file, errors, [&](const std::vector<std::string_view>& f) -> std::optional<std::string> {
    if (f.size() != 3) {
      return "expected 3 fields";
    }
    const auto t = parse_time(f[0]);
    if (!t || trim(f[1]).empty()) {
      return "unparseable field";
    }
    const auto code = parse_signal_event(trim(f[2]));
    if (!code) {
      return "unknown event code '" + std::string(trim(f[2])) + "'";
    }
    out.push_back({SensorSource::SignalLogger, std::string(trim(f[1])), std::nullopt, *t, SignalEvent{*code}});
    return std::nullopt;
  });
  return out;
}

/// Merges per-source streams (given in source order) by time; equal times keep
/// source order, then row order.
inline std::vector<SensorRecord> merge_records(std::vector<std::vector<SensorRecord>> streams) {
  std::vector<SensorRecord> out;
  for (auto& s : streams) {
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  std::stable_sort(out.begin(), out.end(), [](const SensorRecord& a, const SensorRecord& b) { return a.t < b.t; });
  return out;
}

/// Which parser a log file belongs to, from its name prefix.
inline std::optional<std::string> log_kind(const std::filesystem::path& p) {
  if (p.extension() != ".csv") {
    return std::nullopt;
  }
  const std::string name = p.filename().string();
  for (const char* k : {"loop", "video", "magnetometer", "signal", "bsm"}) {
    if (name.starts_with(k)) {
      return std::string(k);
    }
  }
  return std::nullopt;
}

/// Reads every recognised log in `dir` (files named loop*, video*,
/// magnetometer*, signal*, bsm* with a .csv extension). Row-level problems are
/// collected in `errors` and the rest of the stream is kept.
inline SensorLogs parse_sensor_logs(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) {
    throw ValidationError("sensor directory not found: " + dir.string());
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && log_kind(e.path())) {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  SensorLogs logs;
  std::vector<std::vector<SensorRecord>> by_source(4);
  for (const fs::path& p : files) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    const std::string kind = *log_kind(p);
    const std::string name = p.filename().string();
    auto append = [&](SensorSource s, std::vector<SensorRecord> rs) {
      auto& dst = by_source[static_cast<std::size_t>(s)];
      dst.insert(dst.end(), std::make_move_iterator(rs.begin()), std::make_move_iterator(rs.end()));
    };
    if (kind == "loop") {
      append(SensorSource::Loop, parse_loop_csv(text, name, logs.errors));
    } else if (kind == "video") {
      append(SensorSource::Video, parse_count_csv(text, SensorSource::Video, name, logs.errors));
    } else if (kind == "magnetometer") {
      append(SensorSource::Magnetometer, parse_count_csv(text, SensorSource::Magnetometer, name, logs.errors));
    } else if (kind == "signal") {
      append(SensorSource::SignalLogger, parse_signal_csv(text, name, logs.errors));
    } else {
      std::vector<RowError> errs;
      auto bsms = parse_bsm_csv(text, &errs);
      for (const RowError& e : errs) {
        logs.errors.push_back({name, e.line, e.message});
      }
      logs.bsms.insert(logs.bsms.end(), bsms.begin(), bsms.end());
    }
  }
  logs.records = merge_records(std::move(by_source));
  std::stable_sort(logs.bsms.begin(), logs.bsms.end(),
                   [](const Bsm& a, const Bsm& b) { return a.t != b.t ? a.t < b.t : a.sender < b.sender; });
  return logs;
}

// ---------------------------------------------------------------- detections

struct Classification {
  enum class Kind : std::uint8_t { Unclassified, CV, NonCV, Ambiguous };
  Kind kind = Kind::Unclassified;
  std::uint64_t id = 0; // CV sender or anonymous id

  friend bool operator==(const Classification&, const Classification&) = default;
};

struct Detection {
  std::string node;
  int lane = -1; // -1 when lanes are tied
  double t_on = 0.0;
  double t_off = 0.0;
  std::optional<double> speed_mps;
  Classification classified;
};

/// Effective detection zone for occupancy-based speed estimates.
inline constexpr double kDetectorZoneM = 7.0;

/// Pairs on/off events per detector (loop and signal-logger detector events).
/// Unmatched events are dropped.
inline std::vector<Detection> pair_detections(std::span<const SensorRecord> records) {
  std::map<std::tuple<int, std::string, int>, double> open;
  std::vector<Detection> out;
  for (const SensorRecord& r : records) {
    std::optional<bool> on;
    if (const auto* d = std::get_if<DetectorEvent>(&r.payload)) {
      on = d->on;
    } else if (const auto* s = std::get_if<SignalEvent>(&r.payload)) {
      if (s->code == SignalEventCode::DetOn) {
        on = true;
      } else if (s->code == SignalEventCode::DetOff) {
        on = false;
      }
    }
    if (!on) {
      continue;
    }
    const auto key = std::tuple{static_cast<int>(r.source), r.node, r.lane.value_or(-1)};
    if (*on) {
      open[key] = r.t;
    } else if (auto it = open.find(key); it != open.end()) {
      Detection d;
      d.node = r.node;
      d.lane = r.lane.value_or(-1);
      d.t_on = it->second;
      d.t_off = r.t;
      if (d.t_off > d.t_on) {
        d.speed_mps = kDetectorZoneM / (d.t_off - d.t_on);
      }
      out.push_back(std::move(d));
      open.erase(it);
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
    return std::tie(a.t_on, a.node, a.lane) < std::tie(b.t_on, b.node, b.lane);
  });
  return out;
}

/// Candidate distances closer than this are a tie.
inline constexpr double kDistanceTieM = 1e-6;

struct FilterOptions {
  double pos_tol_m = 15.0;
  double time_tol_s = 0.5;
  double passage_gap_s = 5.0; // detections of one sender at one node closer than this are one passage
};

/// Separates CV detections from the rest. A detection is CV(id) when a BSM
/// from `id` lies within pos_tol of the detector and within time_tol of the
/// occupancy interval. One passage of a CV explains at most one detection per
/// detector node: the one that best fits in time. Among remaining candidates
/// the nearest wins; equal distances are Ambiguous; no candidate gives a fresh
/// anonymous id.
inline std::vector<Detection> filter_cv(std::vector<Detection> dets, std::span<const Bsm> bsms, const RoadGraph& g,
                                        const FilterOptions& opts = {}) {
  std::vector<Bsm> sorted(bsms.begin(), bsms.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const Bsm& a, const Bsm& b) { return a.t != b.t ? a.t < b.t : a.sender < b.sender; });

  struct Cand {
    VehicleId sender;
    double dist;
    double terr; // time from the best BSM to the occupancy interval
    bool dropped = false;
  };
  std::vector<std::vector<Cand>> cands(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const Detection& d = dets[i];
    const auto n = g.find_node(d.node);
    if (!n) {
      continue;
    }
    const GeoPoint at = g.node(*n).pos;
    const Tick lo = static_cast<Tick>(std::ceil((d.t_on - opts.time_tol_s) * 10.0 - 1e-9));
    const Tick hi = static_cast<Tick>(std::floor((d.t_off + opts.time_tol_s) * 10.0 + 1e-9));
    auto it = std::lower_bound(sorted.begin(), sorted.end(), lo, [](const Bsm& b, Tick t) { return b.t < t; });
    std::map<VehicleId, Cand> best;
    for (; it != sorted.end() && it->t <= hi; ++it) {
      const double dist = haversine_m(at, it->pos);
      if (dist > opts.pos_tol_m) {
        continue;
      }
      const double bt = tick_seconds(it->t);
      const double terr = std::max({0.0, d.t_on - bt, bt - d.t_off});
      auto [pos, fresh] = best.try_emplace(it->sender, Cand{it->sender, dist, terr});
      if (!fresh && std::tie(dist, terr) < std::tie(pos->second.dist, pos->second.terr)) {
        pos->second = Cand{it->sender, dist, terr};
      }
    }
    for (const auto& [_, c] : best) {
      cands[i].push_back(c);
    }
  }

  // One passage claims one detection per node.
  std::map<std::pair<VehicleId, std::string>, std::vector<std::size_t>> claims;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (const Cand& c : cands[i]) {
      claims[{c.sender, dets[i].node}].push_back(i);
    }
  }
  for (const auto& [key, idx] : claims) {
    auto cand_of = [&](std::size_t i) -> Cand& {
      return *std::find_if(cands[i].begin(), cands[i].end(), [&](const Cand& c) { return c.sender == key.first; });
    };
    std::size_t start = 0;
    while (start < idx.size()) {
      std::size_t end = start + 1;
      while (end < idx.size() && dets[idx[end]].t_on - dets[idx[end - 1]].t_off < opts.passage_gap_s) {
        ++end;
      }
      std::size_t keep = idx[start];
      for (std::size_t j = start + 1; j < end; ++j) {
        const Cand& a = cand_of(idx[j]);
        const Cand& b = cand_of(keep);
        if (std::tie(a.terr, a.dist) < std::tie(b.terr, b.dist)) {
          keep = idx[j];
        }
      }
      for (std::size_t j = start; j < end; ++j) {
        if (idx[j] != keep) {
          cand_of(idx[j]).dropped = true;
        }
      }
      start = end;
    }
  }

  std::uint64_t next_anon = 1;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const Cand* best = nullptr;
    bool tie = false;
    for (const Cand& c : cands[i]) {
      if (c.dropped) {
        continue;
      }
      if (best == nullptr || c.dist < best->dist - kDistanceTieM) {
        best = &c;
        tie = false;
      } else if (c.dist <= best->dist + kDistanceTieM) {
        tie = true;
      }
    }
    if (best == nullptr) {
      dets[i].classified = {Classification::Kind::NonCV, next_anon++};
    } else if (tie) {
      dets[i].classified = {Classification::Kind::Ambiguous, 0};
    } else {
      dets[i].classified = {Classification::Kind::CV, best->sender};
    }
  }
  return dets;
}

// ---------------------------------------------------------------- counts

struct LaneCounts {
  SensorSource source = SensorSource::Loop;
  std::map<int, int> per_lane; // lane -1 collects tied outputs
};

inline const std::vector<SensorSource>& default_count_precedence() {
  static const std::vector<SensorSource> p = {SensorSource::Video, SensorSource::Magnetometer, SensorSource::Loop};
  return p;
}

/// Vehicle counts at `node` over [t0, t1) from the highest-precedence source
/// that reported anything there.
inline std::optional<LaneCounts> lane_counts(std::span<const SensorRecord> records, const std::string& node,
                                             double t0, double t1,
                                             const std::vector<SensorSource>& precedence = default_count_precedence()) {
  for (SensorSource src : precedence) {
    LaneCounts lc;
    lc.source = src;
    bool seen = false;
    for (const SensorRecord& r : records) {
      if (r.source != src || r.node != node || r.t < t0 || r.t >= t1) {
        continue;
      }
      const int lane = r.lane.value_or(-1);
      if (const auto* c = std::get_if<CountReport>(&r.payload)) {
        lc.per_lane[lane] += c->count;
        seen = true;
      } else if (const auto* d = std::get_if<DetectorEvent>(&r.payload)) {
        seen = true;
        if (d->on) {
          ++lc.per_lane[lane];
        }
      }
    }
    if (seen) {
      return lc;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- modal activities

enum class Activity : std::uint8_t { Idling, Acceleration, Cruising, Deceleration };

inline std::string_view to_string(Activity a) {
  switch (a) {
  case Activity::Idling:
    return "idling";
  case Activity::Acceleration:
    return "acceleration";
  case Activity::Cruising:
    return "cruising";
  case Activity::Deceleration:
    return "deceleration";
  }
  return "?";
}

struct TraceSample {
  Tick t = 0;
  LinkIndex link = 0;
  double pos_m = 0.0;  // along `link`
  double path_m = 0.0; // along the reconstructed path
  double speed_mps = 0.0;
};

struct ActivitySegment {
  Activity activity = Activity::Cruising;
  std::size_t first = 0; // sample indices, inclusive
  std::size_t last = 0;

  friend bool operator==(const ActivitySegment&, const ActivitySegment&) = default;
};

inline constexpr double kIdleSpeed = 0.5;
inline constexpr double kAccelThreshold = 0.2;

/// Per-sample labels merged into runs. Acceleration uses the forward
/// difference (backward at the last sample). A slow sample that is clearly
/// speeding up or slowing down is labelled by its acceleration.
inline std::vector<ActivitySegment> modal_segment(std::span<const TraceSample> s) {
  if (s.size() < 2) {
    throw ValidationError("modal segmentation needs at least two samples");
  }
  std::vector<ActivitySegment> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t a = i + 1 < s.size() ? i : i - 1;
    const double dt = tick_seconds(s[a + 1].t - s[a].t);
    const double acc = (s[a + 1].speed_mps - s[a].speed_mps) / dt;
    Activity act;
    if (acc > kAccelThreshold) {
      act = Activity::Acceleration;
    } else if (acc < -kAccelThreshold) {
      act = Activity::Deceleration;
    } else if (s[i].speed_mps < kIdleSpeed) {
      act = Activity::Idling;
    } else {
      act = Activity::Cruising;
    }
    if (!out.empty() && out.back().activity == act) {
      out.back().last = i;
    } else {
      out.push_back({act, i, i});
    }
  }
  return out;
}

inline std::vector<Activity> activity_sequence(std::span<const ActivitySegment> segs) {
  std::vector<Activity> out;
  for (const ActivitySegment& s : segs) {
    out.push_back(s.activity);
  }
  return out;
}

// ---------------------------------------------------------------- reconstruction

/// A CV's observed positions along the reconstruction path.
struct CvTrace {
  std::vector<double> t;     // seconds, increasing
  std::vector<double> pos_m; // along the path

  bool covers(double at) const { return !t.empty() && at >= t.front() && at <= t.back(); }

  double pos_at(double at) const { return interp(pos_m, at); }

  double speed_at(double at) const {
    if (t.size() < 2) {
      return 0.0;
    }
    auto it = std::upper_bound(t.begin(), t.end(), at);
    std::size_t i = it == t.begin() ? 0 : static_cast<std::size_t>(it - t.begin()) - 1;
    i = std::min(i, t.size() - 2);
    return (pos_m[i + 1] - pos_m[i]) / (t[i + 1] - t[i]);
  }

private:
  double interp(const std::vector<double>& y, double at) const {
    if (at <= t.front()) {
      return y.front();
    }
    if (at >= t.back()) {
      return y.back();
    }
    auto it = std::upper_bound(t.begin(), t.end(), at);
    const std::size_t i = static_cast<std::size_t>(it - t.begin()) - 1;
    const double f = (at - t[i]) / (t[i + 1] - t[i]);
    return y[i] + f * (y[i + 1] - y[i]);
  }
};

struct ReconstructionInput {
  std::uint64_t anon_id = 0;
  double t_entry = 0.0; // entry detection at the start of the path
  double t_exit = 0.0;  // exit detection at the end of the path
  std::vector<LinkIndex> path;
  std::optional<CvTrace> leader;
  std::optional<CvTrace> follower;
  // Detected vehicles between this one and each bounding CV; each shifts the
  // CV trace by one jam spacing.
  int between_leader = 0;
  int between_follower = 0;
  std::optional<double> entry_speed_mps;
};

struct ReconstructedTrace {
  std::uint64_t anon_id = 0;
  LinkIndex link = 0; // first link of the path
  std::vector<TraceSample> samples;
  std::vector<ActivitySegment> activities;
  double warp = 1.0; // applied time scale
};

inline constexpr double kFeasibleSpeedFactor = 1.2;
inline constexpr double kMaxTimeWarp = 0.10;

namespace hils_detail {

struct Profile {
  std::vector<double> x;
  std::vector<double> v;
  double arrival = std::numeric_limits<double>::infinity(); // raw seconds
};

/// Forward IDM run along the path from the entry detection, honouring
/// signals, the leader CV and the follower CV as a rear bound.
inline Profile simulate(const ReconstructionInput& in, const RoadGraph& g, const SignalTable& signals,
                        const IdmParams& base, double v0, double horizon_s) {
  std::vector<double> ends;
  double total = 0.0;
  for (LinkIndex l : in.path) {
    total += g.link(l).length_m();
    ends.push_back(total);
  }
  IdmParams p = base;
  p.v0 = v0;
  Profile pr;
  double x = 0.0;
  double v = in.entry_speed_mps.value_or(v0);
  pr.x.push_back(x);
  pr.v.push_back(v);
  const int steps = static_cast<int>(horizon_s / kStepSeconds) + 1;
  for (int j = 0; j < steps; ++j) {
    const double now = in.t_entry + j * kStepSeconds;
    double a = idm_accel(p, v, kNoLeader, 0.0);
    double max_x = std::numeric_limits<double>::infinity();
    const double spacing = base.length + base.s0;
    if (in.leader && in.leader->covers(now)) {
      const double lead = in.leader->pos_at(now) - in.between_leader * spacing;
      if (lead > x) {
        a = std::min(a, idm_accel(p, v, lead - base.length - x, in.leader->speed_at(now)));
        max_x = std::max(x, lead - base.length);
      }
    }
    // Stop lines strictly ahead inside the path (the exit line included).
    for (std::size_t k = 0; k < ends.size(); ++k) {
      if (ends[k] <= x) {
        continue;
      }
      const Aspect asp = signals.aspect(in.path[k], floor_ticks(now));
      if (mobility_detail::must_stop(asp, ends[k] - x, v, p)) {
        a = std::min(a, idm_accel(p, v, ends[k] - x, 0.0));
        max_x = std::min(max_x, std::max(x, std::nextafter(ends[k], 0.0)));
      }
      break;
    }
    a = std::max(a, -v / kStepSeconds);
    double nx;
    double nv;
    if (v + a * kStepSeconds <= 0.0) {
      nx = x + (a < 0.0 ? v * v / (-2.0 * a) : 0.0);
      nv = 0.0;
    } else {
      nx = x + v * kStepSeconds + 0.5 * a * kStepSeconds * kStepSeconds;
      nv = v + a * kStepSeconds;
    }
    if (nx > max_x) {
      nx = max_x;
      nv = std::min(nv, (nx - x) / kStepSeconds);
    }
    if (in.follower && in.follower->covers(now + kStepSeconds)) {
      nx = std::max(nx, std::min(total, in.follower->pos_at(now + kStepSeconds) + base.length +
                                            in.between_follower * spacing));
    }
    if (nx >= total) {
      pr.arrival = j * kStepSeconds + (nx > x ? (total - x) / (nx - x) * kStepSeconds : kStepSeconds);
      pr.x.push_back(total);
      pr.v.push_back(nv);
      return pr;
    }
    x = nx;
    v = nv;
    pr.x.push_back(x);
    pr.v.push_back(v);
  }
  return pr;
}

} // namespace hils_detail

/// Reconstructs a non-CV trajectory between two detections. The desired speed
/// is fitted so the IDM profile reaches the exit close to the detected time,
/// then time is scaled uniformly (at most 10%) to hit both detections exactly.
/// Detection times are snapped to the tick lattice.
inline ReconstructedTrace reconstruct_trace(const ReconstructionInput& in, const RoadGraph& g,
                                            const SignalTable& signals, const IdmParams& params = {}) {
  if (in.path.empty()) {
    throw ValidationError("reconstruction needs a non-empty path");
  }
  double total = 0.0;
  double vmax = 0.0;
  for (std::size_t i = 0; i < in.path.size(); ++i) {
    if (in.path[i] >= g.link_count()) {
      throw ValidationError("reconstruction path references an unknown link");
    }
    if (i > 0 && g.from(in.path[i]) != g.to(in.path[i - 1])) {
      throw ValidationError("reconstruction path is not connected");
    }
    total += g.link(in.path[i]).length_m();
    vmax = std::max(vmax, g.link(in.path[i]).speed_limit_mps);
  }
  const Tick k0 = static_cast<Tick>(std::llround(in.t_entry * 10.0));
  const Tick k1 = static_cast<Tick>(std::llround(in.t_exit * 10.0));
  const double duration = tick_seconds(k1 - k0);
  if (k1 <= k0 || total / duration > kFeasibleSpeedFactor * vmax) {
    throw InfeasibleTraceError("detections " + std::to_string(in.t_entry) + " -> " + std::to_string(in.t_exit) +
                               " need more than " + std::to_string(kFeasibleSpeedFactor) + " x the speed limit");
  }
  ReconstructionInput snapped = in;
  snapped.t_entry = tick_seconds(k0);
  snapped.t_exit = tick_seconds(k1);

  // Fit the desired speed: coarse scan, then bisection around the best bracket.
  const double horizon = duration * (1.0 + 2.0 * kMaxTimeWarp) + 1.0;
  auto run = [&](double v0) { return hils_detail::simulate(snapped, g, signals, params, v0, horizon); };
  const double lo_v = 0.5;
  const double hi_v = kFeasibleSpeedFactor * vmax;
  double best_v = hi_v;
  double best_err = std::numeric_limits<double>::infinity();
  double prev_v = lo_v;
  double prev_r = run(lo_v).arrival;
  constexpr int kScan = 48;
  for (int i = 0; i <= kScan; ++i) {
    const double v0 = lo_v + (hi_v - lo_v) * i / kScan;
    const double r = run(v0).arrival;
    if (std::fabs(r - duration) < best_err) {
      best_err = std::fabs(r - duration);
      best_v = v0;
    }
    if (i > 0 && std::isfinite(prev_r) && std::isfinite(r) && (prev_r - duration) * (r - duration) < 0.0) {
      double a = prev_v;
      double b = v0;
      for (int it = 0; it < 40; ++it) {
        const double m = 0.5 * (a + b);
        const double rm = run(m).arrival;
        if (std::fabs(rm - duration) < best_err) {
          best_err = std::fabs(rm - duration);
          best_v = m;
        }
        if (!std::isfinite(rm) || rm > duration) {
          a = m;
        } else {
          b = m;
        }
      }
    }
    prev_v = v0;
    prev_r = r;
  }
  const hils_detail::Profile pr = run(best_v);
  if (!std::isfinite(pr.arrival)) {
    throw InfeasibleTraceError("no plausible trajectory reaches the exit detection");
  }
  const double warp = duration / pr.arrival;
  if (std::fabs(warp - 1.0) > kMaxTimeWarp + 1e-12) {
    throw InfeasibleTraceError("detections need a time warp of " + std::to_string(warp) + " (limit 10%)");
  }

  ReconstructedTrace out;
  out.anon_id = in.anon_id;
  out.link = in.path.front();
  out.warp = warp;
  std::vector<double> starts;
  double acc = 0.0;
  for (LinkIndex l : in.path) {
    starts.push_back(acc);
    acc += g.link(l).length_m();
  }
  for (Tick k = k0; k <= k1; ++k) {
    double s;
    double v;
    if (k == k0) {
      s = 0.0;
      v = pr.v.front();
    } else if (k == k1) {
      s = total;
      v = pr.v.back();
    } else {
      const double tau = tick_seconds(k - k0) / warp / kStepSeconds;
      const std::size_t j = std::min(static_cast<std::size_t>(tau), pr.x.size() - 2);
      const double f = std::clamp(tau - static_cast<double>(j), 0.0, 1.0);
      s = std::min(total, pr.x[j] + f * (pr.x[j + 1] - pr.x[j]));
      v = pr.v[j] + f * (pr.v[j + 1] - pr.v[j]);
    }
    if (!out.samples.empty()) {
      s = std::max(s, out.samples.back().path_m);
    }
    std::size_t li = static_cast<std::size_t>(std::upper_bound(starts.begin(), starts.end(), s) - starts.begin()) - 1;
    li = std::min(li, in.path.size() - 1);
    out.samples.push_back({k, in.path[li], s - starts[li], s, v / warp});
  }
  const double cap = kFeasibleSpeedFactor * vmax + 1e-9;
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    const bool too_fast = out.samples[i].speed_mps > cap ||
                          (i > 0 && out.samples[i].path_m - out.samples[i - 1].path_m > cap * kStepSeconds);
    if (too_fast) {
      throw InfeasibleTraceError("reconstruction exceeds " + std::to_string(kFeasibleSpeedFactor) +
                                 " x the speed limit");
    }
  }
  out.activities = modal_segment(out.samples);
  return out;
}

// ---------------------------------------------------------------- replay feed

/// Offset separating anonymous non-CV ids from CV sender ids.
inline constexpr VehicleId kAnonIdBase = 1ULL << 48;

struct MapMatch {
  LinkIndex link = 0;
  double pos_m = 0.0;
  double dist_m = 0.0;
};

/// Nearest link to a point; ties prefer the link whose bearing is closest to
/// `heading_deg`, then the lower index.
inline MapMatch map_match(const RoadGraph& g, const GeoPoint& p, double heading_deg) {
  MapMatch best{0, 0.0, std::numeric_limits<double>::infinity()};
  double best_dh = std::numeric_limits<double>::infinity();
  const double k = kEarthRadiusKm * 1000.0 * std::numbers::pi / 180.0;
  for (LinkIndex l = 0; l < g.link_count(); ++l) {
    const GeoPoint a = g.node(g.from(l)).pos;
    const GeoPoint b = g.node(g.to(l)).pos;
    const double c = std::cos(a.lat * std::numbers::pi / 180.0);
    const double bx = (b.lon - a.lon) * c * k;
    const double by = (b.lat - a.lat) * k;
    const double px = (p.lon - a.lon) * c * k;
    const double py = (p.lat - a.lat) * k;
    const double len2 = bx * bx + by * by;
    const double f = len2 > 0.0 ? std::clamp((px * bx + py * by) / len2, 0.0, 1.0) : 0.0;
    const double dist = std::hypot(px - f * bx, py - f * by);
    double dh = std::fabs(std::fmod(bearing_deg(a, b) - heading_deg + 540.0, 360.0) - 180.0);
    if (dist < best.dist_m - 1e-6 || (std::fabs(dist - best.dist_m) <= 1e-6 && dh < best_dh)) {
      best = {l, f * g.link(l).length_m(), dist};
      best_dh = dh;
    }
  }
  return best;
}

/// Builds the HILS-mode input: every BSM sender becomes a CV replaying its
/// broadcasts exactly; every reconstructed trace becomes a scripted non-CV.
/// Traces must belong to NonCV detections.
inline ReplayFeed replay_feed(std::span<const Detection> classified, std::span<const ReconstructedTrace> traces,
                              std::span<const Bsm> bsms, const RoadGraph& g) {
  ReplayFeed feed;
  std::map<VehicleId, std::vector<Bsm>> by_sender;
  for (const Bsm& b : bsms) {
    by_sender[b.sender].push_back(b);
  }
  for (auto& [id, list] : by_sender) {
    std::sort(list.begin(), list.end(), [](const Bsm& a, const Bsm& b) { return a.t < b.t; });
    auto trace = std::make_shared<ScriptedTrace>();
    for (std::size_t i = 0; i < list.size(); ++i) {
      const Bsm& b = list[i];
      if (i > 0 && b.t == list[i - 1].t) {
        continue;
      }
      if (i > 0) {
        // Fill gaps in the broadcast record by interpolation.
        const Bsm& a = list[i - 1];
        for (Tick t = a.t + 1; t < b.t; ++t) {
          const double f = static_cast<double>(t - a.t) / static_cast<double>(b.t - a.t);
          const GeoPoint p = interpolate(a.pos, b.pos, f);
          const MapMatch m = map_match(g, p, a.heading_deg);
          trace->samples.push_back(
              {t, m.link, m.pos_m, a.speed_mps + f * (b.speed_mps - a.speed_mps), std::nullopt, a.heading_deg});
        }
      }
      const MapMatch m = map_match(g, b.pos, b.heading_deg);
      trace->samples.push_back({b.t, m.link, m.pos_m, b.speed_mps, b.pos, b.heading_deg});
    }
    Vehicle v;
    v.id = id;
    v.kind = VehicleKind::CV;
    v.script = trace;
    feed.vehicles.push_back(std::move(v));
  }
  for (const ReconstructedTrace& tr : traces) {
    const bool known = std::any_of(classified.begin(), classified.end(), [&](const Detection& d) {
      return d.classified.kind == Classification::Kind::NonCV && d.classified.id == tr.anon_id;
    });
    if (!known) {
      throw ValidationError("trace " + std::to_string(tr.anon_id) + " has no non-CV detection");
    }
    auto trace = std::make_shared<ScriptedTrace>();
    for (const TraceSample& s : tr.samples) {
      if (s.link >= g.link_count()) {
        throw ValidationError("trace " + std::to_string(tr.anon_id) + " references an unknown link");
      }
      trace->samples.push_back({s.t, s.link, s.pos_m, s.speed_mps, std::nullopt, link_heading(g, s.link)});
    }
    Vehicle v;
    v.id = kAnonIdBase + tr.anon_id;
    v.kind = VehicleKind::NonCV;
    v.script = trace;
    feed.vehicles.push_back(std::move(v));
  }
  return feed;
}

// ---------------------------------------------------------------- pipeline

struct HilsStats {
  std::size_t detections = 0;
  std::size_t cv = 0;
  std::size_t non_cv = 0;
  std::size_t ambiguous = 0;
  std::size_t reconstructed = 0;
  std::size_t infeasible = 0;
  std::size_t unpaired = 0; // non-CV detections with no usable downstream match
};

namespace hils_detail {

/// CV trace along `link` from BSMs of one sender, limited to positions on it.
inline std::optional<CvTrace> bsm_trace_on(std::span<const Bsm> list, const RoadGraph& g, LinkIndex link) {
  CvTrace tr;
  for (const Bsm& b : list) {
    const MapMatch m = map_match(g, b.pos, b.heading_deg);
    if (m.link != link) {
      continue;
    }
    const double t = tick_seconds(b.t);
    if (!tr.t.empty() && (t <= tr.t.back() || m.pos_m < tr.pos_m.back())) {
      continue;
    }
    tr.t.push_back(t);
    tr.pos_m.push_back(m.pos_m);
  }
  if (tr.t.size() < 2) {
    return std::nullopt;
  }
  return tr;
}

} // namespace hils_detail

/// Reconstructs non-CV trajectories on corridor links, those whose upstream
/// node has a single exit and whose downstream node has a single entry.
/// Detections at both ends are paired in order (no overtaking), with each
/// upstream detection taking the earliest downstream one reachable at
/// 1.2 x the speed limit. Infeasible fits are counted and skipped.
inline std::vector<ReconstructedTrace> reconstruct_corridors(std::span<const Detection> classified,
                                                             std::span<const Bsm> bsms, const Scenario& sc,
                                                             HilsStats& stats, const IdmParams& params = {}) {
  const RoadGraph& g = sc.graph;
  const SignalTable signals(g, sc.signals);
  std::map<VehicleId, std::vector<Bsm>> by_sender;
  for (const Bsm& b : bsms) {
    by_sender[b.sender].push_back(b);
  }
  std::map<std::string, std::vector<const Detection*>> at_node;
  for (const Detection& d : classified) {
    at_node[d.node].push_back(&d);
  }
  for (auto& [_, list] : at_node) {
    std::stable_sort(list.begin(), list.end(), [](const Detection* a, const Detection* b) { return a->t_on < b->t_on; });
  }
  std::vector<ReconstructedTrace> out;
  std::set<std::uint64_t> paired_anon;
  for (LinkIndex l = 0; l < g.link_count(); ++l) {
    const NodeIndex a = g.from(l);
    const NodeIndex b = g.to(l);
    if (g.out_links(a).size() != 1 || g.in_links(b).size() != 1) {
      continue;
    }
    const auto up = at_node.find(g.node(a).id);
    const auto down = at_node.find(g.node(b).id);
    if (up == at_node.end() || down == at_node.end()) {
      continue;
    }
    const double min_travel = g.link(l).length_m() / (kFeasibleSpeedFactor * g.link(l).speed_limit_mps);
    const auto& ups = up->second;
    const auto& downs = down->second;
    std::vector<std::optional<std::size_t>> match(ups.size());
    std::size_t next = 0;
    for (std::size_t i = 0; i < ups.size(); ++i) {
      while (next < downs.size() && downs[next]->t_on < ups[i]->t_on + min_travel) {
        ++next;
      }
      if (next < downs.size()) {
        match[i] = next++;
      }
    }
    auto cv_trace = [&](std::size_t i) -> std::optional<CvTrace> {
      if (ups[i]->classified.kind != Classification::Kind::CV) {
        return std::nullopt;
      }
      auto it = by_sender.find(ups[i]->classified.id);
      return it == by_sender.end() ? std::nullopt : hils_detail::bsm_trace_on(it->second, g, l);
    };
    for (std::size_t i = 0; i < ups.size(); ++i) {
      const Detection& d = *ups[i];
      if (d.classified.kind != Classification::Kind::NonCV || !match[i]) {
        continue;
      }
      ReconstructionInput in;
      in.anon_id = d.classified.id;
      in.t_entry = d.t_on;
      in.t_exit = downs[*match[i]]->t_on;
      in.path = {l};
      in.entry_speed_mps = d.speed_mps;
      for (std::size_t j = i; j-- > 0;) {
        if (auto tr = cv_trace(j)) {
          in.leader = std::move(tr);
          break;
        }
        ++in.between_leader;
      }
      if (!in.leader) {
        in.between_leader = 0;
      }
      for (std::size_t j = i + 1; j < ups.size(); ++j) {
        if (auto tr = cv_trace(j)) {
          in.follower = std::move(tr);
          break;
        }
        ++in.between_follower;
      }
      if (!in.follower) {
        in.between_follower = 0;
      }
      try {
        out.push_back(reconstruct_trace(in, g, signals, params));
        paired_anon.insert(in.anon_id);
      } catch (const InfeasibleTraceError&) {
        ++stats.infeasible;
      }
    }
  }
  for (const Detection& d : classified) {
    if (d.classified.kind == Classification::Kind::NonCV && !paired_anon.contains(d.classified.id)) {
      ++stats.unpaired;
    }
  }
  stats.unpaired -= std::min(stats.unpaired, stats.infeasible);
  stats.reconstructed = out.size();
  return out;
}

/// Sensor logs to replay input: classify detections against the BSM stream,
/// reconstruct the non-CVs that can be bounded, and build the scripted feed.
inline ReplayFeed hils_feed(const SensorLogs& logs, const Scenario& sc, HilsStats* stats = nullptr,
                            const FilterOptions& opts = {}, const IdmParams& params = {}) {
  HilsStats local;
  HilsStats& st = stats != nullptr ? *stats : local;
  const std::vector<Detection> classified = filter_cv(pair_detections(logs.records), logs.bsms, sc.graph, opts);
  st.detections = classified.size();
  for (const Detection& d : classified) {
    st.cv += d.classified.kind == Classification::Kind::CV ? 1 : 0;
    st.non_cv += d.classified.kind == Classification::Kind::NonCV ? 1 : 0;
    st.ambiguous += d.classified.kind == Classification::Kind::Ambiguous ? 1 : 0;
  }
  const std::vector<ReconstructedTrace> traces = reconstruct_corridors(classified, logs.bsms, sc, st, params);
  return replay_feed(classified, traces, logs.bsms, sc.graph);
}

} // namespace clops
