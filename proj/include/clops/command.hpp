#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "clops/commnet.hpp"
#include "clops/error.hpp"
#include "clops/mobility.hpp"
#include "clops/scenario.hpp"
#include "clops/signals.hpp"

namespace clops {

// Operator commands and the mutable world state they act on.

struct CloseLanes {
  std::string link;
  std::vector<int> lanes; // empty closes every lane
  double from_t = 0.0;
  std::optional<double> to_t; // open-ended when absent

  friend bool operator==(const CloseLanes&, const CloseLanes&) = default;
};

struct RetimeSignal {
  SignalController signal;

  friend bool operator==(const RetimeSignal&, const RetimeSignal&) = default;
};

struct AdvisorySpec {
  std::uint64_t id = 0;
  std::string rsu;
  std::vector<std::string> links;
  AdvisoryKind kind = AdvisoryKind::Detour;
  double valid_from = 0.0;
  std::optional<double> valid_to;

  friend bool operator==(const AdvisorySpec&, const AdvisorySpec&) = default;
};

struct InjectAdvisory {
  AdvisorySpec advisory;

  friend bool operator==(const InjectAdvisory&, const InjectAdvisory&) = default;
};

struct SetPenetration {
  double rate = 0.0;
  friend bool operator==(const SetPenetration&, const SetPenetration&) = default;
};

struct Pause {
  friend bool operator==(const Pause&, const Pause&) = default;
};

struct Resume {
  friend bool operator==(const Resume&, const Resume&) = default;
};

struct SetRate {
  double sim_per_wall = 1.0; // 0 runs as fast as possible
  friend bool operator==(const SetRate&, const SetRate&) = default;
};

using CommandBody = std::variant<CloseLanes, RetimeSignal, InjectAdvisory, SetPenetration, Pause, Resume, SetRate>;

struct Command {
  std::uint64_t id = 0;
  double issued_t = 0.0;
  CommandBody body;

  friend bool operator==(const Command&, const Command&) = default;
};

/// A command bound to the frame at which it takes effect.
struct TimedCommand {
  Tick frame = 0;
  Command command;

  friend bool operator==(const TimedCommand&, const TimedCommand&) = default;
};

inline std::string_view command_kind(const Command& c) {
  static constexpr std::string_view names[] = {"close_lanes", "retime_signal", "inject_advisory", "set_penetration",
                                               "pause",       "resume",        "set_rate"};
  return names[c.body.index()];
}

/// Whether the command changes simulated state (as opposed to wall-clock pacing).
inline bool affects_world(const Command& c) {
  return !std::holds_alternative<Pause>(c.body) && !std::holds_alternative<Resume>(c.body) &&
         !std::holds_alternative<SetRate>(c.body);
}

// ---------------------------------------------------------------- JSON

inline nlohmann::json command_to_json(const Command& c) {
  using nlohmann::json;
  json j = {{"id", c.id}, {"kind", command_kind(c)}, {"issued_t", c.issued_t}};
  std::visit(
      [&](const auto& b) {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, CloseLanes>) {
          j["link"] = b.link;
          j["lanes"] = b.lanes;
          j["from_t"] = b.from_t;
          j["to_t"] = b.to_t ? json(*b.to_t) : json(nullptr);
        } else if constexpr (std::is_same_v<B, RetimeSignal>) {
          j["signal"] = signal_to_json(b.signal);
        } else if constexpr (std::is_same_v<B, InjectAdvisory>) {
          const AdvisorySpec& a = b.advisory;
          j["advisory"] = {{"id", a.id},
                           {"rsu", a.rsu},
                           {"links", a.links},
                           {"kind", to_string(a.kind)},
                           {"valid_from", a.valid_from},
                           {"valid_to", a.valid_to ? json(*a.valid_to) : json(nullptr)}};
        } else if constexpr (std::is_same_v<B, SetPenetration>) {
          j["rate"] = b.rate;
        } else if constexpr (std::is_same_v<B, SetRate>) {
          j["rate"] = b.sim_per_wall;
        }
      },
      c.body);
  return j;
}

namespace command_detail {

using nlohmann::json;

inline std::optional<double> optional_number(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) {
    return std::nullopt;
  }
  return scenario_detail::get_number(j, key, where);
}

inline std::vector<std::string> string_list(const json& j, const char* key, const std::string& where) {
  std::vector<std::string> out;
  for (const json& s : scenario_detail::get_array(j, key, where)) {
    if (!s.is_string()) {
      throw SchemaError(where + "." + key, "expected string");
    }
    out.push_back(s.get<std::string>());
  }
  return out;
}

} // namespace command_detail

/// Parses a command document. The id is optional (assigned by the session).
inline Command command_from_json(const nlohmann::json& j) {
  using namespace scenario_detail;
  using namespace command_detail;
  if (!j.is_object()) {
    throw SchemaError("command", "expected object");
  }
  Command c;
  if (j.contains("id")) {
    if (!j.at("id").is_number_unsigned() && !j.at("id").is_number_integer()) {
      throw SchemaError("command.id", "expected integer");
    }
    c.id = j.at("id").get<std::uint64_t>();
  }
  c.issued_t = optional_number(j, "issued_t", "command").value_or(0.0);
  const std::string kind = get_string(j, "kind", "command");
  if (kind == "close_lanes") {
    CloseLanes b;
    b.link = get_string(j, "link", "command");
    if (j.contains("lanes")) {
      for (const json& l : get_array(j, "lanes", "command")) {
        if (!l.is_number_integer()) {
          throw SchemaError("command.lanes", "expected integer");
        }
        b.lanes.push_back(l.get<int>());
      }
    }
    b.from_t = optional_number(j, "from_t", "command").value_or(0.0);
    b.to_t = optional_number(j, "to_t", "command");
    c.body = std::move(b);
  } else if (kind == "retime_signal") {
    c.body = RetimeSignal{signal_from_json(require(j, "signal", "command"), "command.signal")};
  } else if (kind == "inject_advisory") {
    const json& a = require(j, "advisory", "command");
    AdvisorySpec s;
    s.id = static_cast<std::uint64_t>(get_int(a, "id", "command.advisory"));
    s.rsu = get_string(a, "rsu", "command.advisory");
    s.links = string_list(a, "links", "command.advisory");
    const std::string k = a.contains("kind") ? get_string(a, "kind", "command.advisory") : "detour";
    if (k == "detour") {
      s.kind = AdvisoryKind::Detour;
    } else if (k == "lane_closure") {
      s.kind = AdvisoryKind::LaneClosure;
    } else {
      throw SchemaError("command.advisory.kind", "unknown advisory kind '" + k + "'");
    }
    s.valid_from = optional_number(a, "valid_from", "command.advisory").value_or(0.0);
    s.valid_to = optional_number(a, "valid_to", "command.advisory");
    c.body = InjectAdvisory{std::move(s)};
  } else if (kind == "set_penetration") {
    c.body = SetPenetration{get_number(j, "rate", "command")};
  } else if (kind == "pause") {
    c.body = Pause{};
  } else if (kind == "resume") {
    c.body = Resume{};
  } else if (kind == "set_rate") {
    c.body = SetRate{get_number(j, "rate", "command")};
  } else {
    throw SchemaError("command.kind", "unknown command kind '" + kind + "'");
  }
  return c;
}

// ---------------------------------------------------------------- world state

/// Rounds seconds up to the tick lattice.
inline Tick ceil_ticks(double s) { return static_cast<Tick>(std::ceil(s * 10.0 - 1e-9)); }

/// The command-mutable part of a running simulation.
struct WorldState {
  SignalTable signals;
  ClosureTable closures;
  std::vector<Advisory> advisories; // sorted by id
  double penetration = 0.0;
  std::vector<TimedCommand> applied;

  WorldState() = default;
  WorldState(const Scenario& sc, double penetration_rate)
      : signals(sc.graph, sc.signals), penetration(penetration_rate) {}

  const Advisory* advisory(std::uint64_t id) const {
    auto it = std::lower_bound(advisories.begin(), advisories.end(), id,
                               [](const Advisory& a, std::uint64_t v) { return a.id < v; });
    return it != advisories.end() && it->id == id ? &*it : nullptr;
  }
};

inline Advisory resolve_advisory(const AdvisorySpec& s, const RoadGraph& g, std::span<const Rsu> rsus, Tick frame) {
  if (s.id == 0) {
    throw ValidationError("advisory id must be positive");
  }
  if (std::none_of(rsus.begin(), rsus.end(), [&](const Rsu& r) { return r.id == s.rsu; })) {
    throw ValidationError("unknown RSU " + s.rsu);
  }
  Advisory a;
  a.id = s.id;
  a.rsu = s.rsu;
  a.kind = s.kind;
  for (const std::string& id : s.links) {
    auto l = g.find_link(id);
    if (!l) {
      throw ValidationError("unknown link " + id);
    }
    a.links.push_back(*l);
  }
  a.valid_from = std::max(ceil_ticks(s.valid_from), frame);
  if (s.valid_to) {
    a.valid_to = ceil_ticks(*s.valid_to);
  }
  a.validate();
  return a;
}

/// Throws ValidationError with the rejection reason when `c` cannot apply.
inline void validate_command(const Command& c, const Scenario& sc, std::span<const Rsu> rsus,
                             const WorldState* world = nullptr) {
  const RoadGraph& g = sc.graph;
  std::visit(
      [&](const auto& b) {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, CloseLanes>) {
          auto l = g.find_link(b.link);
          if (!l) {
            throw ValidationError("unknown link " + b.link);
          }
          for (int lane : b.lanes) {
            if (lane < 0 || lane >= g.link(*l).lanes) {
              throw ValidationError("link " + b.link + " has no lane " + std::to_string(lane));
            }
          }
          if (!std::isfinite(b.from_t) || b.from_t < 0.0 || (b.to_t && !(*b.to_t > b.from_t))) {
            throw ValidationError("closure interval must satisfy 0 <= from_t < to_t");
          }
        } else if constexpr (std::is_same_v<B, RetimeSignal>) {
          if (!g.find_node(b.signal.node)) {
            throw ValidationError("unknown node " + b.signal.node);
          }
          b.signal.validate();
        } else if constexpr (std::is_same_v<B, InjectAdvisory>) {
          resolve_advisory(b.advisory, g, rsus, 0);
          if (world != nullptr && world->advisory(b.advisory.id) != nullptr) {
            throw ValidationError("advisory " + std::to_string(b.advisory.id) + " already exists");
          }
        } else if constexpr (std::is_same_v<B, SetPenetration>) {
          if (!(b.rate >= 0.0 && b.rate <= 1.0)) {
            throw ValidationError("penetration rate must lie in [0, 1]");
          }
        } else if constexpr (std::is_same_v<B, SetRate>) {
          if (!(b.sim_per_wall >= 0.0) || !std::isfinite(b.sim_per_wall)) {
            throw ValidationError("rate must be a non-negative number");
          }
        }
      },
      c.body);
}

/// Applies a validated command at the start of frame `frame`.
inline void apply_to_world(WorldState& w, const Scenario& sc, std::span<const Rsu> rsus, const Command& c, Tick frame) {
  const RoadGraph& g = sc.graph;
  std::visit(
      [&](const auto& b) {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, CloseLanes>) {
          LaneClosure cl;
          cl.link = *g.find_link(b.link);
          cl.lanes = b.lanes;
          std::sort(cl.lanes.begin(), cl.lanes.end());
          cl.from = std::max(ceil_ticks(b.from_t), frame);
          if (b.to_t) {
            cl.to = ceil_ticks(*b.to_t);
          }
          w.closures.add(std::move(cl));
        } else if constexpr (std::is_same_v<B, RetimeSignal>) {
          w.signals.replace(g, b.signal);
        } else if constexpr (std::is_same_v<B, InjectAdvisory>) {
          Advisory a = resolve_advisory(b.advisory, g, rsus, frame);
          auto it = std::lower_bound(w.advisories.begin(), w.advisories.end(), a.id,
                                     [](const Advisory& x, std::uint64_t v) { return x.id < v; });
          if (it != w.advisories.end() && it->id == a.id) {
            throw ValidationError("advisory " + std::to_string(a.id) + " already exists");
          }
          w.advisories.insert(it, std::move(a));
        } else if constexpr (std::is_same_v<B, SetPenetration>) {
          w.penetration = b.rate;
        }
      },
      c.body);
  w.applied.push_back({frame, c});
}

} // namespace clops
