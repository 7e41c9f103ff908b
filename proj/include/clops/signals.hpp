#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "clops/error.hpp"

namespace clops {

/// Simulation time is kept on a 0.1 s lattice; one tick is one lattice step.
using Tick = std::int64_t;
inline constexpr double kStepSeconds = 0.1;
inline constexpr Tick kTicksPerSecond = 10;

inline double tick_seconds(Tick k) noexcept { return static_cast<double>(k) / 10.0; }

/// Converts seconds to ticks; throws if `s` is not on the lattice.
inline Tick to_ticks(double s, const char* what = "duration") {
  const double scaled = s * 10.0;
  const double r = std::round(scaled);
  if (!std::isfinite(s) || std::fabs(scaled - r) > 1e-6) {
    throw ValidationError(std::string(what) + " must be a multiple of 0.1 s");
  }
  return static_cast<Tick>(r);
}

inline Tick floor_ticks(double s) noexcept { return static_cast<Tick>(std::floor(s * 10.0 + 1e-9)); }

struct SignalPhase {
  std::vector<std::string> approaches; // incoming link ids served (green/yellow)
  double green_s = 0.0;
  double yellow_s = 0.0;

  friend bool operator==(const SignalPhase&, const SignalPhase&) = default;
};

struct SignalController {
  std::string node;
  std::vector<SignalPhase> phases;
  double offset_s = 0.0;

  double cycle_s() const {
    double c = 0.0;
    for (const SignalPhase& p : phases) {
      c += p.green_s + p.yellow_s;
    }
    return c;
  }

  void validate() const {
    if (phases.empty()) {
      throw ValidationError("signal " + node + ": no phases");
    }
    Tick total = 0;
    for (const SignalPhase& p : phases) {
      if (p.green_s < 0 || p.yellow_s < 0) {
        throw ValidationError("signal " + node + ": negative phase duration");
      }
      total += to_ticks(p.green_s, "green time") + to_ticks(p.yellow_s, "yellow time");
    }
    if (total <= 0) {
      throw ValidationError("signal " + node + ": cycle duration must be positive");
    }
    to_ticks(offset_s, "signal offset");
  }

  friend bool operator==(const SignalController&, const SignalController&) = default;
};

enum class Aspect : std::uint8_t { Green, Yellow, Red };

struct PhaseState {
  std::size_t phase = 0;
  bool yellow = false;
  double remaining_s = 0.0; // time left in the current green or yellow interval
};

/// Active phase at time t. Intervals are half-open [start, end).
inline PhaseState signal_phase(const SignalController& ctrl, double t_s) {
  Tick cycle = 0;
  for (const SignalPhase& p : ctrl.phases) {
    cycle += to_ticks(p.green_s) + to_ticks(p.yellow_s);
  }
  if (cycle <= 0) {
    throw ValidationError("signal " + ctrl.node + ": cycle duration must be positive");
  }
  const Tick t = static_cast<Tick>(std::llround(t_s * 10.0)) + static_cast<Tick>(std::llround(ctrl.offset_s * 10.0));
  Tick in_cycle = ((t % cycle) + cycle) % cycle;
  for (std::size_t i = 0; i < ctrl.phases.size(); ++i) {
    const Tick g = to_ticks(ctrl.phases[i].green_s);
    const Tick y = to_ticks(ctrl.phases[i].yellow_s);
    if (in_cycle < g) {
      return {i, false, tick_seconds(g - in_cycle)};
    }
    if (in_cycle < g + y) {
      return {i, true, tick_seconds(g + y - in_cycle)};
    }
    in_cycle -= g + y;
  }
  return {0, false, 0.0}; // unreachable
}

/// Aspect shown to an approach link at time t.
inline Aspect approach_aspect(const SignalController& ctrl, const std::string& link_id, double t_s) {
  const PhaseState st = signal_phase(ctrl, t_s);
  for (const std::string& a : ctrl.phases[st.phase].approaches) {
    if (a == link_id || a == "*") {
      return st.yellow ? Aspect::Yellow : Aspect::Green;
    }
  }
  return Aspect::Red;
}

} // namespace clops
