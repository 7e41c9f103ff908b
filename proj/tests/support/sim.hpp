#pragma once
// Scenario and configuration builders for engine-level tests.

#include <memory>
#include <string>
#include <vector>

#include "clops/cosim.hpp"
#include "clops/partitioner.hpp"
#include "support/fixtures.hpp"

namespace fixture {

inline clops::PartitionPlan uniform_plan(const clops::RoadGraph& g, clops::WeightMode mode = clops::WeightMode::Mobility) {
  return {mode, 1, std::vector<int>(g.node_count(), 0)};
}

inline clops::PartitionPlan kway_plan(const clops::RoadGraph& g, int k, clops::WeightMode mode,
                                      std::uint64_t seed = 1) {
  clops::PartitionOptions opts;
  opts.seed = seed;
  clops::PartitionPlan p = clops::partition_kway(clops::link_weights(g, mode), k, opts);
  p.mode = mode;
  return p;
}

inline clops::SimConfig config_for(clops::Scenario sc, double duration_s, std::uint64_t seed = 1) {
  clops::SimConfig cfg;
  cfg.mobility_plan = uniform_plan(sc.graph);
  cfg.comm_plan = uniform_plan(sc.graph, clops::WeightMode::Comm);
  cfg.scenario = std::make_shared<const clops::Scenario>(std::move(sc));
  cfg.duration_s = duration_s;
  cfg.seed = seed;
  return cfg;
}

/// Grid scenario with fixed-count corner-to-corner flows.
inline clops::Scenario grid_scenario(int rows, int cols, double spacing_m, int vehicles_per_flow, double window_s,
                                     double penetration) {
  clops::Scenario sc;
  sc.graph = grid(rows, cols, spacing_m, 2, 15.0);
  auto id = [](int r, int c) { return "r" + std::to_string(r) + "c" + std::to_string(c); };
  const std::vector<std::pair<std::string, std::string>> od = {
      {id(0, 0), id(rows - 1, cols - 1)},
      {id(rows - 1, cols - 1), id(0, 0)},
      {id(0, cols - 1), id(rows - 1, 0)},
      {id(rows - 1, 0), id(0, cols - 1)},
  };
  for (const auto& [o, d] : od) {
    clops::OdFlow f;
    f.origin = o;
    f.destination = d;
    f.start_s = 0.0;
    f.end_s = window_s;
    f.vehicles = vehicles_per_flow;
    sc.demand.flows.push_back(f);
  }
  sc.demand.penetration_rate = penetration;
  return sc;
}

/// Records every frame's vehicle states.
class Recorder : public clops::FrameHooks {
public:
  struct Frame {
    clops::Tick frame;
    std::vector<clops::VehicleRecord> vehicles;
    std::size_t informed_cvs;
  };

  void after_frame(const clops::FrameView& v) override {
    frames.push_back({v.frame, {v.vehicles.begin(), v.vehicles.end()}, v.informed_cvs});
  }

  std::vector<Frame> frames;
};

} // namespace fixture
