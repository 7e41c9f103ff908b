#include <cmath>
#include <limits>
#include <map>

#include <gtest/gtest.h>

#include "clops/mobility.hpp"
#include "support/fixtures.hpp"

using namespace clops;

namespace {

struct World {
  RoadGraph g;
  SignalTable signals;
  ClosureTable closures;
  std::vector<int> owner;

  explicit World(RoadGraph graph, std::vector<SignalController> ctrls = {})
      : g(std::move(graph)), signals(g, std::move(ctrls)), owner(g.link_count(), 0) {}

  StepOutput step(std::vector<Vehicle>& vs, Tick t, int partition = 0) {
    TailBoard tails(g);
    for (const Vehicle& v : vs) {
      tails.observe(v);
    }
    StepContext ctx{&g, &signals, &closures, &tails, &owner, partition, t};
    return step_partition(vs, ctx);
  }
};

Vehicle make_vehicle(VehicleId id, std::vector<LinkIndex> route, double pos, double speed) {
  Vehicle v;
  v.id = id;
  v.route = std::move(route);
  v.link = v.route.front();
  v.pos_m = pos;
  v.speed_mps = speed;
  return v;
}

// Reference IDM written out directly from the closed form.
double ref_idm(double v, double v0, double gap, double dv) {
  const double T = 1.5, s0 = 2.0, a = 1.4, b = 2.0;
  if (!std::isfinite(gap)) {
    return a * (1.0 - std::pow(v / v0, 4.0));
  }
  const double s = s0 + std::max(0.0, v * T + v * dv / (2.0 * std::sqrt(a * b)));
  return a * (1.0 - std::pow(v / v0, 4.0) - std::pow(s / gap, 2.0));
}

// Floyd-Warshall distances between every node pair under a link cost table.
std::vector<std::vector<double>> all_pairs(const RoadGraph& g, const std::vector<double>& cost) {
  const std::size_t n = g.node_count();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, inf));
  for (std::size_t i = 0; i < n; ++i) {
    d[i][i] = 0.0;
  }
  for (LinkIndex l = 0; l < g.link_count(); ++l) {
    d[g.from(l)][g.to(l)] = std::min(d[g.from(l)][g.to(l)], cost[l]);
  }
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        d[i][j] = std::min(d[i][j], d[i][k] + d[k][j]);
      }
    }
  }
  return d;
}

double path_cost(const std::vector<LinkIndex>& p, const std::vector<double>& cost) {
  double c = 0.0;
  for (LinkIndex l : p) {
    c += cost[l];
  }
  return c;
}

} // namespace

TEST(Idm, AtRestOnFreeRoad) {
  const IdmParams p;
  EXPECT_DOUBLE_EQ(idm_accel(p, 0.0, kNoLeader, 0.0), p.a_max);
}

TEST(Idm, EquilibriumAtDesiredSpeed) {
  const IdmParams p;
  EXPECT_NEAR(idm_accel(p, p.v0, kNoLeader, 0.0), 0.0, 1e-12);
}

TEST(Idm, HandEvaluatedFollowingCase) {
  IdmParams p;
  p.v0 = 20.0;
  // s* = 2 + 10*1.5 = 17; a = 1.4 * (1 - (1/2)^4 - (17/30)^2)
  EXPECT_NEAR(idm_accel(p, 10.0, 30.0, 10.0), 0.8629444444444444, 1e-12);
}

TEST(Idm, OverlapBrakesAtEmergencyRate) {
  const IdmParams p;
  EXPECT_DOUBLE_EQ(idm_accel(p, 10.0, -1.0, 10.0), -kEmergencyDecel);
  EXPECT_DOUBLE_EQ(idm_accel(p, 10.0, 0.0, 10.0), -kEmergencyDecel);
}

TEST(Idm, NeverReversesWithinOneStep) {
  const IdmParams p;
  for (double v : {0.0, 0.05, 1.0, 5.0}) {
    for (double gap : {0.01, 0.5, 3.0}) {
      EXPECT_GE(v + idm_accel(p, v, gap, 0.0) * kStepSeconds, -1e-12);
    }
  }
}

TEST(Idm, MatchesReferenceAcrossGrid) {
  IdmParams p;
  p.v0 = 25.0;
  for (double v = 0.0; v <= 25.0; v += 2.5) {
    for (double gap = 1.0; gap <= 200.0; gap *= 1.7) {
      for (double lead = 0.0; lead <= 25.0; lead += 5.0) {
        const double want = std::max(ref_idm(v, 25.0, gap, v - lead), -v / kStepSeconds);
        EXPECT_NEAR(idm_accel(p, v, gap, lead), want, 1e-9);
      }
    }
  }
}

TEST(SignalPhase, StartsWithFirstPhase) {
  SignalController c{"n", {{{"a"}, 30, 3}, {{"b"}, 30, 3}}, 0.0};
  EXPECT_EQ(signal_phase(c, 0.0).phase, 0U);
  EXPECT_FALSE(signal_phase(c, 0.0).yellow);
  EXPECT_EQ(signal_phase(c, c.cycle_s()).phase, 0U);
}

TEST(SignalPhase, ArithmeticCase) {
  SignalController c{"n", {{{"a"}, 30, 3}, {{"b"}, 30, 3}}, 0.0};
  const PhaseState s = signal_phase(c, 34.0);
  EXPECT_EQ(s.phase, 1U);
  EXPECT_FALSE(s.yellow);
  EXPECT_NEAR(s.remaining_s, 29.0, 1e-12);
  const PhaseState y = signal_phase(c, 31.0);
  EXPECT_EQ(y.phase, 0U);
  EXPECT_TRUE(y.yellow);
  EXPECT_NEAR(y.remaining_s, 2.0, 1e-12);
}

TEST(SignalPhase, HalfOpenBoundaries) {
  SignalController c{"n", {{{"a"}, 30, 3}, {{"b"}, 20, 2}}, 0.0};
  EXPECT_FALSE(signal_phase(c, 29.9).yellow);
  EXPECT_TRUE(signal_phase(c, 30.0).yellow);
  EXPECT_EQ(signal_phase(c, 32.9).phase, 0U);
  EXPECT_EQ(signal_phase(c, 33.0).phase, 1U);
}

TEST(SignalPhase, PeriodicOnLatticeProperty) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    SignalController c;
    c.node = "n";
    c.offset_s = static_cast<double>(rng.index(300)) / 10.0;
    const std::size_t phases = 1 + rng.index(4);
    for (std::size_t i = 0; i < phases; ++i) {
      c.phases.push_back({{"x"}, static_cast<double>(1 + rng.index(400)) / 10.0, static_cast<double>(rng.index(50)) / 10.0});
    }
    const Tick cycle = to_ticks(c.cycle_s());
    for (Tick k = 0; k < 2 * cycle; k += 7) {
      const PhaseState a = signal_phase(c, tick_seconds(k));
      const PhaseState b = signal_phase(c, tick_seconds(k + cycle));
      EXPECT_EQ(a.phase, b.phase);
      EXPECT_EQ(a.yellow, b.yellow);
      EXPECT_NEAR(a.remaining_s, b.remaining_s, 1e-9);
    }
  }
}

TEST(SignalPhase, UnservedApproachSeesRed) {
  SignalController c{"n", {{{"a"}, 30, 3}, {{"b"}, 30, 3}}, 0.0};
  EXPECT_EQ(approach_aspect(c, "a", 1.0), Aspect::Green);
  EXPECT_EQ(approach_aspect(c, "b", 1.0), Aspect::Red);
  EXPECT_EQ(approach_aspect(c, "a", 31.0), Aspect::Yellow);
}

TEST(Fleet, PenetrationExtremes) {
  const RoadGraph g = fixture::chain(3, 200.0);
  DemandSpec d{{{"n0", "n3", 1800.0, 0.0, 120.0, std::nullopt}}, 0.0};
  const auto none = generate_fleet(d, g, 1);
  ASSERT_FALSE(none.empty());
  for (const Vehicle& v : none) {
    EXPECT_EQ(v.kind, VehicleKind::NonCV);
  }
  d.penetration_rate = 1.0;
  for (const Vehicle& v : generate_fleet(d, g, 1)) {
    EXPECT_EQ(v.kind, VehicleKind::CV);
  }
}

TEST(Fleet, PenetrationFractionWithinBinomialBound) {
  const RoadGraph g = fixture::chain(2, 200.0);
  const DemandSpec d{{{"n0", "n2", 0.0, 0.0, 3600.0, 10000}}, 0.4};
  const auto fleet = generate_fleet(d, g, 9);
  ASSERT_EQ(fleet.size(), 10000U);
  const double cv = static_cast<double>(std::count_if(fleet.begin(), fleet.end(),
                                                      [](const Vehicle& v) { return v.kind == VehicleKind::CV; }));
  // 3 sigma of Binomial(10000, 0.4) is 3 * sqrt(2400) / 10000 = 0.0147.
  EXPECT_GE(cv / 10000.0, 0.38);
  EXPECT_LE(cv / 10000.0, 0.42);
}

TEST(Fleet, PoissonCountNearMean) {
  const RoadGraph g = fixture::chain(2, 200.0);
  const DemandSpec d{{{"n0", "n2", 3600.0, 0.0, 2500.0, std::nullopt}}, 0.5};
  const auto fleet = generate_fleet(d, g, 3);
  // mean 2500, sd 50
  EXPECT_NEAR(static_cast<double>(fleet.size()), 2500.0, 200.0);
  for (std::size_t i = 1; i < fleet.size(); ++i) {
    EXPECT_LE(fleet[i - 1].depart_tick, fleet[i].depart_tick);
    EXPECT_LT(fleet[i - 1].id, fleet[i].id);
  }
  EXPECT_GE(fleet.front().depart_tick, 0);
  EXPECT_LE(fleet.back().depart_tick, 25000);
}

TEST(Fleet, SeededAndRepeatable) {
  const RoadGraph g = fixture::grid(3, 3, 150.0);
  const DemandSpec d{{{"r0c0", "r2c2", 900.0, 0.0, 300.0, std::nullopt}, {"r2c0", "r0c2", 600.0, 0.0, 300.0, std::nullopt}},
                     0.3};
  const auto a = generate_fleet(d, g, 77);
  const auto b = generate_fleet(d, g, 77);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].depart_tick, b[i].depart_tick);
    EXPECT_EQ(a[i].kind, b[i].kind);
    EXPECT_EQ(a[i].route, b[i].route);
  }
  EXPECT_NE(generate_fleet(d, g, 78).size() + 1000 * generate_fleet(d, g, 78).front().depart_tick,
            a.size() + 1000 * a.front().depart_tick);
}

TEST(Fleet, RoutesAreFreeFlowShortest) {
  const RoadGraph g = fixture::grid(4, 4, 120.0);
  std::vector<double> cost;
  for (const RoadLink& l : g.links()) {
    cost.push_back(l.length_m() / l.speed_limit_mps);
  }
  const auto d = all_pairs(g, cost);
  const DemandSpec dem{{{"r0c0", "r3c3", 0.0, 0.0, 10.0, 3}, {"r3c1", "r0c2", 0.0, 0.0, 10.0, 3}}, 0.0};
  for (const Vehicle& v : generate_fleet(dem, g, 1)) {
    const NodeIndex o = g.from(v.route.front());
    const NodeIndex t = g.to(v.route.back());
    EXPECT_NEAR(path_cost(v.route, cost), d[o][t], 1e-9);
    for (std::size_t i = 1; i < v.route.size(); ++i) {
      EXPECT_EQ(g.to(v.route[i - 1]), g.from(v.route[i]));
    }
  }
}

TEST(Fleet, UnreachablePairNamed) {
  const RoadGraph g = fixture::chain(2, 100.0);
  const DemandSpec d{{{"n2", "n0", 100.0, 0.0, 60.0, std::nullopt}}, 0.0};
  try {
    generate_fleet(d, g, 1);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("n2->n0"), std::string::npos);
  }
}

TEST(Reroute, NoClosuresKeepsRoute) {
  const RoadGraph g = fixture::grid(3, 3, 100.0);
  const auto path = free_flow_path(g, *g.find_node("r0c0"), *g.find_node("r2c2"));
  Vehicle v = make_vehicle(1, *path, 10.0, 5.0);
  EXPECT_EQ(reroute(v, g, {}, {}), v.route);
}

TEST(Reroute, AvoidsClosedMiddleLink) {
  const RoadGraph g = fixture::grid(2, 4, 100.0);
  const auto path = *free_flow_path(g, *g.find_node("r0c0"), *g.find_node("r0c3"));
  ASSERT_EQ(path.size(), 3U);
  const LinkIndex middle = path[1];
  Vehicle v = make_vehicle(1, path, 10.0, 5.0);
  const auto r = reroute(v, g, {middle}, {});
  EXPECT_EQ(std::count(r.begin(), r.end(), middle), 0);
  EXPECT_EQ(r.front(), path.front());
  EXPECT_EQ(g.to(r.back()), *g.find_node("r0c3"));
}

TEST(Reroute, UnreachableFallsBack) {
  const RoadGraph g = fixture::chain(3, 100.0);
  Vehicle v = make_vehicle(1, {0, 1, 2}, 10.0, 5.0);
  EXPECT_EQ(reroute(v, g, {1}, {}), v.route);
}

TEST(Reroute, AdvisoryMatchesShortestPathOracle) {
  const RoadGraph g = fixture::grid(4, 5, 100.0);
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const NodeIndex o = static_cast<NodeIndex>(rng.index(g.node_count()));
    NodeIndex t = static_cast<NodeIndex>(rng.index(g.node_count()));
    if (t == o || g.out_links(o).empty()) {
      continue;
    }
    const LinkIndex first = g.out_links(o)[0];
    if (g.to(first) == t) {
      continue;
    }
    auto rest = *free_flow_path(g, g.to(first), t);
    std::vector<LinkIndex> route{first};
    route.insert(route.end(), rest.begin(), rest.end());
    std::vector<LinkIndex> advised;
    std::vector<double> cost;
    for (LinkIndex l = 0; l < g.link_count(); ++l) {
      const bool adv = rng.bernoulli(0.25);
      if (adv) {
        advised.push_back(l);
      }
      cost.push_back(g.link(l).length_m() / g.link(l).speed_limit_mps * (adv ? 5.0 : 1.0));
    }
    const auto d = all_pairs(g, cost);
    Vehicle v = make_vehicle(1, route, 0.0, 0.0);
    const auto r = reroute(v, g, {}, advised);
    ASSERT_EQ(r.front(), first);
    EXPECT_EQ(g.to(r.back()), t);
    const std::vector<LinkIndex> tail(r.begin() + 1, r.end());
    EXPECT_NEAR(path_cost(tail, cost), d[g.to(first)][t], 1e-9);
  }
}

TEST(Step, FreeVehicleAccelerates) {
  World w(fixture::chain(1, 5000.0));
  std::vector<Vehicle> vs{make_vehicle(1, {0}, 0.0, 0.0)};
  double last_pos = 0.0;
  double last_speed = 0.0;
  for (Tick t = 0; t < 300; ++t) {
    w.step(vs, t);
    ASSERT_EQ(vs.size(), 1U);
    EXPECT_GT(vs[0].pos_m, last_pos);
    EXPECT_GE(vs[0].speed_mps, last_speed);
    EXPECT_LE(vs[0].speed_mps, 20.0 + 1e-9);
    last_pos = vs[0].pos_m;
    last_speed = vs[0].speed_mps;
  }
  EXPECT_GT(last_speed, 15.0);
}

TEST(Step, RedSignalHoldsAtStopLine) {
  RoadGraph g = fixture::chain(2, 300.0);
  // n1 controls l0; "l1" never exists as an approach, so l0 is red throughout.
  World w(std::move(g), {{"n1", {{{"zz"}, 30, 0}}, 0.0}});
  std::vector<Vehicle> vs{make_vehicle(1, {0, 1}, 100.0, 15.0)};
  for (Tick t = 0; t < 600; ++t) {
    w.step(vs, t);
    ASSERT_EQ(vs.size(), 1U);
    ASSERT_EQ(vs[0].link, 0U);
    ASSERT_LT(vs[0].pos_m, 300.0);
  }
  EXPECT_NEAR(vs[0].speed_mps, 0.0, 1e-9);
}

TEST(Step, GreenLetsVehicleThrough) {
  World w(fixture::chain(2, 300.0), {{"n1", {{{"l0"}, 30, 3}, {{"zz"}, 30, 3}}, 0.0}});
  std::vector<Vehicle> vs{make_vehicle(1, {0, 1}, 250.0, 15.0)};
  for (Tick t = 0; t < 50; ++t) {
    w.step(vs, t);
  }
  ASSERT_EQ(vs.size(), 1U);
  EXPECT_EQ(vs[0].link, 1U);
}

TEST(Step, PlatoonMatchesStraightLineIntegrator) {
  World w(fixture::chain(1, 5000.0));
  std::vector<Vehicle> vs{make_vehicle(1, {0}, 60.0, 0.0), make_vehicle(2, {0}, 30.0, 0.0)};
  // Reference: leader free, follower IDM on the bumper gap, ballistic update.
  double xl = 60.0, vl = 0.0, xf = 30.0, vf = 0.0;
  const double dt = 0.1;
  auto advance = [dt](double& x, double& v, double a) {
    if (v + a * dt <= 0.0) {
      x += a < 0.0 ? v * v / (-2.0 * a) : 0.0;
      v = 0.0;
    } else {
      x += v * dt + 0.5 * a * dt * dt;
      v += a * dt;
    }
  };
  for (Tick t = 0; t < 600; ++t) {
    const double al = std::max(ref_idm(vl, 20.0, INFINITY, 0.0), -vl / dt);
    const double gap = xl - 5.0 - xf;
    const double af = std::max(ref_idm(vf, 20.0, gap, vf - vl), -vf / dt);
    advance(xl, vl, al);
    advance(xf, vf, af);
    w.step(vs, t);
    ASSERT_EQ(vs.size(), 2U);
    ASSERT_NEAR(vs[0].pos_m, xl, 1e-9);
    ASSERT_NEAR(vs[1].pos_m, xf, 1e-9);
    ASSERT_NEAR(vs[1].speed_mps, vf, 1e-9);
    ASSERT_GE(vs[0].pos_m - 5.0 - vs[1].pos_m, 2.0 - 1e-6);
  }
}

TEST(Step, ArrivalAtRouteEnd) {
  World w(fixture::chain(1, 50.0));
  std::vector<Vehicle> vs{make_vehicle(1, {0}, 49.0, 15.0)};
  vs[0].depart_tick = 3;
  const StepOutput out = w.step(vs, 10);
  EXPECT_TRUE(vs.empty());
  ASSERT_EQ(out.arrivals.size(), 1U);
  EXPECT_EQ(out.arrivals[0].arrive_tick, 11);
  EXPECT_EQ(out.arrivals[0].depart_tick, 3);
}

TEST(Step, HandoffCarriesKinematics) {
  World w(fixture::chain(2, 100.0));
  w.owner = {0, 1};
  std::vector<Vehicle> vs{make_vehicle(7, {0, 1}, 99.5, 10.0)};
  const StepOutput out = w.step(vs, 0);
  EXPECT_TRUE(vs.empty());
  ASSERT_EQ(out.handoffs.size(), 1U);
  EXPECT_EQ(out.handoffs[0].to_partition, 1);
  const Vehicle& h = out.handoffs[0].vehicle;
  EXPECT_EQ(h.link, 1U);
  EXPECT_EQ(h.route_idx, 1U);
  // a = 1.4 * (1 - (10/20)^4) = 1.3125 on a free road
  EXPECT_NEAR(h.pos_m, 99.5 + 1.0 + 0.5 * 1.3125 * 0.01 - 100.0, 1e-9);
  EXPECT_NEAR(h.speed_mps, 10.13125, 1e-12);
}

TEST(Step, ClosedNextLinkStopsAtLinkEnd) {
  World w(fixture::chain(3, 200.0));
  w.closures.add({1, {}, 0, 100000});
  std::vector<Vehicle> vs{make_vehicle(1, {0, 1, 2}, 50.0, 15.0)};
  for (Tick t = 0; t < 600; ++t) {
    w.step(vs, t);
    ASSERT_EQ(vs[0].link, 0U);
  }
  EXPECT_NEAR(vs[0].speed_mps, 0.0, 1e-9);
  EXPECT_GT(vs[0].pos_m, 190.0);
}

TEST(Step, ClosureLiftsAndTrafficResumes) {
  World w(fixture::chain(3, 200.0));
  w.closures.add({1, {}, 0, 300});
  std::vector<Vehicle> vs{make_vehicle(1, {0, 1, 2}, 50.0, 15.0)};
  StepOutput last;
  Tick t = 0;
  for (; t < 1200 && !vs.empty(); ++t) {
    if (t < 300) {
      ASSERT_EQ(vs[0].link, 0U);
    }
    last = w.step(vs, t);
  }
  EXPECT_TRUE(vs.empty());
  ASSERT_EQ(last.arrivals.size(), 1U);
  EXPECT_GT(last.arrivals[0].arrive_tick, 300);
}

TEST(Step, PartialClosureShiftsEntryLane) {
  World w(fixture::chain(2, 100.0, 2));
  w.closures.add({1, {1}, 0, 100000});
  std::vector<Vehicle> vs{make_vehicle(1, {0, 1}, 99.5, 10.0)};
  vs[0].lane = 1;
  w.step(vs, 0);
  ASSERT_EQ(vs[0].link, 1U);
  EXPECT_EQ(vs[0].lane, 0);
}

TEST(Step, UnknownLinkIsFatal) {
  World w(fixture::chain(1, 100.0));
  std::vector<Vehicle> vs{make_vehicle(1, {0}, 1.0, 1.0)};
  vs[0].link = 9;
  TailBoard tails(w.g);
  StepContext ctx{&w.g, &w.signals, &w.closures, &tails, &w.owner, 0, 0};
  EXPECT_THROW(step_partition(vs, ctx), SimulationError);
}

TEST(Step, QueueBehindRedKeepsGapsAndSpeedsProperty) {
  // Single-lane chain with a signal cycling at n1; vehicles are injected as
  // departures and must never overlap or reverse.
  World w(fixture::chain(2, 600.0), {{"n1", {{{"l0"}, 20, 3}, {{"zz"}, 25, 0}}, 0.0}});
  std::vector<Vehicle> pending;
  for (int i = 0; i < 40; ++i) {
    Vehicle v = make_vehicle(static_cast<VehicleId>(i + 1), {0, 1}, 0.0, 0.0);
    v.depart_tick = i * 25;
    pending.push_back(v);
  }
  std::vector<Vehicle> vs;
  std::size_t departed = 0;
  std::size_t arrived = 0;
  for (Tick t = 0; t < 3000; ++t) {
    const StepOutput out = w.step(vs, t);
    arrived += out.arrivals.size();
    departed += insert_departures(vs, pending, w.g, w.closures, t + 1);
    ASSERT_EQ(departed, vs.size() + arrived);
    std::map<std::pair<LinkIndex, double>, const Vehicle*> lane;
    for (const Vehicle& v : vs) {
      ASSERT_GE(v.speed_mps, 0.0);
      ASSERT_LE(v.pos_m, w.g.link(v.link).length_m());
      lane[{v.link, v.pos_m}] = &v;
    }
    const Vehicle* prev = nullptr;
    for (const auto& [key, v] : lane) {
      if (prev != nullptr && prev->link == v->link) {
        ASSERT_GE(v->pos_m - v->params.length - prev->pos_m, -1e-9) << "t=" << t;
      }
      prev = v;
    }
  }
  EXPECT_EQ(arrived, 40U);
}

TEST(Step, DeterministicRepeat) {
  auto run = [] {
    World w(fixture::grid(3, 3, 150.0), {});
    const DemandSpec d{{{"r0c0", "r2c2", 1800.0, 0.0, 60.0, std::nullopt}}, 0.5};
    auto pending = generate_fleet(d, w.g, 5);
    std::vector<Vehicle> vs;
    std::vector<double> trace;
    for (Tick t = 0; t < 900; ++t) {
      w.step(vs, t);
      insert_departures(vs, pending, w.g, w.closures, t + 1);
      for (const Vehicle& v : vs) {
        trace.push_back(v.pos_m);
      }
    }
    return trace;
  };
  EXPECT_EQ(run(), run());
}

TEST(Departures, BlockedLaneHoldsQueue) {
  const RoadGraph g = fixture::chain(1, 500.0);
  ClosureTable closures;
  std::vector<Vehicle> vs{make_vehicle(1, {0}, 3.0, 0.0)};
  std::vector<Vehicle> pending{make_vehicle(2, {0}, 0.0, 0.0), make_vehicle(3, {0}, 0.0, 0.0)};
  EXPECT_EQ(insert_departures(vs, pending, g, closures, 0), 0U);
  EXPECT_EQ(pending.size(), 2U);
  vs[0].pos_m = 100.0;
  vs[0].speed_mps = 10.0;
  EXPECT_EQ(insert_departures(vs, pending, g, closures, 0), 1U);
  EXPECT_EQ(vs.size(), 2U);
  EXPECT_EQ(pending.front().id, 3U);
}

TEST(Departures, FutureDeparturesWait) {
  const RoadGraph g = fixture::chain(1, 500.0);
  ClosureTable closures;
  std::vector<Vehicle> vs;
  std::vector<Vehicle> pending{make_vehicle(1, {0}, 0.0, 0.0)};
  pending[0].depart_tick = 5;
  EXPECT_EQ(insert_departures(vs, pending, g, closures, 4), 0U);
  EXPECT_EQ(insert_departures(vs, pending, g, closures, 5), 1U);
}
