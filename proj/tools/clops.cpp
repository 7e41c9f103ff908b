#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "clops/clops.hpp"

namespace fs = std::filesystem;
using namespace clops;

namespace {

Scenario load_scenario_file(const fs::path& p) { return parse_scenario(read_file(p)); }

PartitionPlan load_plan(const fs::path& p, const RoadGraph& g, WeightMode expect) {
  PartitionPlan plan = plan_from_json(nlohmann::json::parse(read_file(p)), g);
  if (plan.mode != expect) {
    throw ValidationError(p.string() + ": expected a " + (expect == WeightMode::Mobility ? "mobility" : "comm") +
                          " plan");
  }
  return plan;
}

PartitionPlan plan_or_default(const std::string& file, const RoadGraph& g, WeightMode mode, int k,
                              std::uint64_t seed) {
  if (!file.empty()) {
    return load_plan(file, g, mode);
  }
  PartitionOptions opts;
  opts.seed = seed;
  PartitionPlan p = partition_kway(link_weights(g, mode), std::min<int>(k, static_cast<int>(g.node_count())), opts);
  p.mode = mode;
  return p;
}

struct RunArgs {
  std::string scenario;
  std::string mobility_plan;
  std::string comm_plan;
  int workers = 1;
  std::uint64_t seed = 1;
  double duration_s = 600.0;
  std::string mode = "clsim";
  std::string sensor_dir;
  std::string out = "out";
  double penetration = -1.0;
  double comm_work_factor = 0.0;
};

SimConfig build_config(const RunArgs& a) {
  SimConfig cfg;
  auto sc = std::make_shared<Scenario>(load_scenario_file(a.scenario));
  cfg.mobility_plan = plan_or_default(a.mobility_plan, sc->graph, WeightMode::Mobility, a.workers, a.seed);
  cfg.comm_plan = plan_or_default(a.comm_plan, sc->graph, WeightMode::Comm, a.workers, a.seed);
  cfg.scenario = std::move(sc);
  cfg.workers = a.workers;
  cfg.seed = a.seed;
  cfg.duration_s = a.duration_s;
  cfg.comm_work_factor = a.comm_work_factor;
  if (a.penetration >= 0.0) {
    cfg.penetration = a.penetration;
  }
  return cfg;
}

int cmd_partition(const std::string& scenario, const std::string& mode, int k_min, int k_max, std::uint64_t seed,
                  double epsilon, const std::string& out) {
  const Scenario sc = load_scenario_file(scenario);
  const WeightMode wm = mode == "comm" ? WeightMode::Comm : WeightMode::Mobility;
  PartitionOptions opts;
  opts.seed = seed;
  opts.epsilon = epsilon;
  const WeightedGraph wg = link_weights(sc.graph, wm);
  SearchResult best = search_k(wg, k_min, k_max, {}, opts);
  best.plan.mode = wm;
  const nlohmann::json doc = plan_to_json(best.plan, sc.graph, best.metrics);
  if (out.empty() || out == "-") {
    std::cout << doc.dump(2) << "\n";
  } else {
    write_file(out, doc.dump(2) + "\n");
  }
  std::cerr << "k=" << best.plan.k << " edge_cut=" << best.metrics.edge_cut
            << " boundary_nodes=" << best.metrics.boundary_nodes << " imbalance=" << best.metrics.imbalance << "\n";
  return 0;
}

int cmd_run(const RunArgs& a) {
  SimConfig cfg = build_config(a);
  HilsStats stats;
  if (a.mode == "hils") {
    if (a.sensor_dir.empty()) {
      throw ValidationError("--mode hils needs --sensor-dir");
    }
    const SensorLogs logs = parse_sensor_logs(a.sensor_dir);
    for (const SensorLogError& e : logs.errors) {
      std::cerr << "warning: " << e.file << ":" << e.line << ": " << e.message << "\n";
    }
    cfg.mode = SimMode::HILS;
    cfg.feed = std::make_shared<const ReplayFeed>(hils_feed(logs, *cfg.scenario, &stats));
  } else if (a.mode != "clsim") {
    throw ValidationError("--mode must be clsim or hils");
  }
  const fs::path dir = a.out;
  fs::create_directories(dir);
  SimResult r;
  {
    std::ofstream traj(dir / "trajectory.csv");
    std::ofstream bsms(dir / "bsms.csv");
    r = run_parallel(cfg, {&traj, &bsms, nullptr});
  }
  {
    std::ofstream arr(dir / "arrivals.csv");
    write_arrivals_csv(arr, r);
  }
  nlohmann::json metrics = result_to_json(r);
  metrics["mode"] = a.mode;
  if (cfg.mode == SimMode::HILS) {
    metrics["hils"] = {{"detections", stats.detections}, {"cv", stats.cv},
                       {"non_cv", stats.non_cv},         {"ambiguous", stats.ambiguous},
                       {"reconstructed", stats.reconstructed}, {"infeasible", stats.infeasible},
                       {"unpaired", stats.unpaired}};
  }
  write_file(dir / "metrics.json", metrics.dump(2) + "\n");
  write_file(dir / "digest.txt", hex_digest(r.digest) + "\n");
  if (cfg.mode == SimMode::CLSim) {
    RunRecord rec{cfg, {}, r.digest, r.cv_digest, r.frames, {}};
    for (const char* name : {"trajectory.csv", "bsms.csv", "arrivals.csv", "metrics.json", "digest.txt"}) {
      rec.outputs.push_back(manifest_entry(dir, name));
    }
    save_run(rec, dir / "run.json");
  }
  std::cout << hex_digest(r.digest) << "\n";
  if (!r.conservation.ok()) {
    std::cerr << "conservation violations: " << r.conservation.total() << "\n";
    return 1;
  }
  return 0;
}

Server* g_server = nullptr;

void on_signal(int) {
  if (g_server != nullptr) {
    std::thread([] { g_server->stop(); }).detach();
  }
}

int cmd_serve(const RunArgs& a, const std::string& host, int port, const std::string& record_dir, double rate,
              std::size_t max_sessions) {
  ServerConfig sc;
  sc.base = build_config(a);
  sc.record_dir = record_dir;
  sc.max_sessions = max_sessions;
  sc.session.rate = rate;
  Server server(std::move(sc));
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "serving on " << host << ":" << port << "\n";
  server.listen(host, port);
  g_server = nullptr;
  return 0;
}

int cmd_replay(const std::string& record, const std::string& out) {
  const RunRecord rec = load_run(record);
  SimResult r;
  if (out.empty()) {
    r = replay_run(rec);
  } else {
    fs::create_directories(out);
    std::ofstream traj(fs::path(out) / "trajectory.csv");
    std::ofstream bsms(fs::path(out) / "bsms.csv");
    r = replay_run(rec, {&traj, &bsms, nullptr});
  }
  std::cout << hex_digest(r.digest) << "\n";
  if (r.digest != rec.digest || r.cv_digest != rec.cv_digest) {
    std::cerr << "digest mismatch: recorded " << hex_digest(rec.digest) << "\n";
    return 1;
  }
  std::cerr << "replay matches (" << rec.frames << " frames, " << rec.commands.size() << " commands)\n";
  return 0;
}

int cmd_import_osm(const std::string& in, const std::string& out, bool two_way, double penetration) {
  OsmOptions opts;
  opts.two_way = two_way;
  Scenario sc;
  sc.graph = parse_osm_subset(read_file(in), opts);
  sc.demand.penetration_rate = penetration;
  write_file(out, save_scenario(sc) + "\n");
  std::cerr << sc.graph.node_count() << " nodes, " << sc.graph.link_count() << " links\n";
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallel closed-loop connected-vehicle co-simulator"};
  app.require_subcommand(1);

  std::string scenario;
  std::string mode = "mobility";
  int k_min = 2;
  int k_max = 8;
  std::uint64_t seed = 1;
  double epsilon = 0.05;
  std::string out;
  auto* partition = app.add_subcommand("partition", "Partition a road network into k parts");
  partition->add_option("--scenario", scenario, "Scenario JSON")->required()->check(CLI::ExistingFile);
  partition->add_option("--mode", mode, "Weighting")->check(CLI::IsMember({"mobility", "comm"}));
  partition->add_option("--k-min", k_min, "Smallest k to try")->check(CLI::PositiveNumber);
  partition->add_option("--k-max", k_max, "Largest k to try")->check(CLI::PositiveNumber);
  partition->add_option("--seed", seed, "Partitioner seed");
  partition->add_option("--epsilon", epsilon, "Allowed imbalance");
  partition->add_option("--out", out, "Plan file (stdout when omitted)");

  RunArgs ra;
  auto add_run_options = [&](CLI::App* c) {
    c->add_option("--scenario", ra.scenario, "Scenario JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--mobility-plan", ra.mobility_plan, "Mobility plan (default: k = P)")->check(CLI::ExistingFile);
    c->add_option("--comm-plan", ra.comm_plan, "Comm plan (default: k = P)")->check(CLI::ExistingFile);
    c->add_option("-P,--workers", ra.workers, "Worker threads")->check(CLI::PositiveNumber);
    c->add_option("--seed", ra.seed, "Simulation seed");
    c->add_option("--duration", ra.duration_s, "Simulated seconds");
    c->add_option("--penetration", ra.penetration, "Override the scenario's CV penetration")
        ->check(CLI::Range(0.0, 1.0));
    c->add_option("--comm-work-factor", ra.comm_work_factor, "Synthetic cost per cross-worker delivery");
  };
  auto* run = app.add_subcommand("run", "Run a simulation headless");
  add_run_options(run);
  run->add_option("--mode", ra.mode, "clsim or hils")->check(CLI::IsMember({"clsim", "hils"}));
  run->add_option("--sensor-dir", ra.sensor_dir, "Sensor logs for hils mode")->check(CLI::ExistingDirectory);
  run->add_option("--out", ra.out, "Output directory");

  std::string host = "127.0.0.1";
  int port = 8080;
  std::string record_dir = "records";
  double rate = 1.0;
  std::size_t max_sessions = 8;
  auto* serve = app.add_subcommand("serve", "Serve live sessions over HTTP");
  add_run_options(serve);
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port")->check(CLI::Range(0, 65535));
  serve->add_option("--record-dir", record_dir, "Where stopped sessions are saved");
  serve->add_option("--rate", rate, "Default pacing, sim seconds per wall second (0 = unpaced)");
  serve->add_option("--max-sessions", max_sessions, "Concurrent session limit");

  std::string record;
  std::string replay_out;
  auto* replay = app.add_subcommand("replay", "Re-run a saved run record and check its digest");
  replay->add_option("--record", record, "Run record JSON")->required()->check(CLI::ExistingFile);
  replay->add_option("--out", replay_out, "Write trajectory and BSM CSVs here");

  std::string osm_in;
  std::string osm_out;
  bool two_way = false;
  double osm_penetration = 0.0;
  auto* import = app.add_subcommand("import-osm", "Convert an OSM XML extract to a scenario");
  import->add_option("--in", osm_in, "OSM XML file")->required()->check(CLI::ExistingFile);
  import->add_option("--out", osm_out, "Scenario JSON")->required();
  import->add_flag("--two-way", two_way, "Emit both directions for ways not tagged oneway");
  import->add_option("--penetration", osm_penetration, "CV penetration rate")->check(CLI::Range(0.0, 1.0));

  GridSpec grid;
  std::string grid_out;
  bool no_signals = false;
  auto* gen = app.add_subcommand("gen-grid", "Write a synthetic grid scenario");
  gen->add_option("--rows", grid.rows)->check(CLI::PositiveNumber);
  gen->add_option("--cols", grid.cols)->check(CLI::PositiveNumber);
  gen->add_option("--spacing", grid.spacing_m, "Block length in metres");
  gen->add_option("--lanes", grid.lanes)->check(CLI::PositiveNumber);
  gen->add_option("--speed", grid.speed_mps, "Speed limit in m/s");
  gen->add_option("--vehicles", grid.vehicles_per_flow, "Vehicles per corner-to-corner flow");
  gen->add_option("--window", grid.window_s, "Departure window in seconds");
  gen->add_option("--penetration", grid.penetration)->check(CLI::Range(0.0, 1.0));
  gen->add_flag("--no-signals", no_signals, "Leave interior intersections uncontrolled");
  gen->add_option("--out", grid_out, "Scenario JSON")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (partition->parsed()) {
      return cmd_partition(scenario, mode, k_min, k_max, seed, epsilon, out);
    }
    if (run->parsed()) {
      return cmd_run(ra);
    }
    if (serve->parsed()) {
      return cmd_serve(ra, host, port, record_dir, rate, max_sessions);
    }
    if (replay->parsed()) {
      return cmd_replay(record, replay_out);
    }
    if (import->parsed()) {
      return cmd_import_osm(osm_in, osm_out, two_way, osm_penetration);
    }
    if (gen->parsed()) {
      grid.signals = !no_signals;
      write_file(grid_out, save_scenario(make_grid_scenario(grid)) + "\n");
      return 0;
    }
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
