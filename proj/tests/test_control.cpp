#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <thread>

#include "clops/control.hpp"
#include "support/sim.hpp"

using namespace clops;
using namespace std::chrono_literals;
using nlohmann::json;

namespace {

SimConfig control_config(double duration_s = 30.0, std::uint64_t seed = 7) {
  Scenario sc = fixture::grid_scenario(3, 3, 200.0, 8, 20.0, 0.5);
  SignalController sig;
  sig.node = "r1c1";
  sig.phases = {{{"r1c0-r1c1", "r1c2-r1c1"}, 12.0, 3.0}, {{"r0c1-r1c1", "r2c1-r1c1"}, 12.0, 3.0}};
  sc.signals.push_back(sig);
  sc.rsu_nodes = {"r1c1"};
  SimConfig cfg = fixture::config_for(sc, duration_s, seed);
  cfg.mobility_plan = fixture::kway_plan(cfg.scenario->graph, 2, WeightMode::Mobility);
  cfg.comm_plan = fixture::kway_plan(cfg.scenario->graph, 2, WeightMode::Comm);
  cfg.workers = 2;
  return cfg;
}

SessionOptions fast(std::size_t capacity = 4096, std::chrono::milliseconds keepalive = 50ms) {
  SessionOptions o;
  o.rate = 0.0;
  o.queue_capacity = capacity;
  o.keepalive = keepalive;
  return o;
}

Command close_cmd(const std::string& link, double from_t, std::optional<double> to_t = {}) {
  Command c;
  c.body = CloseLanes{link, {}, from_t, to_t};
  return c;
}

Command pause_cmd() { return Command{0, 0.0, Pause{}}; }
Command resume_cmd() { return Command{0, 0.0, Resume{}}; }

std::vector<StreamItem> drain(Subscription& sub) {
  std::vector<StreamItem> out;
  for (;;) {
    StreamItem it = sub.next();
    if (it.kind == StreamItem::Kind::End) {
      return out;
    }
    if (it.kind != StreamItem::Kind::Keepalive) {
      out.push_back(std::move(it));
    }
  }
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("clops-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

} // namespace

// ---------------------------------------------------------------- config files

TEST(ConfigJson, RoundTripPreservesEveryField) {
  SimConfig cfg = control_config();
  cfg.penetration = 0.25;
  cfg.comm_work_factor = 3.0;
  cfg.reception.kind = LogDistance{10.0, 2.7, -40.0, -92.0, 4.0};
  cfg.idm.T = 1.2;
  const SimConfig back = config_from_json(json::parse(config_to_json(cfg).dump()));
  EXPECT_EQ(*back.scenario, *cfg.scenario);
  EXPECT_EQ(back.mobility_plan.assignment, cfg.mobility_plan.assignment);
  EXPECT_EQ(back.comm_plan.assignment, cfg.comm_plan.assignment);
  EXPECT_EQ(back.comm_plan.mode, WeightMode::Comm);
  EXPECT_EQ(back.workers, 2);
  EXPECT_EQ(back.seed, 7u);
  EXPECT_EQ(back.penetration, 0.25);
  EXPECT_EQ(back.idm, cfg.idm);
  EXPECT_EQ(reception_to_json(back.reception), reception_to_json(cfg.reception));
  EXPECT_EQ(run_sequential(back).digest, run_sequential(cfg).digest);
}

TEST(ConfigJson, RejectsUnknownReceptionModel) {
  EXPECT_THROW(reception_from_json(json{{"model", "free_space"}}), SchemaError);
}

TEST(Checksum, Fnv1aKnownVectors) {
  // Published FNV-1a 64-bit test vectors.
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

// ---------------------------------------------------------------- queue

TEST(SnapshotQueue, DropsOldestAndReportsGap) {
  SnapshotQueue q(3);
  for (int i = 0; i < 7; ++i) {
    StreamItem it;
    it.t = i;
    q.push(it);
  }
  q.close();
  auto gap = q.pop(0ms);
  ASSERT_TRUE(gap);
  EXPECT_EQ(gap->kind, StreamItem::Kind::Gap);
  EXPECT_EQ(gap->dropped, 4u);
  for (double t : {4.0, 5.0, 6.0}) {
    auto it = q.pop(0ms);
    ASSERT_TRUE(it);
    EXPECT_EQ(it->kind, StreamItem::Kind::Snapshot);
    EXPECT_EQ(it->t, t);
  }
  EXPECT_EQ(q.pop(0ms)->kind, StreamItem::Kind::End);
  EXPECT_EQ(q.total_dropped(), 4u);
}

TEST(SnapshotQueue, TimesOutWhenEmpty) {
  SnapshotQueue q(2);
  EXPECT_FALSE(q.pop(5ms));
}

// ---------------------------------------------------------------- sessions

TEST(Session, EveryTenFramesGivesOneSecondSpacing) {
  Session s(1, control_config(12.0), fast());
  auto sub = s.subscribe(10);
  s.start();
  const auto items = drain(*sub);
  s.wait();
  ASSERT_EQ(items.size(), 12u);
  for (std::size_t i = 0; i < items.size(); ++i) {
    ASSERT_EQ(items[i].kind, StreamItem::Kind::Snapshot);
    EXPECT_NEAR(items[i].t, 1.0 * static_cast<double>(i + 1), 1e-9);
    const json j = json::parse(items[i].json);
    EXPECT_EQ(j.at("type"), "snapshot");
    EXPECT_EQ(j.at("partitions").size(), 2u);
    EXPECT_EQ(j.at("workers").size(), 2u);
    EXPECT_EQ(j.at("signals").size(), 1u);
  }
  EXPECT_EQ(s.state(), SessionState::Finished);
}

TEST(Session, SnapshotListsEveryVehicleOnce) {
  SimConfig cfg = control_config(15.0);
  fixture::Recorder rec;
  run_sequential(cfg, {nullptr, nullptr, &rec});
  Session s(1, cfg, fast());
  auto sub = s.subscribe(50);
  s.start();
  const auto items = drain(*sub);
  s.wait();
  ASSERT_EQ(items.size(), 3u);
  for (const StreamItem& it : items) {
    const json j = json::parse(it.json);
    const Tick frame = j.at("frame").get<Tick>();
    std::size_t n = 0;
    for (const auto& p : j.at("partitions")) {
      n += p.at("vehicles").size();
    }
    EXPECT_EQ(n, rec.frames[static_cast<std::size_t>(frame)].vehicles.size());
  }
}

TEST(Session, PausedSessionRepeatsLastSnapshot) {
  Session s(1, control_config(60.0), fast(4096, 30ms));
  auto sub = s.subscribe(1);
  s.start();
  while (s.next_frame() < 20) {
    std::this_thread::sleep_for(1ms);
  }
  const Ack ack = s.apply_command(pause_cmd());
  ASSERT_TRUE(ack.accepted);
  // Frames already running finish; then the stream goes quiet.
  std::vector<double> keepalive_t;
  double last_snapshot = -1.0;
  while (keepalive_t.size() < 4) {
    StreamItem it = sub->next();
    if (it.kind == StreamItem::Kind::Snapshot) {
      last_snapshot = it.t;
      keepalive_t.clear();
    } else if (it.kind == StreamItem::Kind::Keepalive) {
      keepalive_t.push_back(it.t);
      EXPECT_TRUE(json::parse(it.json).at("keepalive").get<bool>());
    }
  }
  for (double t : keepalive_t) {
    EXPECT_EQ(t, last_snapshot);
  }
  EXPECT_TRUE(s.paused());
  EXPECT_LT(last_snapshot, 60.0);
  ASSERT_TRUE(s.apply_command(resume_cmd()).accepted);
  drain(*sub);
  EXPECT_EQ(s.wait().frames, 600);
}

TEST(Session, PauseResumeKeepsDigest) {
  SimConfig cfg = control_config(40.0);
  const SimResult solo = run_sequential(cfg);
  Session s(1, cfg, fast());
  s.start();
  for (int i = 0; i < 5; ++i) {
    ASSERT_TRUE(s.apply_command(pause_cmd()).accepted);
    std::this_thread::sleep_for(5ms);
    ASSERT_TRUE(s.apply_command(resume_cmd()).accepted);
  }
  const SimResult r = s.wait();
  EXPECT_EQ(r.digest, solo.digest);
  EXPECT_EQ(r.cv_digest, solo.cv_digest);
}

TEST(Session, SlowConsumerSeesGapsAndDigestHolds) {
  SimConfig cfg = control_config(30.0);
  const SimResult solo = run_sequential(cfg);
  Session s(1, cfg, fast());
  auto sub = s.subscribe(1, 8);
  s.start();
  const SimResult r = s.wait();
  const auto items = drain(*sub);
  EXPECT_EQ(r.digest, solo.digest);
  ASSERT_FALSE(items.empty());
  EXPECT_EQ(items.front().kind, StreamItem::Kind::Gap);
  std::size_t dropped = 0;
  std::size_t snapshots = 0;
  for (const auto& it : items) {
    dropped += it.kind == StreamItem::Kind::Gap ? it.dropped : 0;
    snapshots += it.kind == StreamItem::Kind::Snapshot ? 1 : 0;
  }
  EXPECT_EQ(snapshots, 8u);
  EXPECT_EQ(dropped + snapshots, 300u);
  EXPECT_NEAR(items.back().t, 30.0, 1e-9);
}

TEST(Session, AckNamesFrameAndReplayMatches) {
  SimConfig cfg = control_config(30.0);
  SessionOptions opts = fast();
  opts.rate = 50.0; // slow enough that commands land mid-run
  Session s(1, cfg, opts);
  s.start();
  std::this_thread::sleep_for(40ms);
  const Ack a = s.apply_command(close_cmd("r0c0-r0c1", 0.0));
  const Ack b = s.apply_command(Command{0, 0.0, SetPenetration{0.9}});
  ASSERT_TRUE(a.accepted) << a.reason;
  ASSERT_TRUE(b.accepted) << b.reason;
  EXPECT_EQ(a.id + 1, b.id);
  EXPECT_LE(a.frame, b.frame);
  EXPECT_LT(b.frame, 300);
  const SimResult r = s.wait();
  ASSERT_EQ(r.applied_commands.size(), 2u);
  EXPECT_EQ(r.applied_commands[0].frame, a.frame);
  EXPECT_EQ(r.applied_commands[1].frame, b.frame);

  SimConfig ref = cfg;
  ref.commands = r.applied_commands;
  EXPECT_EQ(run_sequential(ref).digest, r.digest);
}

TEST(Session, RejectsInvalidCommandsAndKeepsRunning) {
  SimConfig cfg = control_config(20.0);
  const SimResult solo = run_sequential(cfg);
  Session s(1, cfg, fast());
  s.start();
  const Ack unknown = s.apply_command(close_cmd("nowhere", 0.0));
  EXPECT_FALSE(unknown.accepted);
  EXPECT_NE(unknown.reason.find("unknown link"), std::string::npos);
  Command zero;
  zero.body = RetimeSignal{{"r1c1", {{{"r1c0-r1c1"}, 0.0, 0.0}}, 0.0}};
  EXPECT_FALSE(s.apply_command(zero).accepted);
  Command adv;
  adv.body = InjectAdvisory{{3, "rsu-r9c9", {"r0c0-r0c1"}, AdvisoryKind::Detour, 0.0, std::nullopt}};
  EXPECT_FALSE(s.apply_command(adv).accepted);
  const json err = unknown.to_json();
  EXPECT_EQ(err.at("error").at("code"), "rejected");
  const SimResult r = s.wait();
  EXPECT_EQ(r.digest, solo.digest);
  EXPECT_EQ(s.state(), SessionState::Finished);
  EXPECT_FALSE(s.apply_command(pause_cmd()).accepted);
}

TEST(Session, DuplicateAdvisoryIdRejected) {
  Session s(1, control_config(20.0), fast());
  Command adv;
  adv.body = InjectAdvisory{{3, "rsu-r1c1", {"r0c0-r0c1"}, AdvisoryKind::Detour, 0.0, std::nullopt}};
  EXPECT_TRUE(s.apply_command(adv).accepted);
  EXPECT_FALSE(s.apply_command(adv).accepted);
  s.start();
  EXPECT_EQ(s.wait().applied_commands.size(), 1u);
}

TEST(Session, StopEndsEarlyAndRecordsFrames) {
  SessionOptions opts = fast();
  opts.rate = 20.0;
  Session s(1, control_config(300.0), opts);
  s.start();
  std::this_thread::sleep_for(50ms);
  s.stop();
  EXPECT_EQ(s.state(), SessionState::Stopped);
  const RunRecord rec = s.record();
  EXPECT_GT(rec.frames, 0);
  EXPECT_LT(rec.frames, 3000);
  EXPECT_EQ(replay_run(rec).digest, rec.digest);
}

// ---------------------------------------------------------------- records

class Records : public ::testing::TestWithParam<int> {};

TEST_P(Records, SaveLoadReplayReproducesDigest) {
  const int n = GetParam();
  SimConfig cfg = control_config(30.0);
  SessionOptions opts = fast();
  opts.rate = 40.0;
  Session s(1, cfg, opts);
  s.start();
  std::vector<Command> cmds = {close_cmd("r0c1-r0c2", 0.0, 25.0), Command{0, 0.0, SetPenetration{0.2}},
                               Command{0, 0.0, InjectAdvisory{{5, "rsu-r1c1", {"r1c1-r1c2"}, AdvisoryKind::Detour,
                                                               0.0, std::nullopt}}}};
  for (int i = 0; i < n; ++i) {
    std::this_thread::sleep_for(60ms);
    ASSERT_TRUE(s.apply_command(cmds[static_cast<std::size_t>(i)]).accepted);
  }
  ASSERT_TRUE(s.apply_command(pause_cmd()).accepted);
  ASSERT_TRUE(s.apply_command(resume_cmd()).accepted);
  const SimResult live = s.wait();

  const auto dir = temp_dir("rec" + std::to_string(n));
  RunRecord rec = s.record();
  EXPECT_EQ(rec.commands.size(), static_cast<std::size_t>(n + 2));
  write_file(dir / "metrics.json", "{}\n");
  rec.outputs.push_back(manifest_entry(dir, "metrics.json"));
  save_run(rec, dir / "run.json");

  const RunRecord back = load_run(dir / "run.json");
  EXPECT_EQ(back.commands, rec.commands);
  EXPECT_EQ(back.frames, 300);
  EXPECT_EQ(back.digest, live.digest);
  const SimResult replayed = replay_run(back);
  EXPECT_EQ(replayed.digest, live.digest);
  EXPECT_EQ(replayed.cv_digest, live.cv_digest);
  std::filesystem::remove_all(dir);
}

INSTANTIATE_TEST_SUITE_P(Commands, Records, ::testing::Values(0, 3));

TEST(RecordIntegrity, TruncatedFileThrows) {
  const auto dir = temp_dir("trunc");
  SimConfig cfg = control_config(5.0);
  const SimResult r = run_sequential(cfg);
  RunRecord rec{cfg, {}, r.digest, r.cv_digest, r.frames, {}};
  save_run(rec, dir / "run.json");
  EXPECT_NO_THROW(load_run(dir / "run.json"));
  std::string text = read_file(dir / "run.json");
  write_file(dir / "run.json", text.substr(0, text.size() / 2));
  EXPECT_THROW(load_run(dir / "run.json"), IntegrityError);
  std::filesystem::remove_all(dir);
}

TEST(RecordIntegrity, EditedBodyFailsChecksum) {
  const auto dir = temp_dir("edit");
  SimConfig cfg = control_config(5.0);
  const SimResult r = run_sequential(cfg);
  json j = record_to_json({cfg, {}, r.digest, r.cv_digest, r.frames, {}});
  j["frames"] = 10;
  write_file(dir / "run.json", j.dump());
  EXPECT_THROW(load_run(dir / "run.json"), IntegrityError);
  std::filesystem::remove_all(dir);
}

TEST(RecordIntegrity, ManifestMismatchThrows) {
  const auto dir = temp_dir("manifest");
  SimConfig cfg = control_config(5.0);
  const SimResult r = run_sequential(cfg);
  write_file(dir / "trajectory.csv", "t,id\n");
  RunRecord rec{cfg, {}, r.digest, r.cv_digest, r.frames, {manifest_entry(dir, "trajectory.csv")}};
  save_run(rec, dir / "run.json");
  EXPECT_NO_THROW(load_run(dir / "run.json"));
  write_file(dir / "trajectory.csv", "t,id\n0.1,1\n");
  EXPECT_THROW(load_run(dir / "run.json"), IntegrityError);
  std::filesystem::remove(dir / "trajectory.csv");
  EXPECT_THROW(load_run(dir / "run.json"), IntegrityError);
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------- HTTP

class Http : public ::testing::Test {
protected:
  void SetUp() override {
    dir_ = temp_dir("http");
    ServerConfig sc;
    sc.base = control_config(20.0);
    sc.record_dir = dir_;
    sc.max_sessions = 2;
    sc.session = fast();
    server_ = std::make_unique<Server>(sc);
    port_ = server_->start("127.0.0.1", 0);
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    client_->set_read_timeout(60, 0);
  }

  void TearDown() override {
    server_->stop();
    std::filesystem::remove_all(dir_);
  }

  json post(const std::string& path, const std::string& body, int expect) {
    auto res = client_->Post(path, body, "application/json");
    EXPECT_TRUE(res);
    if (!res) {
      return {};
    }
    EXPECT_EQ(res->status, expect) << path << ": " << res->body;
    return json::parse(res->body);
  }

  std::uint64_t create(const json& body) { return post("/sessions", body.is_null() ? "{}" : body.dump(), 201).at("id").get<std::uint64_t>(); }

  std::filesystem::path dir_;
  std::unique_ptr<Server> server_;
  std::unique_ptr<httplib::Client> client_;
  int port_ = 0;
};

TEST_F(Http, StopPersistsReplayableRecord) {
  const auto id = create({{"rate", 20.0}});
  post("/sessions/" + std::to_string(id) + "/start", "", 200);
  std::this_thread::sleep_for(80ms);
  const json ack = post("/sessions/" + std::to_string(id) + "/commands",
                        command_to_json(close_cmd("r0c0-r0c1", 0.0)).dump(), 200);
  EXPECT_TRUE(ack.at("accepted").get<bool>());
  const json stopped = post("/sessions/" + std::to_string(id) + "/stop", "", 200);
  EXPECT_EQ(stopped.at("state"), "stopped");
  const auto path = server_->record_path(id);
  ASSERT_TRUE(std::filesystem::exists(path));
  const RunRecord rec = load_run(path);
  EXPECT_EQ(hex_digest(rec.digest), stopped.at("digest"));
  EXPECT_EQ(replay_run(rec).digest, rec.digest);

  auto got = client_->Get("/sessions/" + std::to_string(id) + "/record");
  ASSERT_TRUE(got);
  EXPECT_EQ(got->status, 200);
  EXPECT_EQ(json::parse(got->body), record_to_json(rec));
}

TEST_F(Http, ConcurrentSessionsMatchSoloDigests) {
  const auto a = create({{"seed", 11}});
  const auto b = create({{"seed", 12}, {"workers", 1}});
  post("/sessions/" + std::to_string(a) + "/start", "", 200);
  post("/sessions/" + std::to_string(b) + "/start", "", 200);
  SimConfig ca = control_config(20.0, 11);
  SimConfig cb = control_config(20.0, 12);
  cb.workers = 1;
  EXPECT_EQ(server_->session(a)->wait().digest, run_sequential(ca).digest);
  EXPECT_EQ(server_->session(b)->wait().digest, run_sequential(cb).digest);
  EXPECT_NE(server_->session(a)->wait().digest, server_->session(b)->wait().digest);
}

TEST_F(Http, SessionLimit) {
  create({});
  create({});
  post("/sessions", "{}", 503);
}

TEST_F(Http, MalformedInputGetsStructuredErrors) {
  const auto id = create({});
  const std::string base = "/sessions/" + std::to_string(id);
  EXPECT_EQ(post(base + "/commands", "{not json", 400).at("error").at("code"), "malformed_json");
  EXPECT_EQ(post(base + "/commands", R"({"kind":"teleport"})", 400).at("error").at("code"), "bad_command");
  const json rejected = post(base + "/commands", command_to_json(close_cmd("nowhere", 0.0)).dump(), 422);
  EXPECT_FALSE(rejected.at("accepted").get<bool>());
  EXPECT_EQ(post("/sessions", "[1,2]", 400).at("error").at("code"), "bad_request");
  EXPECT_EQ(post("/sessions", R"({"workers":0})", 400).at("error").at("code"), "bad_request");
  EXPECT_EQ(post("/sessions/999/start", "", 404).at("error").at("code"), "not_found");
  auto rec = client_->Get(base + "/record");
  ASSERT_TRUE(rec);
  EXPECT_EQ(rec->status, 409);
}

TEST_F(Http, StreamDeliversNdjsonUntilEnd) {
  const auto id = create({});
  const std::string base = "/sessions/" + std::to_string(id);
  std::string body;
  std::thread reader([&] {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(60, 0);
    c.Get(base + "/stream?every=20", [&](const char* data, std::size_t n) {
      body.append(data, n);
      return true;
    });
  });
  while (server_->session(id)->subscribers() == 0) {
    std::this_thread::sleep_for(5ms);
  }
  post(base + "/start", "", 200);
  reader.join();
  std::istringstream lines(body);
  std::string line;
  std::vector<double> ts;
  std::string last_type;
  while (std::getline(lines, line)) {
    const json j = json::parse(line);
    last_type = j.at("type");
    if (last_type == "snapshot" && !j.contains("keepalive")) {
      ts.push_back(j.at("t").get<double>());
    }
  }
  EXPECT_EQ(last_type, "end");
  ASSERT_EQ(ts.size(), 10u);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_NEAR(ts[i], 2.0 * static_cast<double>(i + 1), 1e-9);
  }
}

TEST_F(Http, ScenarioAndPlans) {
  auto sc = client_->Get("/scenario");
  ASSERT_TRUE(sc);
  EXPECT_EQ(parse_scenario(sc->body), *control_config().scenario);
  auto plans = client_->Get("/plans");
  ASSERT_TRUE(plans);
  const json p = json::parse(plans->body);
  EXPECT_TRUE(p.contains("mobility"));
  EXPECT_TRUE(p.contains("comm"));
}
