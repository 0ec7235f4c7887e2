#include <gtest/gtest.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <thread>

#include "gne/server.hpp"
#include "http_client.hpp"

using namespace gne;
using namespace gne::testing;
using nlohmann::json;

namespace {

Session small_session() {
  GneConfig g;
  g.width = 8;
  g.n_res_blocks = 1;
  g.noise_sigma = 0.1;
  TrainConfig t;
  t.lr = 1e-2;
  t.batch_size = 16;
  t.seed = 11;
  return make_gne_session(synth_blobs(4, 16, 16, 0.03, 7), g, t);
}

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "gne_test_server";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename Pred>
bool wait_until(Pred pred, double seconds = 60) {
  const auto end = std::chrono::steady_clock::now() + std::chrono::duration<double>(seconds);
  while (std::chrono::steady_clock::now() < end) {
    if (pred()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  return false;
}

class LiveServer : public ::testing::Test {
 protected:
  void SetUp() override {
    trainer_ = std::make_unique<LiveTrainer>(small_session(), false);
    server_ = std::make_unique<Server>(*trainer_, 0);
    port_ = server_->port();
    trainer_->start();
    thread_ = std::thread([this] { server_->run(); });
  }

  void TearDown() override {
    trainer_->request_stop();
    thread_.join();
    server_.reset();
    trainer_.reset();
  }

  json status() { return http_get(port_, "/status").json(); }
  json snapshot() { return http_get(port_, "/snapshot").json(); }

  HttpReply cmd(const std::string& id, const std::string& kind, json extra = json::object()) {
    extra["request_id"] = id;
    extra["kind"] = kind;
    return command(port_, extra);
  }

  std::unique_ptr<LiveTrainer> trainer_;
  std::unique_ptr<Server> server_;
  unsigned short port_ = 0;
  std::thread thread_;
};

} // namespace

TEST(CommandParse, KindsAndFields) {
  const Command pin = parse_command(R"({"request_id":"a","kind":"Pin","moves":[{"id":5,"x":0.5,"y":-1}]})");
  EXPECT_EQ(pin.kind, CommandKind::Pin);
  ASSERT_EQ(pin.moves.size(), 1u);
  EXPECT_EQ(pin.moves[0].first, 5u);
  EXPECT_EQ(pin.moves[0].second[1], -1.0);
  EXPECT_EQ(parse_command(R"({"request_id":"b","kind":"Step","count":3})").count, 3u);
  EXPECT_EQ(parse_command(R"({"request_id":"c","kind":"Unpin","ids":[1,2]})").ids.size(), 2u);
  EXPECT_EQ(parse_command(R"({"request_id":"d","kind":"SetLr","lr":0.5})").lr, 0.5);
}

TEST(CommandParse, Rejections) {
  EXPECT_THROW(parse_command("{not json"), BadCommand);
  EXPECT_THROW(parse_command(R"({"kind":"Pause"})"), BadCommand);
  try {
    parse_command(R"({"request_id":"z","kind":"Teleport"})");
    FAIL();
  } catch (const BadCommand& e) {
    EXPECT_EQ(e.request_id, "z");
    EXPECT_NE(std::string(e.what()).find("Teleport"), std::string::npos);
  }
  EXPECT_THROW(parse_command(R"({"request_id":"p","kind":"Pin","moves":[{"id":-1,"x":0,"y":0}]})"), BadCommand);
  EXPECT_THROW(parse_command(R"({"request_id":"s","kind":"Step","count":0})"), BadCommand);
}

TEST(SnapshotSize, SixtyThousandPointsUnderTwoMegabytes) {
  Snapshot s;
  s.embeddings = Matrix(60000, 2);
  RngStream rng(1);
  for (double& v : s.embeddings.values()) v = round5(20 * rng.next_unit() - 10);
  EXPECT_LT(snapshot_json(s).dump().size(), 2u * 1024 * 1024);
}

TEST_F(LiveServer, StatusAndSnapshotShape) {
  const json st = status();
  EXPECT_EQ(st["epoch"], 0);
  EXPECT_EQ(st["running"], false);
  EXPECT_TRUE(st["mse"].is_number());
  const json snap = snapshot();
  EXPECT_EQ(snap["embeddings"].size(), 64u);
  EXPECT_EQ(snap["embeddings"][0].size(), 2u);
  EXPECT_TRUE(snap["pinned"].empty());
}

TEST_F(LiveServer, PausedSnapshotsAreIdentical) {
  ASSERT_EQ(cmd("r", "Resume").status, 200);
  ASSERT_TRUE(wait_until([&] { return status()["epoch"].get<int>() >= 2; }));
  const HttpReply p = cmd("p", "Pause");
  ASSERT_EQ(p.status, 200);
  EXPECT_EQ(p.json()["request_id"], "p");
  EXPECT_EQ(p.json()["ok"], true);
  const std::string a = http_get(port_, "/snapshot").body;
  const std::string b = http_get(port_, "/snapshot").body;
  EXPECT_EQ(a, b);
  EXPECT_EQ(json::parse(a)["running"], false);
}

TEST_F(LiveServer, PinSurvivesTrainingAndUnpinReleases) {
  ASSERT_EQ(cmd("1", "Pin", {{"moves", {{{"id", 5}, {"x", 0.0}, {"y", 0.0}}}}}).status, 200);
  EXPECT_EQ(snapshot()["pinned"], json::array({5}));
  ASSERT_EQ(cmd("2", "Step", {{"count", 10}}).status, 200);
  ASSERT_TRUE(wait_until([&] { return status()["epoch"] == 10 && status()["running"] == false; }));
  json snap = snapshot();
  EXPECT_EQ(snap["embeddings"][5], json::array({0.0, 0.0}));
  EXPECT_EQ(trainer_->snapshot()->embeddings(5, 0), 0.0);

  ASSERT_EQ(cmd("3", "Unpin", {{"ids", {5}}}).status, 200);
  ASSERT_EQ(cmd("4", "Step", {{"count", 3}}).status, 200);
  ASSERT_TRUE(wait_until([&] { return status()["epoch"] == 13 && status()["running"] == false; }));
  snap = snapshot();
  EXPECT_TRUE(snap["pinned"].empty());
  EXPECT_NE(snap["embeddings"][5], json::array({0.0, 0.0}));
}

TEST_F(LiveServer, CommandsApplyInOrder) {
  cmd("a", "Pin", {{"moves", {{{"id", 2}, {"x", 1.0}, {"y", 1.0}}}}});
  cmd("b", "Pin", {{"moves", {{{"id", 2}, {"x", 2.0}, {"y", -2.0}}}}});
  EXPECT_EQ(snapshot()["embeddings"][2], json::array({2.0, -2.0}));
}

TEST_F(LiveServer, DecodeMatchesCheckpointedModel) {
  ASSERT_EQ(cmd("s", "Step", {{"count", 2}}).status, 200);
  ASSERT_TRUE(wait_until([&] { return status()["epoch"] == 2 && status()["running"] == false; }));
  const std::string path = temp_path("decode.ckpt");
  ASSERT_EQ(cmd("c", "Checkpoint", {{"path", path}}).status, 200);
  const Session saved = load_checkpoint(path);
  const json snap = snapshot();
  for (int id : {0, 17, 63}) {
    const double x = snap["embeddings"][id][0], y = snap["embeddings"][id][1];
    const HttpReply r = http_get(port_, "/decode?x=" + exact(x) + "&y=" + exact(y));
    ASSERT_EQ(r.status, 200);
    EXPECT_EQ(r.content_type, "application/octet-stream");
    const double z[2] = {x, y};
    ImageSheet want(4, 4);
    const auto out = decode_point(saved.gne(), z);
    for (std::size_t k = 0; k < 16; ++k) want.pixels[k] = to_gray(out[k]);
    EXPECT_EQ(r.body, encode_pgm(want));
    const json j = http_get(port_, "/decode?x=" + exact(x) + "&y=" + exact(y) + "&format=json").json();
    EXPECT_EQ(j["pgm_base64"].get<std::string>(), detail::base64(encode_pgm(want)));
    EXPECT_EQ(j["height"], 4);
  }
}

TEST_F(LiveServer, DecodeIsSideEffectFree) {
  const std::string a = temp_path("before.ckpt"), b = temp_path("after.ckpt");
  ASSERT_EQ(cmd("1", "Checkpoint", {{"path", a}}).status, 200);
  for (int i = 0; i < 20; ++i) http_get(port_, "/decode?x=0.1&y=" + std::to_string(i));
  ASSERT_EQ(cmd("2", "Checkpoint", {{"path", b}}).status, 200);
  EXPECT_EQ(detail::read_file(a), detail::read_file(b));
}

TEST_F(LiveServer, ErrorStatuses) {
  const HttpReply bad = http_post(port_, "/command", "{oops");
  EXPECT_EQ(bad.status, 400);
  EXPECT_FALSE(bad.json()["error"].get<std::string>().empty());
  const HttpReply unknown = cmd("u", "Explode");
  EXPECT_EQ(unknown.status, 400);
  EXPECT_EQ(unknown.json()["request_id"], "u");
  EXPECT_EQ(http_get(port_, "/decode?x=nan&y=0").status, 422);
  EXPECT_EQ(http_get(port_, "/decode?x=0&y=inf").status, 422);
  EXPECT_EQ(http_get(port_, "/decode?x=0").status, 400);
  EXPECT_EQ(http_get(port_, "/decode?x=abc&y=0").status, 400);
  EXPECT_EQ(http_get(port_, "/nowhere").status, 404);
  const HttpReply range = cmd("r", "Pin", {{"moves", {{{"id", 64}, {"x", 0.0}, {"y", 0.0}}}}});
  EXPECT_EQ(range.status, 422);
  EXPECT_EQ(range.json()["ok"], false);
  EXPECT_EQ(cmd("l", "SetLr", {{"lr", -1.0}}).status, 422);
  EXPECT_EQ(cmd("l2", "SetLr", {{"lr", 0.5}}).status, 200);
}

TEST_F(LiveServer, WebSocketSnapshotDeltasAndCommands) {
  WsClient ws(port_);
  const json first = ws.read();
  EXPECT_EQ(first["type"], "snapshot");
  EXPECT_EQ(first["embeddings"].size(), 64u);

  ws.send({{"request_id", "w1"}, {"kind", "Pin"}, {"moves", {{{"id", 9}, {"x", 0.5}, {"y", 0.25}}}}});
  bool got_reply = false, got_delta = false;
  while (!got_reply || !got_delta) {
    const json f = ws.read();
    if (f["type"] == "reply") {
      EXPECT_EQ(f["request_id"], "w1");
      EXPECT_EQ(f["ok"], true);
      got_reply = true;
    } else if (f["type"] == "delta") {
      ASSERT_EQ(f["deltas"].size(), 1u);
      EXPECT_EQ(f["deltas"][0]["id"], 9);
      EXPECT_EQ(f["deltas"][0]["x"], 0.5);
      EXPECT_EQ(f["pinned"], json::array({9}));
      got_delta = true;
    }
  }

  ws.send({{"request_id", "w1"}, {"kind", "Resume"}});
  const json dup = ws.read_type("reply");
  EXPECT_EQ(dup["ok"], false);
  ws.send({{"kind", "Resume"}});
  EXPECT_EQ(ws.read_type("reply")["ok"], false);

  ws.send({{"request_id", "w2"}, {"kind", "Step"}, {"count", 2}});
  std::size_t last_epoch = 0;
  while (last_epoch < 2) {
    const json f = ws.read_type("delta");
    EXPECT_GE(f["epoch"].get<std::size_t>(), last_epoch);
    last_epoch = f["epoch"];
  }
}

TEST(LiveShutdown, ShutdownCommandStopsServe) {
  unsigned short port = 0;
  std::atomic<bool> listening{false};
  Session result;
  std::thread t([&] {
    result = serve(small_session(), 0, false, [&](unsigned short p) {
      port = p;
      listening = true;
    });
  });
  ASSERT_TRUE(wait_until([&] { return listening.load(); }));
  const HttpReply r = command(port, {{"request_id", "bye"}, {"kind", "Shutdown"}});
  EXPECT_EQ(r.status, 200);
  EXPECT_EQ(r.json()["ok"], true);
  t.join();
  EXPECT_EQ(result.epoch, 0u);
}
