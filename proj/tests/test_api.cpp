#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <httplib.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "samref/api_service.hpp"
#include "samref/error.hpp"
#include "samref/image_io.hpp"
#include "samref/trainer.hpp"
#include "samref/util.hpp"
#include "support.hpp"

using namespace samref;
using namespace samref::testing;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("samref_api_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// One trained-free tiny model shared by every test; optional cache.
struct Service {
  SamRefModel<float> model{tiny_dims()};
  LoadedPipeline lp;
  std::shared_ptr<const Pipeline> pipeline;
  std::shared_ptr<SessionManager> sessions;

  explicit Service(ServiceOptions o = {}, const fs::path& cache_dir = {}) {
    model.init(17);
    std::shared_ptr<const EmbeddingCache> cache;
    if (!cache_dir.empty()) cache = std::make_shared<EmbeddingCache>(cache_dir, encoder_tag(model));
    lp = make_pipeline(model, cache);
    // The manager shares ownership of the pipeline through an aliasing pointer.
    pipeline = std::shared_ptr<const Pipeline>(std::shared_ptr<void>(), lp.pipeline.get());
    o.checkpoint_hash = o.checkpoint_hash.empty() ? "abc123" : o.checkpoint_hash;
    o.version = "test";
    sessions = std::make_shared<SessionManager>(pipeline, o);
  }
};

std::vector<std::uint8_t> sample_png(int index, int size = 64) {
  SyntheticOptions o;
  o.count = 8;
  o.seed = 77;
  o.image_size = size;
  o.map_size = size / 4;
  o.min_foreground = 16;
  return encode_png(generate_sample(o, index).image);
}

std::string as_string(const std::vector<std::uint8_t>& v) { return std::string(v.begin(), v.end()); }

std::vector<std::uint8_t> base64_decode(const std::string& s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    return c == '+' ? 62 : c == '/' ? 63 : -1;
  };
  std::vector<std::uint8_t> out;
  int acc = 0, bits = 0;
  for (char c : s) {
    const int v = val(c);
    if (v < 0) break;
    acc = (acc << 6) | v;
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xff));
    }
  }
  return out;
}

json post_click(httplib::Client& cli, const std::string& id, int x, int y, const char* pol,
                int want_status = 200) {
  json body{{"x", x}, {"y", y}, {"polarity", pol}};
  auto res = cli.Post("/v1/sessions/" + id + "/clicks", body.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == want_status);
  return json::parse(res->body);
}

std::string create_session(httplib::Client& cli, const std::vector<std::uint8_t>& png) {
  auto res = cli.Post("/v1/sessions", as_string(png), "image/png");
  REQUIRE(res);
  REQUIRE(res->status == 201);
  return json::parse(res->body).at("id");
}

const std::vector<std::array<int, 3>> kScript{
    {32, 32, 0}, {20, 40, 1}, {44, 18, 0}, {10, 10, 1}, {50, 52, 0}, {33, 12, 0}};

}  // namespace

TEST_CASE("RLE reference vectors and round trip") {
  BinaryMask m(2, 3);
  m.bits = {0, 1, 1, 1, 0, 0};
  CHECK(rle_encode(m).counts == std::vector<std::uint32_t>{1, 3, 2});
  BinaryMask lead(2, 2);
  lead.bits = {1, 1, 0, 0};
  CHECK(rle_encode(lead).counts == std::vector<std::uint32_t>{0, 2, 2});
  CHECK(rle_encode(BinaryMask(2, 2)).counts == std::vector<std::uint32_t>{4});
  BinaryMask full(1, 3);
  full.bits = {1, 1, 1};
  CHECK(rle_encode(full).counts == std::vector<std::uint32_t>{0, 3});

  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    const BinaryMask r = random_mask(rng, 7, 9, 0.4);
    const MaskRle e = rle_encode(r);
    CHECK(rle_decode(e) == r);
    CHECK(rle_from_json(rle_to_json(e)) == e);
  }
  CHECK_THROWS_AS(rle_decode(MaskRle{2, 2, {1, 2}}), Error);
  CHECK_THROWS_AS(rle_decode(MaskRle{2, 2, {3, 2}}), Error);
}

TEST_CASE("session manager: first click, working-resolution mask, timings") {
  Service svc;
  auto& mgr = *svc.sessions;
  const std::string id = mgr.create(sample_png(0));
  json st = mgr.state(id);
  CHECK(st["num_clicks"] == 0);
  CHECK(st["mask_rle"].is_null());
  CHECK(st["image"]["width"] == 64);

  const json r = mgr.click(id, 30, 29, Polarity::Positive);
  CHECK(r["selector"] == "skip");
  CHECK(r["click_index"] == 1);
  const MaskRle rle = rle_from_json(r["mask_rle"]);
  CHECK(rle.height == 64);
  CHECK(rle.width == 64);
  CHECK_NOTHROW(rle_decode(rle));
  const auto& t = r["timings_ms"];
  const double parts = t["decode"].get<double>() + t["globaldiff"].get<double>() +
                       t["patchdiff"].get<double>() + t["postprocess"].get<double>();
  CHECK(parts <= t["total"].get<double>() * 1.0000001);
  CHECK(parts >= 0.95 * t["total"].get<double>());
  const Image8 heat = decode_png(base64_decode(r["error_heatmap_png_b64"]), 1);
  CHECK(heat.width == tiny_dims().map_size);

  CHECK_THROWS_AS(mgr.click(id, 64, 0, Polarity::Positive), Error);
  CHECK(mgr.state(id)["num_clicks"] == 1);
  CHECK_THROWS_AS(mgr.click("missing", 1, 1, Polarity::Positive), Error);
  try {
    mgr.create({1, 2, 3});
    FAIL("corrupt bytes accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Format);
  }
}

TEST_CASE("undo restores the exact prior state; nothing left to undo is a conflict") {
  Service svc;
  auto& mgr = *svc.sessions;
  const std::string id = mgr.create(sample_png(1));
  const json empty = mgr.state(id);
  const json a = mgr.click(id, 32, 32, Polarity::Positive);
  const json after_a = mgr.state(id);
  mgr.click(id, 12, 50, Polarity::Negative);
  const json back = mgr.undo(id);
  CHECK(back == after_a);
  CHECK(back["mask_rle"] == a["mask_rle"]);
  // Clicking again after undo replays the same interaction.
  const json b1 = mgr.click(id, 12, 50, Polarity::Negative);
  mgr.undo(id);
  const json b2 = mgr.click(id, 12, 50, Polarity::Negative);
  CHECK(b1["mask_rle"] == b2["mask_rle"]);
  CHECK(b1["error_heatmap_png_b64"] == b2["error_heatmap_png_b64"]);
  mgr.undo(id);
  CHECK(mgr.undo(id) == empty);
  try {
    mgr.undo(id);
    FAIL("second undo accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Conflict);
  }
}

TEST_CASE("idle sessions expire and write their log") {
  const auto dir = temp_dir("idle");
  ServiceOptions o;
  o.idle_timeout = std::chrono::milliseconds(50);
  o.log_dir = dir;
  Service svc(o);
  auto& mgr = *svc.sessions;
  const std::string old_id = mgr.create(sample_png(2));
  mgr.click(old_id, 30, 30, Polarity::Positive);
  std::this_thread::sleep_for(std::chrono::milliseconds(120));
  const std::string fresh = mgr.create(sample_png(3));
  CHECK(mgr.expire_idle() == 1);
  CHECK(mgr.session_count() == 1);
  CHECK_THROWS_AS(mgr.state(old_id), Error);
  CHECK_NOTHROW(mgr.state(fresh));
  std::ifstream in(dir / (old_id + ".jsonl"));
  std::vector<std::string> events;
  for (std::string line; std::getline(in, line);) events.push_back(json::parse(line)["event"]);
  CHECK(events == std::vector<std::string>{"create", "click", "expired"});
  fs::remove_all(dir);
}

TEST_CASE("replaying a click log reproduces every mask") {
  Service svc;
  auto& mgr = *svc.sessions;
  const auto png = sample_png(4);
  const std::string a = mgr.create(png);
  for (const auto& [x, y, p] : kScript) mgr.click(a, x, y, p ? Polarity::Negative : Polarity::Positive);
  mgr.undo(a);
  mgr.click(a, 5, 60, Polarity::Positive);

  // Replay the log in a different manager over the same model.
  Service svc2;
  const std::string b = svc2.sessions->create(png);
  for (const json& e : mgr.session_log(a)) {
    if (e["event"] == "click") {
      const json r = svc2.sessions->click(b, e["x"], e["y"],
                                          e["polarity"] == "negative" ? Polarity::Negative : Polarity::Positive);
      BinaryMask m = rle_decode(rle_from_json(r["mask_rle"]));
      CHECK(sha256_hex(std::span<const std::uint8_t>(m.bits.data(), m.bits.size())) == e["mask_sha256"]);
      CHECK(r["selector"] == e["selector"]);
    } else if (e["event"] == "undo") {
      svc2.sessions->undo(b);
    }
  }
  CHECK(svc2.sessions->state(b) == [&] {
    json s = mgr.state(a);
    s["id"] = b;
    return s;
  }());
}

TEST_CASE("same image twice: the second session hits the embedding cache") {
  const auto dir = temp_dir("cache");
  Service svc({}, dir);
  auto& mgr = *svc.sessions;
  const auto png = sample_png(5);
  mgr.create(png);
  CHECK(mgr.health()["embedding_cache_hits"] == 0);
  mgr.create(png);
  CHECK(mgr.health()["embedding_cache_hits"] == 1);
  CHECK(mgr.health()["sessions"] == 2);
  fs::remove_all(dir);
}

TEST_CASE("HTTP: endpoint shapes and error mapping") {
  Service svc;
  ApiServer server(svc.sessions);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);

  auto h = cli.Get("/v1/health");
  REQUIRE(h);
  CHECK(h->status == 200);
  const json health = json::parse(h->body);
  CHECK(health["checkpoint_sha256"] == "abc123");
  CHECK(health["status"] == "ok");

  // Multipart upload.
  httplib::MultipartFormDataItems items{{"image", as_string(sample_png(0)), "a.png", "image/png"}};
  auto created = cli.Post("/v1/sessions", items);
  REQUIRE(created);
  CHECK(created->status == 201);
  const std::string id = json::parse(created->body)["id"];

  auto st = cli.Get("/v1/sessions/" + id);
  REQUIRE(st);
  CHECK(st->status == 200);
  CHECK(json::parse(st->body)["num_clicks"] == 0);

  const json r = post_click(cli, id, 30, 30, "positive");
  CHECK(r["selector"] == "skip");
  for (const char* k : {"mask_rle", "error_heatmap_png_b64", "selector", "timings_ms", "click_index"})
    CHECK(r.contains(k));

  auto expect_error = [&](const httplib::Result& res, int status, const std::string& code) {
    REQUIRE(res);
    CHECK(res->status == status);
    const json e = json::parse(res->body);
    CHECK(e["code"] == code);
    CHECK(e["message"].is_string());
    CHECK(e.size() == 2);
  };
  expect_error(cli.Post("/v1/sessions", "not a png", "image/png"), 400, "format");
  expect_error(cli.Post("/v1/sessions", "", "image/png"), 400, "invalid_argument");
  expect_error(cli.Post("/v1/sessions/" + id + "/clicks", "{bad json", "application/json"), 400,
               "invalid_argument");
  expect_error(cli.Post("/v1/sessions/" + id + "/clicks", R"({"x": 1.5, "y": 2})", "application/json"),
               400, "invalid_argument");
  expect_error(cli.Post("/v1/sessions/" + id + "/clicks", R"({"x": 1, "y": 2, "polarity": "maybe"})",
                        "application/json"),
               400, "invalid_argument");
  expect_error(cli.Post("/v1/sessions/" + id + "/clicks", R"({"x": 100, "y": 2})", "application/json"),
               400, "invalid_argument");
  expect_error(cli.Get("/v1/sessions/deadbeef"), 404, "not_found");
  expect_error(cli.Post("/v1/sessions/deadbeef/undo", "", "application/json"), 404, "not_found");
  expect_error(cli.Get("/v1/nothing"), 404, "not_found");

  auto u1 = cli.Post("/v1/sessions/" + id + "/undo", "", "application/json");
  REQUIRE(u1);
  CHECK(u1->status == 200);
  expect_error(cli.Post("/v1/sessions/" + id + "/undo", "", "application/json"), 409, "conflict");
  server.stop();
}

TEST_CASE("HTTP: oversize uploads are 413") {
  Service svc;
  ApiServer server(svc.sessions);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);
  const std::string huge(ApiServer::kMaxBodyBytes + 1024, 'x');
  auto res = cli.Post("/v1/sessions", huge, "image/png");
  REQUIRE(res);
  CHECK(res->status == 413);
  CHECK(json::parse(res->body)["code"] == "too_large");

  // A small PNG that declares more pixels than the decoder accepts.
  Image8 tiny(1, 1, 3);
  auto png = encode_png(tiny);
  // Patch the IHDR width/height (bytes 16..23, big endian) to 8000 x 8000.
  for (int k : {16, 20}) {
    png[k] = 0;
    png[k + 1] = 0;
    png[k + 2] = 0x1f;
    png[k + 3] = 0x40;
  }
  // Fix the IHDR CRC so only the size check can reject it.
  const std::uint32_t crc = crc32(std::span<const std::uint8_t>(png.data() + 12, 17));
  for (int b = 0; b < 4; ++b) png[29 + b] = static_cast<std::uint8_t>(crc >> (24 - 8 * b));
  auto big = cli.Post("/v1/sessions", as_string(png), "image/png");
  REQUIRE(big);
  CHECK(big->status == 413);
  server.stop();
}

TEST_CASE("HTTP: concurrent sessions are isolated, and stop flushes logs") {
  const auto dir = temp_dir("conc");
  ServiceOptions o;
  o.log_dir = dir;
  const int kSessions = 5;

  // Serial reference run.
  std::vector<std::vector<json>> expected(kSessions);
  {
    Service ref;
    for (int s = 0; s < kSessions; ++s) {
      const std::string id = ref.sessions->create(sample_png(s));
      for (const auto& [x, y, p] : kScript)
        expected[s].push_back(ref.sessions->click(id, x, y, p ? Polarity::Negative : Polarity::Positive));
    }
  }

  Service svc(o);
  ApiServer server(svc.sessions);
  const int port = server.start("127.0.0.1", 0);
  std::vector<std::vector<json>> got(kSessions);
  std::vector<std::string> ids(kSessions);
  std::vector<std::thread> workers;
  for (int s = 0; s < kSessions; ++s)
    workers.emplace_back([&, s] {
      httplib::Client cli("127.0.0.1", port);
      auto res = cli.Post("/v1/sessions", as_string(sample_png(s)), "image/png");
      if (!res || res->status != 201) return;
      ids[s] = json::parse(res->body)["id"];
      for (const auto& [x, y, p] : kScript) {
        json body{{"x", x}, {"y", y}, {"polarity", p ? "negative" : "positive"}};
        auto r = cli.Post("/v1/sessions/" + ids[s] + "/clicks", body.dump(), "application/json");
        if (!r || r->status != 200) return;
        got[s].push_back(json::parse(r->body));
      }
    });
  for (auto& w : workers) w.join();
  for (int s = 0; s < kSessions; ++s) {
    REQUIRE(got[s].size() == kScript.size());
    for (std::size_t k = 0; k < kScript.size(); ++k) {
      CHECK(got[s][k]["mask_rle"] == expected[s][k]["mask_rle"]);
      CHECK(got[s][k]["error_heatmap_png_b64"] == expected[s][k]["error_heatmap_png_b64"]);
      CHECK(got[s][k]["selector"] == expected[s][k]["selector"]);
    }
  }
  server.stop();
  server.stop();  // idempotent
  for (int s = 0; s < kSessions; ++s) {
    std::ifstream in(dir / (ids[s] + ".jsonl"));
    int lines = 0;
    for (std::string line; std::getline(in, line);) ++lines;
    CHECK(lines == 1 + int(kScript.size()));
  }
  fs::remove_all(dir);
}

TEST_CASE("HTTP: the reaper expires idle sessions; a taken port is an error") {
  ServiceOptions o;
  o.idle_timeout = std::chrono::milliseconds(100);
  Service svc(o);
  ApiServer server(svc.sessions);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);
  const std::string id = create_session(cli, sample_png(6));
  std::this_thread::sleep_for(std::chrono::milliseconds(1600));
  auto res = cli.Get("/v1/sessions/" + id);
  REQUIRE(res);
  CHECK(res->status == 404);

  ApiServer second(svc.sessions);
  try {
    second.start("127.0.0.1", port);
    FAIL("bound a port already in use");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Io);
    CHECK(std::string(e.what()).find("in use") != std::string::npos);
  }
  server.stop();
}
