// Exercises the shared library through its C header only.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <samref.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("samref_capi_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string take(char* s) {
  std::string out = s ? s : "";
  samref_string_free(s);
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const char* kTinyDims =
    "map_size = 16\nemb_channels = 8\nfeat_channels = 8\nenc_width = 4\ntoken_dim = 8\n"
    "crop_size = 8\ndisk_radius = 2\n";

samref_dataset_options tiny_data(int count) {
  samref_dataset_options o;
  samref_dataset_options_default(&o);
  o.count = count;
  o.seed = 3;
  o.image_size = 64;
  o.map_size = 16;
  o.min_foreground = 16;
  return o;
}

int stop_after_first(const samref_step_stats*, void* user) {
  ++*static_cast<int*>(user);
  return 1;
}

}  // namespace

TEST_CASE("status names, version, argument checks") {
  CHECK(std::string(samref_version()).size() > 0);
  CHECK(std::string(samref_status_name(SAMREF_E_CONFLICT)) == "conflict");
  CHECK(samref_generate_dataset(nullptr, nullptr, 0) == SAMREF_E_INVALID_ARGUMENT);
  CHECK(std::string(samref_last_error()).size() > 0);
  samref_string_free(nullptr);
  samref_model_free(nullptr);
  samref_trainer_free(nullptr);
  samref_service_free(nullptr);
  samref_model* m = nullptr;
  CHECK(samref_model_load("/nonexistent/x.ckpt", nullptr, &m) != SAMREF_OK);
  CHECK(m == nullptr);
}

TEST_CASE("dataset generation refuses to overwrite without force") {
  const auto dir = temp_dir("data");
  const auto opts = tiny_data(3);
  REQUIRE(samref_generate_dataset((dir / "d").c_str(), &opts, 0) == SAMREF_OK);
  CHECK(fs::exists(dir / "d" / "run_manifest.json"));
  char* h1 = nullptr;
  REQUIRE(samref_directory_hash((dir / "d").c_str(), &h1) == SAMREF_OK);
  const std::string hash = take(h1);
  CHECK(hash.size() == 64);
  CHECK(samref_generate_dataset((dir / "d").c_str(), &opts, 0) == SAMREF_E_CONFLICT);
  REQUIRE(samref_generate_dataset((dir / "d").c_str(), &opts, 1) == SAMREF_OK);
  char* h2 = nullptr;
  REQUIRE(samref_directory_hash((dir / "d").c_str(), &h2) == SAMREF_OK);
  CHECK(take(h2) == hash);
  fs::remove_all(dir);
}

TEST_CASE("trainer config errors") {
  samref_trainer* t = nullptr;
  CHECK(samref_trainer_create("stage = 1\nwhat = 1\nzzz = 2\n", &t) == SAMREF_E_CONFIG);
  CHECK(std::string(samref_last_error()).find("what, zzz") != std::string::npos);
  CHECK(t == nullptr);
  CHECK(samref_trainer_create("stage = 2\ndataset = x\n", &t) == SAMREF_E_CONFIG);
  CHECK(std::string(samref_last_error()).find("stage-1 checkpoint") != std::string::npos);
  char* keys = nullptr;
  REQUIRE(samref_train_config_keys(&keys) == SAMREF_OK);
  const std::string k = take(keys);
  CHECK(k.find("learning_rate\n") != std::string::npos);
  CHECK(k.find("map_size\n") != std::string::npos);
}

TEST_CASE("train, cache, evaluate, report and serve through the C API") {
  const auto dir = temp_dir("flow");
  const auto opts = tiny_data(4);
  const std::string data = (dir / "data").string();
  REQUIRE(samref_generate_dataset(data.c_str(), &opts, 0) == SAMREF_OK);

  // Stage 0 then stage 1 on top of it.
  std::string cfg0 = std::string(kTinyDims) + "stage = 0\niterations = 3\nbatch_size = 2\n" +
                     "dataset = " + data + "\noutput = " + (dir / "s0.ckpt").string() + "\n";
  samref_trainer* t = nullptr;
  REQUIRE(samref_trainer_create(cfg0.c_str(), &t) == SAMREF_OK);
  samref_step_stats last{};
  REQUIRE(samref_trainer_run(t, nullptr, nullptr, &last) == SAMREF_OK);
  CHECK(last.step == 3);
  CHECK(last.total > 0);
  samref_trainer_free(t);
  CHECK(fs::exists(dir / "s0.ckpt"));
  CHECK(fs::exists(dir / "s0.manifest.json"));

  std::string cfg1 = std::string(kTinyDims) + "stage = 1\niterations = 5\nbatch_size = 2\n" +
                     "dataset = " + data + "\ninit_checkpoint = " + (dir / "s0.ckpt").string() +
                     "\noutput = " + (dir / "s1.ckpt").string() + "\n";
  REQUIRE(samref_trainer_create(cfg1.c_str(), &t) == SAMREF_OK);
  int calls = 0;
  REQUIRE(samref_trainer_run(t, stop_after_first, &calls, &last) == SAMREF_OK);
  CHECK(calls == 1);
  CHECK(last.step == 1);
  samref_trainer_free(t);
  const std::string ckpt = (dir / "s1.ckpt").string();
  REQUIRE(fs::exists(ckpt));

  int written = -1, failed = -1;
  const std::string cache = (dir / "cache").string();
  REQUIRE(samref_cache_embeddings(ckpt.c_str(), data.c_str(), cache.c_str(), &written, &failed) ==
          SAMREF_OK);
  CHECK(written == 4);
  CHECK(failed == 0);
  REQUIRE(samref_cache_embeddings(ckpt.c_str(), data.c_str(), cache.c_str(), &written, &failed) ==
          SAMREF_OK);
  CHECK(written == 0);
  CHECK(fs::exists(fs::path(cache) / "manifests"));

  samref_model* m = nullptr;
  REQUIRE(samref_model_load(ckpt.c_str(), cache.c_str(), &m) == SAMREF_OK);
  char* info = nullptr;
  REQUIRE(samref_model_info(m, &info) == SAMREF_OK);
  const std::string info_s = take(info);
  CHECK(info_s.find("\"stage\":1") != std::string::npos);

  samref_eval_options eo;
  samref_eval_options_default(&eo);
  CHECK(eo.max_clicks == 20);
  const std::string run = (dir / "run").string();
  eo.dataset = data.c_str();
  eo.run_dir = run.c_str();
  eo.max_clicks = 4;
  eo.dump_masks = 1;
  eo.sat = 1;
  char* csv = nullptr;
  REQUIRE(samref_evaluate(m, &eo, &csv) == SAMREF_OK);
  const std::string report = take(csv);
  CHECK(report.rfind("subset,sessions,errors,skipped,NoC90,NoC95,NoF90,NoF95,mIoU@5", 0) == 0);
  CHECK(fs::exists(fs::path(run) / "manifest.json"));
  CHECK(fs::exists(fs::path(run) / "masks"));
  char* again = nullptr;
  REQUIRE(samref_report((fs::path(run) / "sessions.jsonl").c_str(), &again) == SAMREF_OK);
  CHECK(take(again) == report);
  eo.mode = "bogus";
  CHECK(samref_evaluate(m, &eo, &csv) == SAMREF_E_INVALID_ARGUMENT);

  samref_service_options so;
  samref_service_options_default(&so);
  CHECK(so.idle_timeout_ms == 30LL * 60 * 1000);
  const std::string logs = (dir / "logs").string();
  so.log_dir = logs.c_str();
  samref_service* svc = nullptr;
  REQUIRE(samref_service_create(m, &so, &svc) == SAMREF_OK);
  const std::string png = slurp(fs::path(data) / "images" / "000000.png");
  char* id = nullptr;
  REQUIRE(samref_session_create(svc, reinterpret_cast<const uint8_t*>(png.data()), png.size(), &id) ==
          SAMREF_OK);
  const std::string sid = take(id);
  char* out = nullptr;
  REQUIRE(samref_session_click(svc, sid.c_str(), 30, 30, 0, &out) == SAMREF_OK);
  CHECK(take(out).find("\"selector\":\"skip\"") != std::string::npos);
  CHECK(samref_session_click(svc, sid.c_str(), 30, 30, 7, &out) == SAMREF_E_INVALID_ARGUMENT);
  CHECK(samref_session_click(svc, "nope", 30, 30, 0, &out) == SAMREF_E_NOT_FOUND);
  REQUIRE(samref_session_undo(svc, sid.c_str(), &out) == SAMREF_OK);
  CHECK(take(out).find("\"num_clicks\":0") != std::string::npos);
  CHECK(samref_session_undo(svc, sid.c_str(), &out) == SAMREF_E_CONFLICT);
  REQUIRE(samref_session_state(svc, sid.c_str(), &out) == SAMREF_OK);
  take(out);
  REQUIRE(samref_service_health(svc, &out) == SAMREF_OK);
  CHECK(take(out).find("checkpoint_sha256") != std::string::npos);
  int port = 0;
  REQUIRE(samref_service_listen(svc, "127.0.0.1", 0, &port) == SAMREF_OK);
  CHECK(port > 0);
  REQUIRE(samref_service_stop(svc) == SAMREF_OK);
  CHECK(fs::exists(fs::path(logs) / (sid + ".jsonl")));
  CHECK(fs::exists(fs::path(logs) / "manifest.json"));
  samref_service_free(svc);
  samref_model_free(m);
  fs::remove_all(dir);
}
