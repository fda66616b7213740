// Drives the command-line tool as a subprocess.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path kTool = SAMREF_CLI_PATH;
const fs::path kConfigs = SAMREF_CONFIG_DIR;

const fs::path& work() {
  static const fs::path dir = [] {
    auto p = fs::temp_directory_path() / ("samref_cli_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Run {
  int code = -1;
  std::string out, err;
};

/// Runs the tool in the work directory with an optional environment prefix.
Run run(const std::string& args, const std::string& env = "") {
  const fs::path out = work() / "stdout.txt", err = work() / "stderr.txt";
  const std::string cmd = "cd '" + work().string() + "' && " + env + " '" + kTool.string() + "' " +
                          args + " > '" + out.string() + "' 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

const char* kTiny =
    "--set map_size=16 --set emb_channels=8 --set feat_channels=8 --set enc_width=4 "
    "--set token_dim=8 --set crop_size=8 --set disk_radius=2";

/// Tiny dataset, stage-0 and stage-1 checkpoints shared by the tests below.
void ensure_models() {
  static bool done = false;
  if (done) return;
  REQUIRE(run("gen-data -n 4 --seed 3 --image-size 64 --map-size 16 --min-foreground 16 -o data").code == 0);
  const std::string common = std::string(kTiny) + " --batch-size 2 --dataset data --log-every 0";
  Run s0 = run("train -c '" + (kConfigs / "desk-stage0.cfg").string() + "' " + common +
               " --iterations 3 --output ck/s0.ckpt --log-path ck/s0.jsonl");
  INFO(s0.err);
  REQUIRE(s0.code == 0);
  Run s1 = run("train -c '" + (kConfigs / "desk-stage1.cfg").string() + "' " + common +
               " --iterations 2 --init-checkpoint ck/s0.ckpt --output ck/s1.ckpt --log-path ck/s1.jsonl"
               " --cache-dir cache");
  INFO(s1.err);
  REQUIRE(s1.code == 0);
  done = true;
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run("").code == 2);
  CHECK(run("no-such-command").code == 2);
  CHECK(run("eval --checkpoint x --dataset y --mode sideways").code == 2);
  CHECK(run("gen-data").code == 2);  // --out is required
  const Run v = run("--version");
  CHECK(v.code == 0);
  CHECK(v.out.find('.') != std::string::npos);
}

TEST_CASE("gen-data refuses a non-empty output without --force") {
  const std::string args = "gen-data -n 2 --seed 9 --image-size 64 --map-size 16 --min-foreground 16 -o g";
  REQUIRE(run(args).code == 0);
  CHECK(fs::exists(work() / "g" / "run_manifest.json"));
  const Run again = run(args);
  CHECK(again.code == 6);
  CHECK(again.err.find("not empty") != std::string::npos);
  CHECK(run(args + " --force").code == 0);
}

TEST_CASE("train: unknown config keys are listed; stage 2 needs a stage-1 checkpoint") {
  {
    std::ofstream f(work() / "bad.cfg");
    f << "stage = 1\niterations = 3\nlearning_rat = 1e-3\nbatchsize = 2\n";
  }
  const Run bad = run("train -c bad.cfg");
  CHECK(bad.code == 3);
  CHECK(bad.err.find("batchsize, learning_rat") != std::string::npos);

  const Run s2 = run("train -c '" + (kConfigs / "desk-stage2.cfg").string() +
                     "' --set init_checkpoint= --dataset data");
  CHECK(s2.code == 3);
  CHECK(s2.err.find("stage-1 checkpoint") != std::string::npos);

  CHECK(run("train -c missing.cfg").code == 4);
}

TEST_CASE("train writes checkpoints and run manifests; flags override the file") {
  ensure_models();
  CHECK(fs::exists(work() / "ck" / "s0.manifest.json"));
  const auto m = nlohmann::json::parse(slurp(work() / "ck" / "s1.manifest.json"));
  CHECK(m["command"] == "train");
  CHECK(m["config"]["iterations"] == "2");
  CHECK(m["config"]["stage"] == "1");
  CHECK(m["checkpoints"].contains("init"));
  // Three stage-0 steps were logged, not the file's 6000.
  std::ifstream log(work() / "ck" / "s0.jsonl");
  int lines = 0;
  for (std::string l; std::getline(log, l);) ++lines;
  CHECK(lines == 3);
}

TEST_CASE("cache-embeddings honours SAMREF_CACHE_DIR") {
  ensure_models();
  const Run r = run("cache-embeddings --checkpoint ck/s1.ckpt --dataset data", "SAMREF_CACHE_DIR=envcache");
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("wrote 4 new embeddings") != std::string::npos);
  CHECK(fs::exists(work() / "envcache" / "manifests"));
  const Run again = run("cache-embeddings --checkpoint ck/s1.ckpt --dataset data", "SAMREF_CACHE_DIR=envcache");
  CHECK(again.out.find("wrote 0 new embeddings") != std::string::npos);
}

TEST_CASE("eval defaults to 20 clicks; report reproduces the CSV") {
  ensure_models();
  const Run e = run("eval --checkpoint ck/s1.ckpt --dataset data --run-dir runs/e1 --dump-masks --sat");
  INFO(e.err);
  REQUIRE(e.code == 0);
  const auto man = nlohmann::json::parse(slurp(work() / "runs" / "e1" / "manifest.json"));
  CHECK(man["config"]["max_clicks"] == "20");
  CHECK(man["config"]["mode"] == "full");
  const std::string csv = slurp(work() / "runs" / "e1" / "report.csv");
  for (const char* col : {"NoC90", "NoC95", "NoF95", "mIoU@5", "SPC_s", "SAT_s"})
    CHECK(csv.find(col) != std::string::npos);
  CHECK(fs::exists(work() / "runs" / "e1" / "masks"));
  const Run r = run("report runs/e1");
  REQUIRE(r.code == 0);
  CHECK(r.out == csv);
  CHECK(run("report runs/nothing-here").code == 4);
  CHECK(run("eval --checkpoint ck/absent.ckpt --dataset data").code == 4);
}

TEST_CASE("serve: a taken port is an error; SIGTERM flushes logs and exits 0") {
  ensure_models();
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(fd >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  REQUIRE(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
  REQUIRE(::listen(fd, 1) == 0);
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  const int taken = ntohs(addr.sin_port);
  const Run busy = run("serve --checkpoint ck/s1.ckpt --cache-dir cache --port " + std::to_string(taken));
  CHECK(busy.code == 4);
  CHECK(busy.err.find("in use") != std::string::npos);
  ::close(fd);

  const fs::path out = work() / "serve.out";
  std::fflush(stdout);
  const pid_t pid = ::fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    if (::chdir(work().c_str()) != 0) _exit(97);
    if (!std::freopen(out.c_str(), "w", stdout)) _exit(99);
    ::execl(kTool.c_str(), "samref", "serve", "--checkpoint", "ck/s1.ckpt", "--cache-dir", "cache",
            "--port", "0", "--log-dir", "serve_logs", static_cast<char*>(nullptr));
    _exit(98);
  }
  bool up = false;
  for (int i = 0; i < 200 && !up; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    up = slurp(out).find("listening on") != std::string::npos;
  }
  CHECK(up);
  ::kill(pid, SIGTERM);
  int status = 0;
  ::waitpid(pid, &status, 0);
  CHECK(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
  CHECK(slurp(out).find("shutting down") != std::string::npos);
  CHECK(fs::exists(work() / "serve_logs" / "manifest.json"));
}

TEST_CASE("cleanup") { fs::remove_all(work()); }
