// Command-line front end. Talks to the library through the C interface only.

#include <CLI11.hpp>
#include <samref.h>

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace {

// Exit codes (documented in the README).
enum Exit {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kConfig = 3,
  kMissing = 4,
  kAborted = 5,
  kConflict = 6,
  kTooLarge = 7,
};

int exit_for(samref_status s) {
  switch (s) {
    case SAMREF_OK: return kOk;
    case SAMREF_E_INVALID_ARGUMENT:
    case SAMREF_E_CONFIG: return kConfig;
    case SAMREF_E_IO:
    case SAMREF_E_FORMAT:
    case SAMREF_E_NOT_FOUND: return kMissing;
    case SAMREF_E_NUMERIC: return kAborted;
    case SAMREF_E_CONFLICT:
    case SAMREF_E_STATE: return kConflict;
    case SAMREF_E_TOO_LARGE: return kTooLarge;
    default: return kFailure;
  }
}

struct Failed {
  int code;
};

void check(samref_status s, const std::string& what) {
  if (s == SAMREF_OK) return;
  std::cerr << "samref: " << what << ": " << samref_last_error() << " [" << samref_status_name(s)
            << "]\n";
  throw Failed{exit_for(s)};
}

/// Owns a library-allocated string.
struct Text {
  char* p = nullptr;
  ~Text() { samref_string_free(p); }
  std::string str() const { return p ? std::string(p) : std::string(); }
};

std::string cache_dir_or_env(const std::string& flag) {
  if (!flag.empty()) return flag;
  const char* env = std::getenv("SAMREF_CACHE_DIR");
  return env ? std::string(env) : std::string();
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    std::cerr << "samref: cannot read " << path << "\n";
    throw Failed{kMissing};
  }
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// gen-data ------------------------------------------------------------------

struct GenArgs {
  samref_dataset_options opts{};
  std::string out;
  bool force = false;
};

int run_gen(const GenArgs& a) {
  check(samref_generate_dataset(a.out.c_str(), &a.opts, a.force ? 1 : 0), "gen-data");
  Text hash;
  check(samref_directory_hash(a.out.c_str(), &hash.p), "hashing dataset");
  std::cout << "wrote " << a.opts.count << " samples to " << a.out << " (seed " << a.opts.seed
            << ")\ndataset sha256 " << hash.str() << "\n";
  return kOk;
}

// cache-embeddings ----------------------------------------------------------

struct CacheArgs {
  std::string checkpoint, dataset, cache_dir;
};

int run_cache(const CacheArgs& a) {
  const std::string dir = cache_dir_or_env(a.cache_dir);
  int written = 0, failed = 0;
  check(samref_cache_embeddings(a.checkpoint.c_str(), a.dataset.c_str(),
                                dir.empty() ? nullptr : dir.c_str(), &written, &failed),
        "cache-embeddings");
  std::cout << "wrote " << written << " new embeddings";
  if (failed) std::cout << ", " << failed << " failed";
  std::cout << "\n";
  return failed ? kFailure : kOk;
}

// train ---------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;  // key=value overrides
  std::map<std::string, std::string> flags;
  std::string resume;
  bool quiet = false;
  int log_every = 100;
};

int on_step(const samref_step_stats* s, void* user) {
  const auto* a = static_cast<const TrainArgs*>(user);
  if (!a->quiet && a->log_every > 0 && s->step % a->log_every == 0)
    std::printf("step %lld  loss %.5f  (%.1f ms)\n", static_cast<long long>(s->step), s->total,
                s->ms);
  return 0;
}

int run_train(const TrainArgs& a) {
  std::string text = a.config.empty() ? std::string() : read_text(a.config);
  text += "\n";
  for (const auto& [k, v] : a.flags) text += k + " = " + v + "\n";
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::cerr << "samref: --set expects key=value, got '" << kv << "'\n";
      return kUsage;
    }
    text += kv.substr(0, eq) + " = " + kv.substr(eq + 1) + "\n";
  }
  samref_trainer* raw = nullptr;
  check(samref_trainer_create(text.c_str(), &raw), "train");
  std::unique_ptr<samref_trainer, void (*)(samref_trainer*)> t(raw, samref_trainer_free);
  if (!a.resume.empty()) check(samref_trainer_resume(t.get(), a.resume.c_str()), "resume");
  samref_step_stats last{};
  check(samref_trainer_run(t.get(), on_step, const_cast<TrainArgs*>(&a), &last), "train");
  std::printf(
      "done: %lld steps, final loss %.6f\n  nfl %.6f  dice_g %.6f  bce_g %.6f  bnfl_g %.6f\n"
      "  dice_p %.6f  bce_p %.6f  bnfl_p %.6f\n",
      static_cast<long long>(last.step), last.total, last.nfl, last.dice_g, last.bce_g,
      last.bnfl_g, last.dice_p, last.bce_p, last.bnfl_p);
  return kOk;
}

// eval ----------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, dataset, run_dir, mode = "full", cache_dir;
  int max_clicks = 20;
  int limit = 0;
  bool dump_masks = false, sat = false;
};

using ModelPtr = std::unique_ptr<samref_model, void (*)(samref_model*)>;

ModelPtr load_model(const std::string& checkpoint, const std::string& cache_dir) {
  samref_model* m = nullptr;
  check(samref_model_load(checkpoint.c_str(), cache_dir.empty() ? nullptr : cache_dir.c_str(), &m),
        "loading " + checkpoint);
  return ModelPtr(m, samref_model_free);
}

int run_eval(const EvalArgs& a) {
  auto model = load_model(a.checkpoint, cache_dir_or_env(a.cache_dir));
  std::string run_dir = a.run_dir;
  if (run_dir.empty()) {
    std::string stem = a.checkpoint.substr(a.checkpoint.find_last_of('/') + 1);
    stem = stem.substr(0, stem.find('.'));
    run_dir = "runs/eval-" + a.mode + "-" + stem;
  }
  samref_eval_options o;
  samref_eval_options_default(&o);
  o.dataset = a.dataset.c_str();
  o.run_dir = run_dir.c_str();
  o.mode = a.mode.c_str();
  o.max_clicks = a.max_clicks;
  o.dump_masks = a.dump_masks;
  o.sat = a.sat;
  o.sample_limit = a.limit;
  Text csv;
  check(samref_evaluate(model.get(), &o, &csv.p), "eval");
  std::cout << csv.str() << "report written to " << run_dir << "\n";
  return kOk;
}

// report --------------------------------------------------------------------

int run_report(const std::string& run_dir) {
  const std::string path = run_dir + "/sessions.jsonl";
  Text csv;
  check(samref_report(path.c_str(), &csv.p), "report");
  std::cout << csv.str();
  return kOk;
}

// serve ---------------------------------------------------------------------

struct ServeArgs {
  std::string checkpoint, host = "127.0.0.1", log_dir = "runs/serve", cache_dir;
  int port = 8080;
  double idle_minutes = 30;
};

int run_serve(const ServeArgs& a) {
  std::string cache = cache_dir_or_env(a.cache_dir);
  if (cache.empty()) cache = "cache";
  auto model = load_model(a.checkpoint, cache);
  samref_service_options o;
  samref_service_options_default(&o);
  o.idle_timeout_ms = static_cast<int64_t>(a.idle_minutes * 60'000);
  o.log_dir = a.log_dir.empty() ? nullptr : a.log_dir.c_str();
  samref_service* raw = nullptr;
  check(samref_service_create(model.get(), &o, &raw), "serve");
  std::unique_ptr<samref_service, void (*)(samref_service*)> svc(raw, samref_service_free);

  // Block termination signals before the server threads start so that only
  // this thread receives them.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  int port = 0;
  check(samref_service_listen(svc.get(), a.host.c_str(), a.port, &port), "serve");
  std::cout << "listening on http://" << a.host << ":" << port << std::endl;
  int sig = 0;
  sigwait(&set, &sig);
  std::cout << "shutting down (signal " << sig << ")" << std::endl;
  check(samref_service_stop(svc.get()), "shutdown");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"samref: click-based segmentation with two-stage refinement"};
  app.set_version_flag("--version", std::string(samref_version()));
  app.require_subcommand(1);

  GenArgs gen;
  samref_dataset_options_default(&gen.opts);
  auto* g = app.add_subcommand("gen-data", "Render a synthetic shapes dataset");
  g->add_option("-n,--count", gen.opts.count, "Number of samples")->capture_default_str();
  g->add_option("--seed", gen.opts.seed, "Generator seed")->capture_default_str();
  g->add_option("-o,--out", gen.out, "Output directory")->required();
  g->add_option("--image-size", gen.opts.image_size, "Image side in pixels")->capture_default_str();
  g->add_option("--map-size", gen.opts.map_size, "Mask side at map resolution")->capture_default_str();
  g->add_option("--hole-fraction", gen.opts.hole_fraction)->capture_default_str();
  g->add_option("--protrusion-fraction", gen.opts.protrusion_fraction)->capture_default_str();
  g->add_option("--min-foreground", gen.opts.min_foreground)->capture_default_str();
  g->add_flag("--force", gen.force, "Replace a non-empty output directory");

  CacheArgs cache;
  auto* c = app.add_subcommand("cache-embeddings", "Precompute backbone embeddings");
  c->add_option("--checkpoint", cache.checkpoint)->required();
  c->add_option("--dataset", cache.dataset)->required();
  c->add_option("--cache-dir", cache.cache_dir, "Default: $SAMREF_CACHE_DIR, else ./cache");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Run one training stage");
  t->add_option("-c,--config", train.config, "Flat key = value config file");
  t->add_option("--set", train.sets, "key=value override (repeatable)");
  for (const char* key : {"stage", "iterations", "seed", "dataset", "init_checkpoint", "output",
                          "log_path", "cache_dir", "batch_size", "learning_rate"}) {
    std::string flag = std::string("--") + key;
    for (auto& ch : flag)
      if (ch == '_') ch = '-';
    t->add_option_function<std::string>(
        flag, [&train, key](const std::string& v) { train.flags[key] = v; },
        std::string("Overrides config key ") + key);
  }
  t->add_option("--resume", train.resume, "Continue from a checkpoint of the same stage");
  t->add_option("--log-every", train.log_every)->capture_default_str();
  t->add_flag("-q,--quiet", train.quiet);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Run the interactive evaluation protocol");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--dataset", ev.dataset)->required();
  e->add_option("--run-dir", ev.run_dir, "Default: runs/eval-<mode>-<checkpoint>");
  e->add_option("--mode", ev.mode)->check(CLI::IsMember({"full", "globaldiff", "coarse"}))->capture_default_str();
  e->add_option("--max-clicks", ev.max_clicks)->check(CLI::PositiveNumber)->capture_default_str();
  e->add_option("--limit", ev.limit, "Evaluate at most this many images");
  e->add_flag("--dump-masks", ev.dump_masks, "Store per-click masks under <run>/masks");
  e->add_flag("--sat", ev.sat, "Also measure the 16x16 grid prompt latency");
  e->add_option("--cache-dir", ev.cache_dir);

  ServeArgs sv;
  auto* s = app.add_subcommand("serve", "Serve the session HTTP API");
  s->add_option("--checkpoint", sv.checkpoint)->required();
  s->add_option("--host", sv.host)->capture_default_str();
  s->add_option("--port", sv.port)->check(CLI::Range(0, 65535))->capture_default_str();
  s->add_option("--log-dir", sv.log_dir)->capture_default_str();
  s->add_option("--idle-timeout-min", sv.idle_minutes)->check(CLI::PositiveNumber)->capture_default_str();
  s->add_option("--cache-dir", sv.cache_dir);

  std::string report_dir;
  auto* r = app.add_subcommand("report", "Recompute the aggregate report of an eval run");
  r->add_option("run_dir", report_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kOk : kUsage;
  }
  try {
    if (*g) return run_gen(gen);
    if (*c) return run_cache(cache);
    if (*t) return run_train(train);
    if (*e) return run_eval(ev);
    if (*s) return run_serve(sv);
    if (*r) return run_report(report_dir);
  } catch (const Failed& f) {
    return f.code;
  }
  return kUsage;
}
