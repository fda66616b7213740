#include "samref.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <memory>
#include <new>
#include <optional>
#include <string>

#include "samref/api_service.hpp"
#include "samref/checkpoint.hpp"
#include "samref/dataset.hpp"
#include "samref/eval.hpp"
#include "samref/manifest.hpp"
#include "samref/trainer.hpp"
#include "samref/util.hpp"

namespace fs = std::filesystem;
using namespace samref;

struct samref_trainer {
  KeyValueConfig config;
  std::unique_ptr<Trainer> trainer;
  std::string dataset_hash;
  std::string resumed_from;
};

struct samref_model {
  std::unique_ptr<SamRefModel<float>> model;
  LoadedPipeline loaded;
  std::shared_ptr<const Pipeline> pipeline;
  std::string checkpoint_hash;
  int stage = 0;
  std::int64_t step = 0;
};

struct samref_service {
  std::shared_ptr<SessionManager> sessions;
  std::unique_ptr<ApiServer> server;
};

namespace {

thread_local std::string g_last_error;

samref_status status_of(ErrorCode c) { return static_cast<samref_status>(static_cast<int>(c)); }

template <typename F>
samref_status guard(F&& f) {
  try {
    f();
    return SAMREF_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_of(e.code());
  } catch (const fs::filesystem_error& e) {
    g_last_error = e.what();
    return SAMREF_E_IO;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return SAMREF_E_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return SAMREF_E_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return SAMREF_E_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void need(const void* p, const char* what) {
  require(p != nullptr, ErrorCode::InvalidArgument, std::string(what) + " must not be null");
}

fs::path manifest_path_for(const fs::path& output) {
  return output.parent_path() / (output.stem().string() + ".manifest.json");
}

}  // namespace

extern "C" {

const char* samref_version(void) { return version_string(); }

const char* samref_status_name(samref_status s) {
  if (s == SAMREF_OK) return "ok";
  if (s < SAMREF_E_INVALID_ARGUMENT || s > SAMREF_E_INTERNAL) return "unknown";
  return error_code_name(static_cast<ErrorCode>(static_cast<int>(s)));
}

const char* samref_last_error(void) { return g_last_error.c_str(); }

void samref_string_free(char* s) { std::free(s); }

void samref_dataset_options_default(samref_dataset_options* o) {
  if (!o) return;
  const SyntheticOptions d;
  *o = {d.count, d.seed, d.image_size, d.map_size, d.hole_fraction, d.protrusion_fraction,
        d.min_foreground};
}

samref_status samref_generate_dataset(const char* dir, const samref_dataset_options* o, int force) {
  return guard([&] {
    need(dir, "dir");
    need(o, "options");
    require(o->count >= 1, ErrorCode::InvalidArgument, "count must be >= 1");
    SyntheticOptions s;
    s.count = o->count;
    s.seed = o->seed;
    s.image_size = o->image_size;
    s.map_size = o->map_size;
    s.hole_fraction = o->hole_fraction;
    s.protrusion_fraction = o->protrusion_fraction;
    s.min_foreground = o->min_foreground;
    write_synthetic_dataset(dir, s, force != 0);
    RunManifest m;
    m.command = "gen-data";
    m.config = {{"count", std::to_string(s.count)},
                {"seed", std::to_string(s.seed)},
                {"image_size", std::to_string(s.image_size)},
                {"map_size", std::to_string(s.map_size)},
                {"hole_fraction", std::to_string(s.hole_fraction)},
                {"protrusion_fraction", std::to_string(s.protrusion_fraction)},
                {"min_foreground", std::to_string(s.min_foreground)}};
    m.dataset_hash = directory_hash(dir);
    write_run_manifest(fs::path(dir) / "run_manifest.json", m);
  });
}

samref_status samref_directory_hash(const char* dir, char** hex) {
  return guard([&] {
    need(dir, "dir");
    need(hex, "hex");
    *hex = dup_string(directory_hash(dir));
  });
}

samref_status samref_trainer_create(const char* config_text, samref_trainer** out) {
  return guard([&] {
    need(config_text, "config_text");
    need(out, "out");
    auto t = std::make_unique<samref_trainer>();
    t->config = KeyValueConfig::parse(config_text);
    TrainConfig cfg = train_config_from(t->config);
    if (cfg.cache_dir.empty() && std::getenv("SAMREF_CACHE_DIR")) cfg.cache_dir = default_cache_dir();
    t->trainer = std::make_unique<Trainer>(cfg);
    t->dataset_hash = directory_hash(cfg.dataset);
    *out = t.release();
  });
}

samref_status samref_trainer_resume(samref_trainer* t, const char* checkpoint) {
  return guard([&] {
    need(t, "trainer");
    need(checkpoint, "checkpoint");
    t->trainer->resume(load_checkpoint(checkpoint));
    t->resumed_from = checkpoint_hash(checkpoint);
  });
}

samref_status samref_trainer_run(samref_trainer* t, samref_step_callback cb, void* user,
                                 samref_step_stats* last) {
  return guard([&] {
    need(t, "trainer");
    struct Stop {};
    auto convert = [](const StepStats& s) {
      samref_step_stats c{};
      c.step = s.step;
      c.total = s.total;
      c.nfl = s.mean.nfl;
      c.dice_g = s.mean.dice_g;
      c.bce_g = s.mean.bce_g;
      c.bnfl_g = s.mean.bnfl_g;
      c.dice_p = s.mean.dice_p;
      c.bce_p = s.mean.bce_p;
      c.bnfl_p = s.mean.bnfl_p;
      c.patch_samples = s.patch_samples;
      c.ms = s.ms;
      return c;
    };
    samref_step_stats latest{};
    bool stopped = false;
    try {
      t->trainer->run([&](const StepStats& s) {
        latest = convert(s);
        if (cb && cb(&latest, user) != 0) throw Stop{};
      });
    } catch (const Stop&) {
      stopped = true;
    }
    if (last) *last = latest;
    const TrainConfig& cfg = t->trainer->config();
    if (stopped && !cfg.output.empty()) t->trainer->save(cfg.output);
    if (!cfg.output.empty()) {
      RunManifest m;
      m.command = "train";
      m.config = t->config.values();
      if (!cfg.init_checkpoint.empty()) m.checkpoints["init"] = checkpoint_hash(cfg.init_checkpoint);
      if (!t->resumed_from.empty()) m.checkpoints["resume"] = t->resumed_from;
      m.dataset_hash = t->dataset_hash;
      write_run_manifest(manifest_path_for(cfg.output), m);
    }
  });
}

samref_status samref_trainer_save(samref_trainer* t, const char* path) {
  return guard([&] {
    need(t, "trainer");
    need(path, "path");
    t->trainer->save(path);
  });
}

void samref_trainer_free(samref_trainer* t) { delete t; }

samref_status samref_train_config_keys(char** keys) {
  return guard([&] {
    need(keys, "keys");
    std::string s;
    for (const auto& k : train_config_keys()) s += k + "\n";
    *keys = dup_string(s);
  });
}

samref_status samref_model_load(const char* checkpoint, const char* cache_dir, samref_model** out) {
  return guard([&] {
    need(checkpoint, "checkpoint");
    need(out, "out");
    auto m = std::make_unique<samref_model>();
    const Checkpoint ck = load_checkpoint(checkpoint);
    m->model = model_from_checkpoint(ck);
    m->checkpoint_hash = checkpoint_hash(checkpoint);
    m->stage = ck.stage;
    m->step = ck.step;
    std::shared_ptr<const EmbeddingCache> cache;
    if (cache_dir && *cache_dir)
      cache = std::make_shared<EmbeddingCache>(cache_dir, encoder_tag(*m->model));
    m->loaded = make_pipeline(*m->model, cache);
    m->pipeline = std::shared_ptr<const Pipeline>(std::move(m->loaded.pipeline));
    *out = m.release();
  });
}

samref_status samref_model_info(const samref_model* m, char** json) {
  return guard([&] {
    need(m, "model");
    need(json, "json");
    nlohmann::json j{{"stage", m->stage},
                     {"step", m->step},
                     {"checkpoint_sha256", m->checkpoint_hash},
                     {"dims", dims_to_config(m->model->dims).values()}};
    *json = dup_string(j.dump());
  });
}

void samref_model_free(samref_model* m) { delete m; }

samref_status samref_cache_embeddings(const char* checkpoint, const char* dataset,
                                      const char* cache_dir, int* written, int* failed) {
  return guard([&] {
    need(checkpoint, "checkpoint");
    need(dataset, "dataset");
    const Checkpoint ck = load_checkpoint(checkpoint);
    auto model = model_from_checkpoint(ck);
    const fs::path root = cache_dir && *cache_dir ? fs::path(cache_dir) : default_cache_dir();
    EmbeddingCache cache(root, encoder_tag(*model));
    std::vector<LoadedSample> samples;
    int bad = 0;
    for (const auto& item : list_dataset(dataset)) {
      try {
        LoadedSample s;
        const auto img = make_image_plane(read_png(item.image_path, 3), ck.dims.image_size());
        s.id = item.id;
        s.image = img;
        samples.push_back(std::move(s));
      } catch (const std::exception& e) {
        ++bad;
        log_warning("image " + item.id + " not cached: " + e.what());
      }
    }
    int bad_writes = 0;
    const int n = precompute_embeddings(samples, *model, cache, &bad_writes);
    if (written) *written = n;
    if (failed) *failed = bad + bad_writes;
    RunManifest m;
    m.command = "cache-embeddings";
    m.config = {{"dataset", dataset}, {"cache_dir", root.string()}};
    m.checkpoints["model"] = checkpoint_hash(checkpoint);
    m.dataset_hash = directory_hash(dataset);
    write_run_manifest(root / "manifests" / (m.run_id() + ".json"), m);
  });
}

void samref_eval_options_default(samref_eval_options* o) {
  if (!o) return;
  *o = {nullptr, nullptr, "full", 20, 0, 0, 0};
}

samref_status samref_evaluate(const samref_model* m, const samref_eval_options* o,
                              char** report_csv_out) {
  return guard([&] {
    need(m, "model");
    need(o, "options");
    need(o->dataset, "options.dataset");
    EvalConfig cfg;
    cfg.dataset = o->dataset;
    if (o->run_dir) cfg.run_dir = o->run_dir;
    cfg.mode = parse_eval_mode(o->mode ? o->mode : "full");
    cfg.max_clicks = o->max_clicks;
    cfg.dump_masks = o->dump_masks != 0;
    cfg.sat = o->sat != 0;
    cfg.sample_limit = o->sample_limit;
    const EvalOutcome r = run_evaluation(*m->pipeline, cfg);
    if (!cfg.run_dir.empty()) {
      nlohmann::json summary{{"skipped", r.skipped}};
      if (!r.reports.empty() && r.reports.front().sat_seconds)
        summary["sat_seconds"] = *r.reports.front().sat_seconds;
      write_file_atomic(cfg.run_dir / "summary.json", summary.dump() + "\n");
      RunManifest man;
      man.command = "eval";
      man.config = {{"dataset", cfg.dataset.string()},
                    {"mode", eval_mode_name(cfg.mode)},
                    {"max_clicks", std::to_string(cfg.max_clicks)},
                    {"dump_masks", cfg.dump_masks ? "true" : "false"},
                    {"sat", cfg.sat ? "true" : "false"},
                    {"sample_limit", std::to_string(cfg.sample_limit)}};
      man.checkpoints["model"] = m->checkpoint_hash;
      man.dataset_hash = directory_hash(cfg.dataset);
      write_run_manifest(cfg.run_dir / "manifest.json", man);
    }
    if (report_csv_out) *report_csv_out = dup_string(report_csv(r.reports));
  });
}

samref_status samref_report(const char* sessions_jsonl, char** report_csv_out) {
  return guard([&] {
    need(sessions_jsonl, "sessions_jsonl");
    need(report_csv_out, "report_csv");
    const auto bytes = read_file(sessions_jsonl);
    const auto sessions = parse_session_jsonl(std::string(bytes.begin(), bytes.end()));
    // The eval run's summary carries what the session rows cannot.
    int skipped = 0;
    std::optional<double> sat;
    const fs::path summary = fs::path(sessions_jsonl).parent_path() / "summary.json";
    if (fs::exists(summary)) {
      const auto s = read_file(summary);
      const auto j = nlohmann::json::parse(s.begin(), s.end());
      skipped = j.value("skipped", 0);
      if (j.contains("sat_seconds")) sat = j.at("sat_seconds").get<double>();
    }
    auto reports = subset_reports(sessions, skipped);
    reports.front().sat_seconds = sat;
    *report_csv_out = dup_string(report_csv(reports));
  });
}

void samref_service_options_default(samref_service_options* o) {
  if (!o) return;
  *o = {30LL * 60 * 1000, nullptr};
}

samref_status samref_service_create(const samref_model* m, const samref_service_options* o,
                                    samref_service** out) {
  return guard([&] {
    need(m, "model");
    need(out, "out");
    samref_service_options opts;
    samref_service_options_default(&opts);
    if (o) opts = *o;
    require(opts.idle_timeout_ms > 0, ErrorCode::InvalidArgument, "idle timeout must be positive");
    ServiceOptions so;
    so.idle_timeout = std::chrono::milliseconds(opts.idle_timeout_ms);
    if (opts.log_dir) so.log_dir = opts.log_dir;
    so.checkpoint_hash = m->checkpoint_hash;
    so.version = version_string();
    auto s = std::make_unique<samref_service>();
    s->sessions = std::make_shared<SessionManager>(m->pipeline, so);
    if (!so.log_dir.empty()) {
      RunManifest man;
      man.command = "serve";
      man.config = {{"idle_timeout_ms", std::to_string(opts.idle_timeout_ms)}};
      man.checkpoints["model"] = m->checkpoint_hash;
      write_run_manifest(so.log_dir / "manifest.json", man);
    }
    *out = s.release();
  });
}

samref_status samref_session_create(samref_service* s, const uint8_t* png, size_t size, char** id) {
  return guard([&] {
    need(s, "service");
    need(png, "png");
    need(id, "id");
    *id = dup_string(s->sessions->create(std::vector<std::uint8_t>(png, png + size)));
  });
}

samref_status samref_session_click(samref_service* s, const char* id, int x, int y, int polarity,
                                   char** json) {
  return guard([&] {
    need(s, "service");
    need(id, "id");
    need(json, "json");
    require(polarity == 0 || polarity == 1, ErrorCode::InvalidArgument,
            "polarity must be 0 (positive) or 1 (negative)");
    *json = dup_string(
        s->sessions->click(id, x, y, polarity ? Polarity::Negative : Polarity::Positive).dump());
  });
}

samref_status samref_session_undo(samref_service* s, const char* id, char** json) {
  return guard([&] {
    need(s, "service");
    need(id, "id");
    need(json, "json");
    *json = dup_string(s->sessions->undo(id).dump());
  });
}

samref_status samref_session_state(samref_service* s, const char* id, char** json) {
  return guard([&] {
    need(s, "service");
    need(id, "id");
    need(json, "json");
    *json = dup_string(s->sessions->state(id).dump());
  });
}

samref_status samref_service_health(samref_service* s, char** json) {
  return guard([&] {
    need(s, "service");
    need(json, "json");
    *json = dup_string(s->sessions->health().dump());
  });
}

samref_status samref_service_listen(samref_service* s, const char* host, int port, int* bound) {
  return guard([&] {
    need(s, "service");
    require(!s->server, ErrorCode::State, "service is already listening");
    require(port >= 0 && port <= 65535, ErrorCode::InvalidArgument, "port out of range");
    auto server = std::make_unique<ApiServer>(s->sessions);
    const int p = server->start(host ? host : "127.0.0.1", port);
    s->server = std::move(server);
    if (bound) *bound = p;
  });
}

samref_status samref_service_stop(samref_service* s) {
  return guard([&] {
    need(s, "service");
    if (s->server) {
      s->server->stop();
      s->server.reset();
    } else {
      s->sessions->flush_logs();
    }
  });
}

void samref_service_free(samref_service* s) {
  if (!s) return;
  samref_service_stop(s);
  delete s;
}

}  // extern "C"
