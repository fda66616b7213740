/* C interface to the samref interactive segmentation library.
 *
 * Every fallible call returns a samref_status; on failure the message is
 * available from samref_last_error() on the same thread until the next
 * failing call. Strings returned through char** are heap-allocated and
 * owned by the caller: release them with samref_string_free. Handles are
 * opaque and released with their *_free function (NULL is accepted).
 */
#ifndef SAMREF_H
#define SAMREF_H

#include <stddef.h>
#include <stdint.h>

#if defined(__GNUC__)
#define SAMREF_API __attribute__((visibility("default")))
#else
#define SAMREF_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum samref_status {
  SAMREF_OK = 0,
  SAMREF_E_INVALID_ARGUMENT = 1,
  SAMREF_E_IO = 2,
  SAMREF_E_FORMAT = 3,
  SAMREF_E_NOT_FOUND = 4,
  SAMREF_E_STATE = 5,
  SAMREF_E_NUMERIC = 6,
  SAMREF_E_CONFIG = 7,
  SAMREF_E_CONFLICT = 8,
  SAMREF_E_TOO_LARGE = 9,
  SAMREF_E_INTERNAL = 10
} samref_status;

SAMREF_API const char* samref_version(void);
SAMREF_API const char* samref_status_name(samref_status status);
SAMREF_API const char* samref_last_error(void);
SAMREF_API void samref_string_free(char* s);

/* Synthetic datasets ---------------------------------------------------- */

typedef struct samref_dataset_options {
  int count;
  uint64_t seed;
  int image_size;
  int map_size;
  double hole_fraction;
  double protrusion_fraction;
  int min_foreground; /* map-resolution pixels */
} samref_dataset_options;

SAMREF_API void samref_dataset_options_default(samref_dataset_options* options);
/* Refuses a non-empty directory with SAMREF_E_CONFLICT unless force != 0.
 * Also writes run_manifest.json into the dataset. */
SAMREF_API samref_status samref_generate_dataset(const char* dir,
                                                 const samref_dataset_options* options, int force);
SAMREF_API samref_status samref_directory_hash(const char* dir, char** hex);

/* Training -------------------------------------------------------------- */

typedef struct samref_trainer samref_trainer;

typedef struct samref_step_stats {
  int64_t step;
  double total;
  double nfl, dice_g, bce_g, bnfl_g, dice_p, bce_p, bnfl_p;
  int patch_samples;
  double ms;
} samref_step_stats;

/* Return nonzero to stop after the current step. */
typedef int (*samref_step_callback)(const samref_step_stats* stats, void* user);

/* config_text: flat "key = value" lines. Unknown keys are SAMREF_E_CONFIG
 * with the offending keys in the message. */
SAMREF_API samref_status samref_trainer_create(const char* config_text, samref_trainer** out);
SAMREF_API samref_status samref_trainer_resume(samref_trainer* trainer, const char* checkpoint);
/* Runs to the configured iteration count, then checks the frozen groups
 * and writes the output checkpoint and its run manifest. */
SAMREF_API samref_status samref_trainer_run(samref_trainer* trainer, samref_step_callback cb,
                                            void* user, samref_step_stats* last);
SAMREF_API samref_status samref_trainer_save(samref_trainer* trainer, const char* path);
SAMREF_API void samref_trainer_free(samref_trainer* trainer);
/* Newline-separated list of accepted training config keys. */
SAMREF_API samref_status samref_train_config_keys(char** keys);

/* Models ---------------------------------------------------------------- */

typedef struct samref_model samref_model;

/* cache_dir may be NULL (no embedding cache). */
SAMREF_API samref_status samref_model_load(const char* checkpoint, const char* cache_dir,
                                           samref_model** out);
/* JSON: stage, step, checkpoint_sha256, dims. */
SAMREF_API samref_status samref_model_info(const samref_model* model, char** json);
SAMREF_API void samref_model_free(samref_model* model);

/* Writes missing cache entries for every dataset image. */
SAMREF_API samref_status samref_cache_embeddings(const char* checkpoint, const char* dataset,
                                                 const char* cache_dir, int* written, int* failed);

/* Evaluation ------------------------------------------------------------ */

typedef struct samref_eval_options {
  const char* dataset;
  const char* run_dir; /* report.csv, sessions.jsonl, manifest.json, masks/ */
  const char* mode;    /* "full", "globaldiff" or "coarse" */
  int max_clicks;
  int dump_masks;
  int sat;
  int sample_limit; /* 0: all */
} samref_eval_options;

SAMREF_API void samref_eval_options_default(samref_eval_options* options);
SAMREF_API samref_status samref_evaluate(const samref_model* model,
                                         const samref_eval_options* options, char** report_csv);
/* Recomputes the aggregate CSV from a sessions.jsonl file. */
SAMREF_API samref_status samref_report(const char* sessions_jsonl, char** report_csv);

/* Interactive sessions and the HTTP service ----------------------------- */

typedef struct samref_service samref_service;

typedef struct samref_service_options {
  int64_t idle_timeout_ms; /* default 30 min */
  const char* log_dir;     /* session logs; NULL disables */
} samref_service_options;

SAMREF_API void samref_service_options_default(samref_service_options* options);
/* The service shares the model, which must outlive it. */
SAMREF_API samref_status samref_service_create(const samref_model* model,
                                               const samref_service_options* options,
                                               samref_service** out);
SAMREF_API samref_status samref_session_create(samref_service* service, const uint8_t* png,
                                               size_t size, char** id);
/* polarity: 0 positive, 1 negative. Result JSON as served over HTTP. */
SAMREF_API samref_status samref_session_click(samref_service* service, const char* id, int x,
                                              int y, int polarity, char** json);
SAMREF_API samref_status samref_session_undo(samref_service* service, const char* id, char** json);
SAMREF_API samref_status samref_session_state(samref_service* service, const char* id, char** json);
SAMREF_API samref_status samref_service_health(samref_service* service, char** json);
/* Starts the HTTP server on a background thread; port 0 picks a free port. */
SAMREF_API samref_status samref_service_listen(samref_service* service, const char* host, int port,
                                               int* bound_port);
/* Stops the server (if listening) and flushes session logs. */
SAMREF_API samref_status samref_service_stop(samref_service* service);
SAMREF_API void samref_service_free(samref_service* service);

#ifdef __cplusplus
}
#endif

#endif /* SAMREF_H */
