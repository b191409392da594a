#ifndef UNIALIGN_C_H
#define UNIALIGN_C_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(UNIALIGN_BUILDING)
#    define UA_API __declspec(dllexport)
#  else
#    define UA_API __declspec(dllimport)
#  endif
#else
#  define UA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ua_status {
  UA_OK = 0,
  UA_ERR_INVALID_ARGUMENT = 1,
  UA_ERR_CONFIG = 2,
  UA_ERR_DIMENSION = 3,
  UA_ERR_NUMERIC = 4,
  UA_ERR_DEGENERATE = 5,
  UA_ERR_CONTRACT = 6,
  UA_ERR_IO = 7,
  UA_ERR_VOCABULARY = 8,
  UA_ERR_DIVERGED = 9,
  UA_ERR_SIZE = 10,
  UA_ERR_EMPTY = 11,
  UA_ERR_INTERNAL = 99
} ua_status;

typedef struct ua_config ua_config;
typedef struct ua_corpus ua_corpus;
typedef struct ua_model ua_model;

/* Message of the last failed call on this thread; "" after a success. */
UA_API const char* ua_last_error(void);
UA_API const char* ua_status_name(ua_status status);
UA_API const char* ua_version(void);

/* Corpus and training settings in one object; keys are the field names. */
UA_API ua_status ua_config_create(ua_config** out);
UA_API ua_status ua_config_load(const char* path, ua_config** out);
/* Applies only the keys present in the file. */
UA_API ua_status ua_config_update(ua_config* cfg, const char* path);
UA_API ua_status ua_config_set(ua_config* cfg, const char* key, const char* value);
/* Writes the value as text; UA_ERR_SIZE if `len` is too small. */
UA_API ua_status ua_config_get(const ua_config* cfg, const char* key, char* buf, size_t len);
UA_API void ua_config_free(ua_config* cfg);

typedef struct ua_corpus_info {
  size_t train;
  size_t eval;
  size_t vqa_train;
  size_t vqa_eval;
  size_t answers;
  size_t patches;
  size_t text_tokens;
  size_t feature_width;
} ua_corpus_info;

UA_API ua_status ua_corpus_generate(const ua_config* cfg, ua_corpus** out);
UA_API ua_status ua_corpus_save(const ua_corpus* corpus, const char* dir);
UA_API ua_status ua_corpus_load(const char* dir, ua_corpus** out);
UA_API ua_status ua_corpus_info_get(const ua_corpus* corpus, ua_corpus_info* out);
UA_API void ua_corpus_free(ua_corpus* corpus);

/* Fresh model sized for `corpus` from the training settings in `cfg`. */
UA_API ua_status ua_model_create(const ua_config* cfg, const ua_corpus* corpus, ua_model** out);
UA_API ua_status ua_model_load(const char* path, ua_model** out);
UA_API ua_status ua_model_save(const ua_model* model, const char* path);
/* Free-form metadata stored in the checkpoint. */
UA_API ua_status ua_model_set_meta(ua_model* model, const char* key, const char* value);
/* UA_ERR_INVALID_ARGUMENT when the key is absent. */
UA_API ua_status ua_model_get_meta(const ua_model* model, const char* key, char* buf, size_t len);
/* Training settings stored with the model. */
UA_API ua_status ua_model_config(const ua_model* model, ua_config** out);
UA_API void ua_model_free(ua_model* model);

typedef struct ua_epoch_metrics {
  int stage;
  size_t epoch;
  double loss_global; /* NaN when the stage does not evaluate it */
  double loss_local;
  double loss_hn;
  double recall1;
  double recall5;
  double hn_accuracy; /* NaN in stage 1 */
} ua_epoch_metrics;

typedef void (*ua_progress_fn)(const ua_epoch_metrics* metrics, void* user);

/* Two-stage pretraining. Metrics CSV is written when `metrics_csv` is
   non-null. */
UA_API ua_status ua_pretrain(ua_model* model, const ua_corpus* corpus, const ua_config* cfg,
                             const char* metrics_csv, ua_progress_fn progress, void* user);

typedef struct ua_vqa_report {
  double accuracy;
  double open_accuracy;
  double closed_accuracy;
  size_t open_count;
  size_t closed_count;
} ua_vqa_report;

/* VQA fine-tuning; `cfg` may be null to reuse the model's settings. */
UA_API ua_status ua_finetune(ua_model* model, const ua_corpus* corpus, const ua_config* cfg,
                             ua_vqa_report* out);

typedef struct ua_eval_report {
  double recall1;
  double recall5;
  size_t retrieval_count;
  double hn_accuracy;
  int has_vqa;
  ua_vqa_report vqa;
} ua_eval_report;

UA_API ua_status ua_evaluate(const ua_model* model, const ua_corpus* corpus, ua_eval_report* out);

typedef void (*ua_line_fn)(const char* line, void* user);

/* Finite-difference suite; one line per check. `failures` receives the
   number of failed checks. */
UA_API ua_status ua_gradcheck(uint64_t seed, ua_line_fn line, void* user, size_t* failures);

typedef struct ua_ot_bench_report {
  size_t trials;
  size_t failures;
  double max_gap;
  double max_residual;
} ua_ot_bench_report;

/* IPOT against the permutation oracle on random 4x4 and 5x5 costs.
   `cfg` may be null for solver defaults; plans go to `csv_path` if given. */
UA_API ua_status ua_ot_bench(size_t trials_per_size, uint64_t seed, const ua_config* cfg,
                             const char* csv_path, ua_ot_bench_report* out);

/* Uniform-marginal IPOT on a p×t row-major cost. `plan` receives p*t
   values; `value` and `residual` may be null. */
UA_API ua_status ua_ot_solve(const double* cost, size_t p, size_t t, const ua_config* cfg,
                             double* plan, double* value, double* residual);

/* Transport plan of held-out pair `sample` and, for fine-tuned models, the
   fusion gate of one VQA item, as CSV. */
UA_API ua_status ua_heatmap(const ua_model* model, const ua_corpus* corpus, size_t sample,
                            const char* csv_path);

#ifdef __cplusplus
}
#endif

#endif
