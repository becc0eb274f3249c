#ifndef FSAUDIO_H
#define FSAUDIO_H

/* C interface to the few-shot audio harness. All functions return a status;
   on failure fsa_last_error() describes the problem for the calling thread. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define FSA_API __attribute__((visibility("default")))
#else
#define FSA_API
#endif

typedef enum fsa_status {
    FSA_OK = 0,
    FSA_ERR_INVALID_ARGUMENT = 1,
    FSA_ERR_IO = 2,
    FSA_ERR_FORMAT = 3,
    FSA_ERR_NOT_FOUND = 4,
    FSA_ERR_NUMERICAL = 5,
    FSA_ERR_UNAVAILABLE = 6,
    FSA_ERR_INTERNAL = 7
} fsa_status;

typedef struct fsa_config fsa_config;

/* Receives human-readable progress lines; may be NULL to silence them. */
typedef void (*fsa_progress_fn)(const char* message, void* user);

FSA_API const char* fsa_version(void);
FSA_API const char* fsa_status_name(fsa_status status);
FSA_API const char* fsa_last_error(void);

/* Strings returned through char** are malloc'd; release with fsa_string_free. */
FSA_API void fsa_string_free(char* s);

FSA_API fsa_status fsa_config_new(fsa_config** out);
FSA_API fsa_status fsa_config_load(const char* path, fsa_config** out);
FSA_API fsa_status fsa_config_set(fsa_config* config, const char* key, const char* value);
FSA_API fsa_status fsa_config_get(const fsa_config* config, const char* key, char** value);
/* Checks every value; nothing is computed. */
FSA_API fsa_status fsa_config_validate(const fsa_config* config);
FSA_API fsa_status fsa_config_resolved(const fsa_config* config, char** text);
FSA_API void fsa_config_free(fsa_config* config);

FSA_API void fsa_set_progress(fsa_progress_fn fn, void* user);

/* noise_sigma < 0 keeps the preset's noise level. */
FSA_API fsa_status fsa_synth(const char* preset, const char* out_dir, double noise_sigma, char** summary_json);
FSA_API fsa_status fsa_prepare(const fsa_config* config, const char* dataset_id, char** summary_json);
FSA_API fsa_status fsa_split(const fsa_config* config, const char* dataset_id, uint64_t seed, double train_ratio,
                             double val_ratio, double test_ratio, char** summary_json);
FSA_API fsa_status fsa_train(const fsa_config* config, char** summary_json);
/* checkpoint may be NULL for the run directory's best checkpoint. */
FSA_API fsa_status fsa_evaluate(const fsa_config* config, const char* checkpoint, char** reports_json);
/* kind is "shots" or "ways". */
FSA_API fsa_status fsa_sweep(const fsa_config* config, const char* checkpoint, const char* kind, char** reports_json);
FSA_API fsa_status fsa_report(const char* const* run_dirs, size_t n_run_dirs, const char* out_dir,
                              char** summary_json);

#ifdef __cplusplus
}
#endif

#endif
