#ifndef STATESYNTH_H
#define STATESYNTH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_VALIDATION = 1,
  SS_STATUS_INFEASIBLE = 2,
  SS_STATUS_GATE = 3,
  SS_STATUS_IO = 4,
  /**
   * Null pointer, bad UTF-8, out-of-range index or wrong buffer length.
   */
  SS_STATUS_INVALID_ARGUMENT = 5,
  /**
   * A panic was caught at the boundary.
   */
  SS_STATUS_INTERNAL = 6,
} SsStatus;

/**
 * A state-space model.
 */
typedef struct SsModel SsModel;

/**
 * The result of a successful compile: emitted files plus summary numbers.
 */
typedef struct SsProject SsProject;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *ss_last_error(void);

/**
 * Library version, static storage.
 */
const char *ss_version(void);

/**
 * Builds a model from a weights-file JSON document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum SsStatus ss_model_from_weights_json(const char *json, struct SsModel **out);

/**
 * Loads a weights file or a serialized state-space model from disk.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SsStatus ss_model_load(const char *path, struct SsModel **out);

/**
 * Seeded random network with `l` inputs, `n` layers of `m` nodes and `p`
 * outputs.
 *
 * # Safety
 * `out` must be writable.
 */
enum SsStatus ss_model_random_nn(size_t l,
                                 size_t n,
                                 size_t m,
                                 size_t p,
                                 uint64_t seed,
                                 struct SsModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is
 * ignored.
 */
void ss_model_free(struct SsModel *model);

/**
 * Input, state and output dimensions and the horizon. Any out pointer may
 * be null.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum SsStatus ss_model_dims(const struct SsModel *model,
                            size_t *input,
                            size_t *state,
                            size_t *output,
                            size_t *horizon);

/**
 * Double-precision reference output for one input vector.
 *
 * # Safety
 * `model` must be live; `u` must hold `u_len` values and `y` `y_len`.
 */
enum SsStatus ss_simulate_reference(const struct SsModel *model,
                                    const double *u,
                                    size_t u_len,
                                    double *y,
                                    size_t y_len);

/**
 * Bit-accurate output with every datapath class in Q(`word`, `frac`) and
 * the default activation table; values returned as reals.
 *
 * # Safety
 * As for [`ss_simulate_reference`].
 */
enum SsStatus ss_simulate_fixed(const struct SsModel *model,
                                uint32_t word,
                                uint32_t frac,
                                const double *u,
                                size_t u_len,
                                double *y,
                                size_t y_len);

/**
 * Runs the full compile flow on a project configuration document.
 * Relative paths in it resolve against `base_dir` (the working directory
 * when null). Nothing is written to disk; see [`ss_project_write`].
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum SsStatus ss_compile(const char *config_json, const char *base_dir, struct SsProject **out);

/**
 * # Safety
 * `project` must come from [`ss_compile`] and not be used afterwards.
 * Null is ignored.
 */
void ss_project_free(struct SsProject *project);

/**
 * Number of emitted files (Verilog sources first, then data files).
 *
 * # Safety
 * `project` must be live or null.
 */
size_t ss_project_file_count(const struct SsProject *project);

/**
 * File name at `index`, or null when out of range. Owned by the project.
 *
 * # Safety
 * `project` must be live or null.
 */
const char *ss_project_file_name(const struct SsProject *project, size_t index);

/**
 * File contents at `index`, or null when out of range. Owned by the project.
 *
 * # Safety
 * `project` must be live or null.
 */
const char *ss_project_file_text(const struct SsProject *project, size_t index);

/**
 * Latency, clock ratio and register count of the compiled netlist. Any out
 * pointer may be null.
 *
 * # Safety
 * `project` must be live.
 */
enum SsStatus ss_project_summary(const struct SsProject *project,
                                 size_t *latency,
                                 size_t *clock_ratio,
                                 size_t *registers);

/**
 * Writes every file into `dir`, creating it if needed.
 *
 * # Safety
 * `project` must be live; `dir` NUL-terminated.
 */
enum SsStatus ss_project_write(const struct SsProject *project, const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STATESYNTH_H */
