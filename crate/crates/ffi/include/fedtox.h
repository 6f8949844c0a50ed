#pragma once

/* Generated by cbindgen from fedtox-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call in this API.
 */
typedef enum FtxStatus {
  /**
   * The call succeeded.
   */
  FtxStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  FtxStatus_NullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  FtxStatus_InvalidUtf8 = 2,
  /**
   * Invalid configuration or parameters.
   */
  FtxStatus_Config = 3,
  /**
   * Malformed or insufficient data.
   */
  FtxStatus_Data = 4,
  /**
   * A network endpoint was unreachable or misbehaved.
   */
  FtxStatus_Endpoint = 5,
  /**
   * An internal invariant failed; the library state is still sound.
   */
  FtxStatus_Panic = 6,
} FtxStatus;

/**
 * Opaque multi-instance corpus handle.
 */
typedef struct FtxCorpus FtxCorpus;

/**
 * Corpus-wide counts, filled in by `ftx_corpus_stats`.
 */
typedef struct FtxCorpusStats {
  /**
   * Number of instances (federation clients).
   */
  uint64_t instances;
  /**
   * Conversations across all instances.
   */
  uint64_t conversations;
  /**
   * Posts across all conversations.
   */
  uint64_t toots;
  /**
   * Distinct authors across all instances.
   */
  uint64_t users;
} FtxCorpusStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string; never freed.
 */
const char *ftx_version(void);

/**
 * Description of the most recent failure on this thread, or null if the
 * last call succeeded. The pointer stays valid until the next ftx_ call
 * on the same thread; do not free it.
 */
const char *ftx_last_error(void);

/**
 * Releases a string returned through an out-parameter. Null is a no-op.
 *
 * # Safety
 * `s` must be a pointer previously returned by this library, or null.
 */
void ftx_string_free(char *s);

/**
 * Releases a corpus handle. Null is a no-op.
 *
 * # Safety
 * `corpus` must come from `ftx_corpus_parse_file` or `ftx_corpus_synth`
 * and must not be used afterwards.
 */
void ftx_corpus_free(struct FtxCorpus *corpus);

/**
 * Parses a JSONL corpus file (one post per line) into a corpus handle,
 * grouped by instance. Malformed lines are skipped, as in the ingest
 * stage; a file that yields no conversations at all is an error.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid location.
 */
enum FtxStatus ftx_corpus_parse_file(const char *path, struct FtxCorpus **out);

/**
 * Generates a synthetic corpus from a JSON configuration object; `"{}"`
 * selects the documented defaults.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid location.
 */
enum FtxStatus ftx_corpus_synth(const char *config_json, struct FtxCorpus **out);

/**
 * Fills `out` with corpus-wide counts.
 *
 * # Safety
 * `corpus` must be a live corpus handle and `out` a valid location.
 */
enum FtxStatus ftx_corpus_stats(const struct FtxCorpus *corpus, struct FtxCorpusStats *out);

/**
 * Labels every conversation under the given threshold policy and returns
 * CSV with columns `instance,conversation_id,label,reason`.
 *
 * # Safety
 * `corpus` must be a live corpus handle and `out_csv` a valid location.
 */
enum FtxStatus ftx_corpus_label_csv(const struct FtxCorpus *corpus,
                                    double thr_root,
                                    uint32_t thr_number,
                                    double thr_fraction,
                                    char **out_csv);

/**
 * Builds each instance's participant-sharing graph, extracts the noise-
 * corrected backbone at significance `delta`, and returns per-instance
 * retention CSV. Instances whose graphs are too small to score pass
 * through unfiltered, as in the backbone stage.
 *
 * # Safety
 * `corpus` must be a live corpus handle and `out_csv` a valid location.
 */
enum FtxStatus ftx_corpus_retention_csv(const struct FtxCorpus *corpus,
                                        double delta,
                                        char **out_csv);

/**
 * Runs one pipeline stage against the TOML config at `config_path`.
 * Recognized stages: synth, ingest, label, graph, backbone, features,
 * train, llm-eval, report. Grid sweeps take an axis; use `ftx_run_grid`.
 *
 * # Safety
 * `config_path` and `stage` must be NUL-terminated strings.
 */
enum FtxStatus ftx_run_stage(const char *config_path, const char *stage);

/**
 * Runs a grid sweep along one axis. `values` is a comma-separated list,
 * or null for the axis defaults.
 *
 * # Safety
 * `config_path` and `axis` must be NUL-terminated strings; `values` may
 * be null.
 */
enum FtxStatus ftx_run_grid(const char *config_path, const char *axis, const char *values);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
