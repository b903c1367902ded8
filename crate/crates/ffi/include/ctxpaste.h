/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef CTXPASTE_H
#define CTXPASTE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CpStatus {
  CP_STATUS_OK = 0,
  CP_STATUS_NULL_ARGUMENT = 1,
  CP_STATUS_INVALID_ARGUMENT = 2,
  CP_STATUS_CONFIG = 3,
  CP_STATUS_SHAPE = 4,
  CP_STATUS_EMPTY_BANK = 5,
  CP_STATUS_RESAMPLE = 6,
  CP_STATUS_PLACEMENT = 7,
  CP_STATUS_TRAINING_FAILED = 8,
  CP_STATUS_IO = 9,
  CP_STATUS_FORMAT = 10,
  CP_STATUS_PANIC = 99,
} CpStatus;

/**
 * A harvested instance bank.
 */
typedef struct CpBank CpBank;

/**
 * A list of samples with its category name table.
 */
typedef struct CpCorpus CpCorpus;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cp_last_error(void);

/**
 * Library version as a static string.
 */
const char *cp_version(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void cp_string_free(char *s);

/**
 * Generates `count` synthetic scenes. `synth_json` may be null for the
 * defaults.
 *
 * # Safety
 * `synth_json` must be null or a NUL-terminated string; `out` must be
 * writable.
 */
enum CpStatus cp_corpus_synth(const char *synth_json,
                              size_t count,
                              uint64_t seed,
                              struct CpCorpus **out);

/**
 * Loads a corpus from a manifest file.
 *
 * # Safety
 * `manifest_path` must be a NUL-terminated string; `out` must be writable.
 */
enum CpStatus cp_corpus_load(const char *manifest_path, struct CpCorpus **out);

/**
 * Writes images, masks and `manifest.json` under `dir`.
 *
 * # Safety
 * `corpus` must be a live handle; `dir` a NUL-terminated string.
 */
enum CpStatus cp_corpus_save(const struct CpCorpus *corpus, const char *dir);

/**
 * Number of samples; 0 for a null handle.
 *
 * # Safety
 * `corpus` must be null or a live handle.
 */
size_t cp_corpus_len(const struct CpCorpus *corpus);

/**
 * Copies sample `index`'s label categories into `labels` (capacity
 * `cap`) and stores the label count in `len`.
 *
 * # Safety
 * `corpus` must be a live handle, `labels` valid for `cap` bytes and `len`
 * writable.
 */
enum CpStatus cp_corpus_labels(const struct CpCorpus *corpus,
                               size_t index,
                               uint8_t *labels,
                               size_t cap,
                               size_t *len);

/**
 * # Safety
 * `corpus` must be null or a handle not yet freed.
 */
void cp_corpus_free(struct CpCorpus *corpus);

/**
 * Harvests a bank using each sample's ground-truth mask as its prediction.
 *
 * # Safety
 * `corpus` must be a live handle; `out` writable.
 */
enum CpStatus cp_bank_harvest_gt(const struct CpCorpus *corpus,
                                 double eps1,
                                 double eps2,
                                 bool require_single_class,
                                 struct CpBank **out);

/**
 * # Safety
 * `dir` must be a NUL-terminated string; `out` writable.
 */
enum CpStatus cp_bank_load(const char *dir, struct CpBank **out);

/**
 * # Safety
 * `bank` must be a live handle; `dir` a NUL-terminated string.
 */
enum CpStatus cp_bank_save(const struct CpBank *bank, const char *dir);

/**
 * Number of instances; 0 for a null handle.
 *
 * # Safety
 * `bank` must be null or a live handle.
 */
size_t cp_bank_len(const struct CpBank *bank);

/**
 * # Safety
 * `bank` must be null or a handle not yet freed.
 */
void cp_bank_free(struct CpBank *bank);

/**
 * Pastes bank instances into every sample of `corpus`, producing a new
 * corpus of augmented samples in the same order. `augment_json` may be
 * null for the defaults.
 *
 * # Safety
 * Handles must be live; `augment_json` null or NUL-terminated; `out`
 * writable.
 */
enum CpStatus cp_augment(const struct CpCorpus *corpus,
                         const struct CpBank *bank,
                         const char *augment_json,
                         uint64_t seed,
                         struct CpCorpus **out);

/**
 * Mean IoU of two `width * height` category masks over categories
 * `1..=categories` and background.
 *
 * # Safety
 * `pred` and `gt` must be valid for `width * height` bytes; `out` writable.
 */
enum CpStatus cp_miou(const uint8_t *pred,
                      const uint8_t *gt,
                      size_t width,
                      size_t height,
                      uint8_t categories,
                      double *out);

/**
 * Runs the two-arm experiment and returns the report as JSON in
 * `report_json`, to be released with [`cp_string_free`]. `config_json`
 * may be null for the defaults.
 *
 * # Safety
 * `config_json` must be null or NUL-terminated; `report_json` writable.
 */
enum CpStatus cp_experiment_run(const char *config_json, char **report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTXPASTE_H */
