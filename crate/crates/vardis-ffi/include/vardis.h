#ifndef VARDIS_H
#define VARDIS_H

/* Generated by cbindgen from the vardis-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible entry point.
typedef enum VardisStatus {
  VARDIS_STATUS_OK = 0,
  VARDIS_STATUS_NULL_ARGUMENT = 1,
  VARDIS_STATUS_INVALID_UTF8 = 2,
  VARDIS_STATUS_NOT_FOUND = 3,
  VARDIS_STATUS_PARSE_ERROR = 4,
  VARDIS_STATUS_VALIDATION_ERROR = 5,
  VARDIS_STATUS_CONFIG_ERROR = 6,
  VARDIS_STATUS_NUMERIC_ERROR = 7,
  VARDIS_STATUS_RUNTIME_ERROR = 8,
} VardisStatus;

// Opaque corpus handle.
typedef struct VardisCorpus VardisCorpus;

// Opaque handle over the four model checkpoints.
typedef struct VardisModels VardisModels;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *vardis_version(void);

// Message of the most recent error on this thread. The pointer stays valid
// until the next failing call on the same thread.
const char *vardis_last_error(void);

// Loads a JSON Lines corpus; returns null on failure.
//
// # Safety
// `path` must be a valid NUL-terminated string.
struct VardisCorpus *vardis_corpus_load(const char *path);

// Generates a synthetic corpus; `families` is a comma-separated list
// (fraction-division,squaring,lcm). Returns null on failure.
//
// # Safety
// `families` must be a valid NUL-terminated string or null for all families.
struct VardisCorpus *vardis_corpus_generate(const char *families,
                                            uintptr_t n,
                                            uintptr_t rules_per_item,
                                            double label_drop,
                                            uint64_t seed);

// Number of MCQs in the corpus; 0 for a null handle.
//
// # Safety
// `corpus` must be a handle returned by this library or null.
uintptr_t vardis_corpus_len(const struct VardisCorpus *corpus);

// Number of question-distractor pairs carrying an error label.
//
// # Safety
// `corpus` must be a handle returned by this library or null.
uintptr_t vardis_corpus_labeled_pairs(const struct VardisCorpus *corpus);

// Writes the corpus in the JSON Lines wire format.
//
// # Safety
// `corpus` must be a live handle; `path` a valid NUL-terminated string.
enum VardisStatus vardis_corpus_save(const struct VardisCorpus *corpus, const char *path);

// Splits a corpus by stem into three new handles.
//
// # Safety
// All pointers must be valid; out-params must point to writable storage.
enum VardisStatus vardis_corpus_split(const struct VardisCorpus *corpus,
                                      double ratio_train,
                                      double ratio_val,
                                      double ratio_test,
                                      uint64_t seed,
                                      struct VardisCorpus **out_train,
                                      struct VardisCorpus **out_val,
                                      struct VardisCorpus **out_test);

// Frees a corpus handle (null is a no-op).
//
// # Safety
// `corpus` must be a handle returned by this library, freed at most once.
void vardis_corpus_free(struct VardisCorpus *corpus);

// Supervised fine-tuning over a labeled corpus. `config_json` mirrors the
// CLI config file (null for defaults); the checkpoint directory is created.
//
// # Safety
// String arguments must be valid NUL-terminated strings (val/config may be
// null).
enum VardisStatus vardis_sft(const char *corpus_path,
                             const char *val_path,
                             const char *config_json,
                             const char *out_ckpt);

// Variational training starting from an SFT checkpoint; writes the updated
// checkpoint and the per-step training log CSV.
//
// # Safety
// String arguments must be valid NUL-terminated strings (config may be
// null).
enum VardisStatus vardis_train(const char *ckpt,
                               const char *corpus_path,
                               const char *config_json,
                               const char *out_ckpt);

// Loads a model checkpoint directory; returns null on failure.
//
// # Safety
// `dir` must be a valid NUL-terminated string.
struct VardisModels *vardis_models_load(const char *dir);

// Frees a models handle (null is a no-op).
//
// # Safety
// `models` must be a handle returned by this library, freed at most once.
void vardis_models_free(struct VardisModels *models);

// Overgenerate-and-rank for every MCQ in the corpus; writes JSON Lines
// generation records to `out_path`. `config_json` mirrors the CLI config
// (its "decode" section applies; null for defaults).
//
// # Safety
// Handles must be live; strings valid NUL-terminated (config may be null).
enum VardisStatus vardis_generate(const struct VardisModels *models,
                                  const struct VardisCorpus *corpus,
                                  const char *config_json,
                                  const char *out_path);

// Evaluates generations against a corpus at one K and returns the
// proportional-match percentage through `out_prop_percent`. When
// `report_json_path` is non-null the full report is written there (plus a
// `.summary.csv` sibling).
//
// # Safety
// Pointers must be valid; `out_prop_percent` must point to writable storage.
enum VardisStatus vardis_evaluate(const struct VardisCorpus *corpus,
                                  const char *generations_path,
                                  uintptr_t k,
                                  const char *similarity,
                                  const char *report_json_path,
                                  double *out_prop_percent);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* VARDIS_H */
