#ifndef MTLG2P_H
#define MTLG2P_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum Mtlg2pStatus {
  MTLG2P_STATUS_OK = 0,
  MTLG2P_STATUS_NULL_POINTER = 1,
  MTLG2P_STATUS_INVALID_UTF8 = 2,
  MTLG2P_STATUS_INVALID_ARGUMENT = 3,
  MTLG2P_STATUS_IO = 4,
  MTLG2P_STATUS_CHECKPOINT = 5,
  MTLG2P_STATUS_UNKNOWN_GRAPHEME = 6,
  MTLG2P_STATUS_INTERNAL = 7,
  MTLG2P_STATUS_PANIC = 8,
} Mtlg2pStatus;

/**
 * Opaque model handle.
 */
typedef struct Mtlg2pModel Mtlg2pModel;

/**
 * One decoded word. `phonemes` is a space-separated BAS-SAMPA string owned
 * by the caller; release it with [`mtlg2p_transcription_free`].
 */
typedef struct Mtlg2pTranscription {
  char *phonemes;
  /**
   * Sequence log-probability of the returned hypothesis.
   */
  double log_prob;
  double anglicism_probability;
  /**
   * No hypothesis ended within the length cap.
   */
  bool truncated;
} Mtlg2pTranscription;

typedef struct Mtlg2pEditOps {
  size_t matches;
  size_t substitutions;
  size_t deletions;
  size_t insertions;
  size_t distance;
} Mtlg2pEditOps;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint of either precision into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum Mtlg2pStatus mtlg2p_model_load(const char *path, struct Mtlg2pModel **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`mtlg2p_model_load`] and not be freed twice.
 */
void mtlg2p_model_free(struct Mtlg2pModel *model);

/**
 * Decodes `word` by beam search. A `beam_width` of 0 selects the default.
 *
 * # Safety
 * `model` must be a live handle, `word` a NUL-terminated string and `out`
 * a valid pointer.
 */
enum Mtlg2pStatus mtlg2p_transcribe(const struct Mtlg2pModel *model,
                                    const char *word,
                                    uint32_t beam_width,
                                    struct Mtlg2pTranscription *out);

/**
 * Releases the string inside a transcription and nulls it.
 *
 * # Safety
 * `t` must be NULL or point to a transcription filled by
 * [`mtlg2p_transcribe`].
 */
void mtlg2p_transcription_free(struct Mtlg2pTranscription *t);

/**
 * # Safety
 * `s` must be NULL or a string allocated by this library, freed once.
 */
void mtlg2p_string_free(char *s);

/**
 * Edit operations between two whitespace-separated token strings.
 *
 * # Safety
 * `reference` and `hypothesis` must be NUL-terminated strings and `out` a
 * valid pointer.
 */
enum Mtlg2pStatus mtlg2p_levenshtein(const char *reference,
                                     const char *hypothesis,
                                     struct Mtlg2pEditOps *out);

/**
 * Anglicism error rate in percent; `recognized` must not exceed `total`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum Mtlg2pStatus mtlg2p_aer(size_t total, size_t recognized, double *out);

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next call into the library from the same thread.
 */
const char *mtlg2p_last_error(void);

/**
 * Library version as a static string.
 */
const char *mtlg2p_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTLG2P_H */
