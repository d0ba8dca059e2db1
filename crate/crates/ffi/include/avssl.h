#ifndef AVSSL_H
#define AVSSL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AvsslStatus {
  AVSSL_STATUS_OK = 0,
  AVSSL_STATUS_NULL_POINTER = 1,
  AVSSL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Bad configuration, manifest or hour budget.
   */
  AVSSL_STATUS_USER_ERROR = 3,
  AVSSL_STATUS_IO = 4,
  AVSSL_STATUS_RUNTIME = 5,
  AVSSL_STATUS_BUFFER_TOO_SMALL = 6,
  AVSSL_STATUS_PANIC = 7,
} AvsslStatus;

/**
 * Opaque corpus manifest.
 */
typedef struct AvsslManifest AvsslManifest;

/**
 * Opaque fine-tuned recognizer: model, tokenizer and preprocessing stats.
 */
typedef struct AvsslRecognizer AvsslRecognizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to fit). Returns the full message length without
 * the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t avssl_last_error_message(char *buf, size_t len);

/**
 * Static NUL-terminated version string.
 */
const char *avssl_version(void);

/**
 * Loads a line-delimited manifest.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AvsslStatus avssl_manifest_load(const char *path, struct AvsslManifest **out);

/**
 * # Safety
 * `m` must be null or come from [`avssl_manifest_load`] and not be used
 * afterwards.
 */
void avssl_manifest_free(struct AvsslManifest *m);

/**
 * # Safety
 * `m` must be a live manifest handle and `out` a valid pointer.
 */
enum AvsslStatus avssl_manifest_len(const struct AvsslManifest *m, size_t *out);

/**
 * Hours of one language, or of the whole manifest when `language` is null.
 *
 * # Safety
 * `m` must be a live manifest handle, `language` null or NUL-terminated and
 * `out` a valid pointer.
 */
enum AvsslStatus avssl_manifest_hours(const struct AvsslManifest *m,
                                      const char *language,
                                      double *out);

/**
 * Applies a Multilingual RE plan (`total_hours`) and writes the sampled
 * manifest to `out_path`.
 *
 * # Safety
 * `m` must be a live manifest handle and `out_path` NUL-terminated.
 */
enum AvsslStatus avssl_manifest_sample_re(const struct AvsslManifest *m,
                                          double total_hours,
                                          uint64_t seed_value,
                                          const char *out_path);

/**
 * Character error rate with trim-only normalization.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out` valid.
 */
enum AvsslStatus avssl_cer(const char *reference, const char *hypothesis, double *out);

/**
 * CTC negative log-likelihood of `target` under row-major `frames x width`
 * log-probabilities. Infeasible targets give `+inf`.
 *
 * # Safety
 * `log_probs` must hold `frames * width` values, `target` `target_len`
 * values, and `out` must be valid.
 */
enum AvsslStatus avssl_ctc_loss(const double *log_probs,
                                size_t frames,
                                size_t width,
                                const uint32_t *target,
                                size_t target_len,
                                uint32_t blank,
                                double *out);

/**
 * Log probability that the CTC output starts with `prefix`.
 *
 * # Safety
 * As for [`avssl_ctc_loss`].
 */
enum AvsslStatus avssl_ctc_prefix_logp(const double *log_probs,
                                       size_t frames,
                                       size_t width,
                                       const uint32_t *prefix,
                                       size_t prefix_len,
                                       uint32_t blank,
                                       double *out);

/**
 * Teacher momentum at `step` of `total`.
 */
double avssl_tau_schedule(uint64_t step, uint64_t total, double tau0);

/**
 * Learning rate at fractional `epoch` of a warm-up/cosine schedule.
 *
 * # Safety
 * `out` must be valid.
 */
enum AvsslStatus avssl_lr_at(double peak,
                             double warmup_epochs,
                             double total_epochs,
                             double epoch,
                             double *out);

/**
 * Span mask over `len` frames: each frame starts a span of `span` frames
 * with probability `start_prob`. Writes 0/1 flags into `flags`.
 *
 * # Safety
 * `flags` must point to `len` writable bytes.
 */
enum AvsslStatus avssl_sample_frame_mask(size_t len,
                                         double start_prob,
                                         size_t span,
                                         uint64_t seed_value,
                                         uint8_t *flags);

/**
 * Loads a fine-tuned checkpoint. `tokenizer` may be null, in which case
 * `tokenizer.txt` next to the checkpoint is used.
 *
 * # Safety
 * Strings must be NUL-terminated (or null where allowed) and `out` valid.
 */
enum AvsslStatus avssl_recognizer_load(const char *checkpoint,
                                       const char *tokenizer,
                                       struct AvsslRecognizer **out);

/**
 * # Safety
 * `r` must be null or come from [`avssl_recognizer_load`] and not be used
 * afterwards.
 */
void avssl_recognizer_free(struct AvsslRecognizer *r);

/**
 * Overrides the beam width and CTC weight used for decoding.
 *
 * # Safety
 * `r` must be a live recognizer handle.
 */
enum AvsslStatus avssl_recognizer_set_beam(struct AvsslRecognizer *r,
                                           size_t beam_size,
                                           double ctc_weight);

/**
 * Transcribes record `index` of `m` into `buf`.
 *
 * # Safety
 * Handles must be live; `buf` null or `len` writable bytes; `required`
 * null or valid.
 */
enum AvsslStatus avssl_recognizer_decode(const struct AvsslRecognizer *r,
                                         const struct AvsslManifest *m,
                                         size_t index,
                                         char *buf,
                                         size_t len,
                                         size_t *required);

/**
 * Corpus CER of the recognizer over a transcribed manifest.
 *
 * # Safety
 * Handles must be live and `out` valid.
 */
enum AvsslStatus avssl_recognizer_evaluate(const struct AvsslRecognizer *r,
                                           const struct AvsslManifest *m,
                                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVSSL_H */
