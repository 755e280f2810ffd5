#ifndef SYNTHCOMP_H
#define SYNTHCOMP_H

#include <stdint.h>
#include <stddef.h>
#include <stdbool.h>

typedef enum SynthcompStatus {
  SYNTHCOMP_STATUS_OK = 0,
  SYNTHCOMP_STATUS_NULL_POINTER = 1,
  SYNTHCOMP_STATUS_INVALID_ARGUMENT = 2,
  SYNTHCOMP_STATUS_PARSE = 3,
  SYNTHCOMP_STATUS_IO = 4,
  SYNTHCOMP_STATUS_BACKEND = 5,
  // The dataset was written but validation found violations.
  SYNTHCOMP_STATUS_DATASET_DIRTY = 6,
  SYNTHCOMP_STATUS_BUFFER_TOO_SMALL = 7,
  SYNTHCOMP_STATUS_PANIC = 99,
} SynthcompStatus;

typedef struct SynthcompConfig SynthcompConfig;

typedef struct SynthcompVocab SynthcompVocab;

// Artifact counts implied by a config and vocabulary.
typedef struct SynthcompCounts {
  uint64_t classes;
  uint64_t generated_per_caption;
  uint64_t kept_per_caption;
  uint64_t generated_per_cdi;
  uint64_t kept_per_cdi;
  uint64_t contexts_generated;
  uint64_t contexts_kept;
  uint64_t zero_shot_generated;
  uint64_t zero_shot_kept;
  uint64_t fg_generated;
  uint64_t fg_kept;
  uint64_t samples;
  uint64_t paste_attempts;
} SynthcompCounts;

typedef struct SynthcompValidation {
  uint64_t images;
  uint64_t annotations;
  uint64_t violations;
} SynthcompValidation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *synthcomp_last_error(void);

// Static, NUL-terminated crate version.
const char *synthcomp_version(void);

enum SynthcompStatus synthcomp_config_default(struct SynthcompConfig **out);

// Parse `key = value` config text; absent keys keep their defaults.
enum SynthcompStatus synthcomp_config_parse(const char *text, struct SynthcompConfig **out);

enum SynthcompStatus synthcomp_config_set_seed(struct SynthcompConfig *config, uint64_t seed);

enum SynthcompStatus synthcomp_config_seed(const struct SynthcompConfig *config, uint64_t *out);

void synthcomp_config_free(struct SynthcompConfig *config);

// The 20 VOC classes.
enum SynthcompStatus synthcomp_vocab_voc(struct SynthcompVocab **out);

// One `label[<TAB>synonym,...]` per line.
enum SynthcompStatus synthcomp_vocab_parse(const char *text, struct SynthcompVocab **out);

enum SynthcompStatus synthcomp_vocab_len(const struct SynthcompVocab *vocab, uintptr_t *out);

void synthcomp_vocab_free(struct SynthcompVocab *vocab);

enum SynthcompStatus synthcomp_expected_counts(const struct SynthcompConfig *config,
                                               const struct SynthcompVocab *vocab,
                                               struct SynthcompCounts *out);

// Column-major run lengths of a `width` x `height` mask. `out_len` always
// receives the required count; a short buffer returns `BUFFER_TOO_SMALL`
// with nothing written. `counts` may be null when `capacity` is 0.
enum SynthcompStatus synthcomp_rle_encode(const uint8_t *bits,
                                          uint32_t width,
                                          uint32_t height,
                                          uint64_t *counts,
                                          uintptr_t capacity,
                                          uintptr_t *out_len);

// Inverse of [`synthcomp_rle_encode`]; writes `width * height` bytes of 0/1.
enum SynthcompStatus synthcomp_rle_decode(const uint64_t *counts,
                                          uintptr_t len,
                                          uint32_t width,
                                          uint32_t height,
                                          uint8_t *bits,
                                          uintptr_t capacity);

// Apply an edit list (one edit per line) to a caption. The result must be
// released with [`synthcomp_string_free`].
enum SynthcompStatus synthcomp_intervene(const char *caption, const char *edits, char **out);

void synthcomp_string_free(char *s);

// Run every stage into `out_dir`. A null `backend_url` selects the built-in
// procedural backend; a null `cdi_dir` selects zero-shot backgrounds.
// `report` is filled whenever validation ran, including on `DATASET_DIRTY`.
enum SynthcompStatus synthcomp_run_pipeline(const struct SynthcompConfig *config,
                                            const struct SynthcompVocab *vocab,
                                            const char *out_dir,
                                            const char *cdi_dir,
                                            const char *backend_url,
                                            uint32_t workers,
                                            struct SynthcompValidation *report);

// Validate a written dataset root.
enum SynthcompStatus synthcomp_validate(const char *dataset_dir,
                                        struct SynthcompValidation *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SYNTHCOMP_H */
