#ifndef PONET_H
#define PONET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PonetPath {
  PONET_PATH_FUSED = 0,
  PONET_PATH_NAIVE = 1,
} PonetPath;

typedef enum PonetStatus {
  PONET_STATUS_OK = 0,
  PONET_STATUS_NULL_POINTER = 1,
  PONET_STATUS_INVALID_ARGUMENT = 2,
  PONET_STATUS_SHAPE_MISMATCH = 3,
  PONET_STATUS_NUMERIC = 4,
  PONET_STATUS_INVALID_STATE = 5,
  PONET_STATUS_PANIC = 6,
} PonetStatus;

typedef enum PonetVariant {
  PONET_VARIANT_FULL = 0,
  PONET_VARIANT_NO_SS_GA = 1,
  PONET_VARIANT_NO_GA = 2,
  PONET_VARIANT_NO_SMP = 3,
  PONET_VARIANT_NO_LMP = 4,
  PONET_VARIANT_GA_ONLY = 5,
} PonetVariant;

// Mixer parameters plus configuration.
typedef struct PonetMixer PonetMixer;

// Causal stream state bound to one mixer's parameters.
typedef struct PonetStream PonetStream;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer is
// valid until the next call into this library from the same thread.
const char *ponet_last_error(void);

// Library version as a static NUL-terminated string.
const char *ponet_version(void);

// Closed-form multiplication count of one mixer forward pass.
uint64_t ponet_count_mults(uint64_t n, uint64_t d, enum PonetPath path);

// Creates a mixer with seeded random projections (std `1/sqrt(d)`, zero
// biases). `lmp_window` must be odd.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum PonetStatus ponet_mixer_new(size_t d,
                                 size_t heads,
                                 size_t lmp_window,
                                 bool share_kv,
                                 enum PonetVariant variant,
                                 uint64_t seed,
                                 struct PonetMixer **out);

// Releases a mixer. Null is ignored.
//
// # Safety
// `mixer` must come from [`ponet_mixer_new`] and not be used afterwards.
void ponet_mixer_free(struct PonetMixer *mixer);

// Model width of a mixer, or 0 for null.
//
// # Safety
// `mixer` must be null or a live handle.
size_t ponet_mixer_dim(const struct PonetMixer *mixer);

// Mixes `n` rows of `input` (row-major `n × d`) into `output` (same size).
// `segment_ids` holds one non-decreasing, gap-free id per row starting at 0;
// pass null to treat the whole sequence as one segment.
//
// # Safety
// `input` and `output` must each point to `n * d` doubles; `segment_ids`
// must be null or point to `n` values.
enum PonetStatus ponet_mixer_forward(const struct PonetMixer *mixer,
                                     const double *input,
                                     size_t n,
                                     const uint32_t *segment_ids,
                                     enum PonetPath path,
                                     double *output);

// Opens a causal stream over a mixer's parameters. Only the `NoSsGa` and
// `NoGa` variants can stream.
//
// # Safety
// `mixer` must be a live handle and `out` writable.
enum PonetStatus ponet_stream_new(const struct PonetMixer *mixer, struct PonetStream **out);

// Feeds one row of width `d`; `boundary` opens a new segment at this row.
// Writes the emitted row of width `d` to `output`.
//
// # Safety
// `stream` must be live; `row` and `output` must point to `d` doubles.
enum PonetStatus ponet_stream_step(struct PonetStream *stream,
                                   const double *row,
                                   size_t d,
                                   bool boundary,
                                   double *output);

// Returns a stream to its freshly opened state.
//
// # Safety
// `stream` must be null or live.
enum PonetStatus ponet_stream_reset(struct PonetStream *stream);

// Releases a stream. Null is ignored.
//
// # Safety
// `stream` must come from [`ponet_stream_new`] and not be used afterwards.
void ponet_stream_free(struct PonetStream *stream);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PONET_H */
