#ifndef CLICOOPER_H
#define CLICOOPER_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum ClcStatus {
  CLC_STATUS_OK = 0,
  CLC_STATUS_NULL_POINTER = 1,
  CLC_STATUS_INVALID_ARGUMENT = 2,
  CLC_STATUS_SHAPE = 3,
  CLC_STATUS_IO = 4,
  CLC_STATUS_FORMAT = 5,
  CLC_STATUS_DIGEST_MISMATCH = 6,
  CLC_STATUS_BUFFER_TOO_SMALL = 7,
  CLC_STATUS_INTERNAL = 8,
  CLC_STATUS_PANIC = 9,
} ClcStatus;

// Cached DP activation release.
typedef struct ClcDpCache ClcDpCache;

// Secret true-to-pseudo label map.
typedef struct ClcLabelMap ClcLabelMap;

// Outcome of a chain verification.
typedef struct ClcReport ClcReport;

// A network segment loaded from a checkpoint.
typedef struct ClcSegment ClcSegment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy of the calling thread's last error message, or NULL when the last
// call succeeded. Free with [`clc_string_free`].
char *clc_last_error_message(void);

// # Safety
// `s` must be NULL or a string returned by this library and not yet freed.
void clc_string_free(char *s);

// Builds a label map with `q` classes and per-class expansion factors `g`.
//
// # Safety
// `g` must point to `q` readable values; `out` must be writable.
enum ClcStatus clc_label_map_build(size_t q,
                                   const size_t *g,
                                   uint64_t seed,
                                   struct ClcLabelMap **out);

// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum ClcStatus clc_label_map_from_json(const char *json, struct ClcLabelMap **out);

// # Safety
// `map` must be a live handle; `out` must be writable.
enum ClcStatus clc_label_map_to_json(const struct ClcLabelMap *map, char **out);

// Number of pseudo classes, or 0 for a NULL handle.
//
// # Safety
// `map` must be NULL or a live handle.
size_t clc_label_map_pseudo_count(const struct ClcLabelMap *map);

// # Safety
// `map` must be NULL or a live handle.
double clc_label_map_gamma(const struct ClcLabelMap *map);

// True class behind a pseudo class.
//
// # Safety
// `map` must be a live handle; `out` must be writable.
enum ClcStatus clc_label_map_demask(const struct ClcLabelMap *map, size_t pseudo, size_t *out);

// Writes the pseudo classes of `class` into `buf`. `len` receives the
// count even when `cap` is too small.
//
// # Safety
// `map` must be a live handle, `buf` must have room for `cap` values and
// `len` must be writable.
enum ClcStatus clc_label_map_forward(const struct ClcLabelMap *map,
                                     size_t class_,
                                     size_t *buf,
                                     size_t cap,
                                     size_t *len);

// # Safety
// `map` must be NULL or a handle not yet freed.
void clc_label_map_free(struct ClcLabelMap *map);

// Loads a DP cache file; the stored digest is checked on load.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ClcStatus clc_dp_cache_load(const char *path, struct ClcDpCache **out);

// # Safety
// `cache` must be NULL or a live handle.
size_t clc_dp_cache_rows(const struct ClcDpCache *cache);

// # Safety
// `cache` must be NULL or a live handle.
size_t clc_dp_cache_cols(const struct ClcDpCache *cache);

// Privacy budget of the release; +inf means no noise was added.
//
// # Safety
// `cache` must be NULL or a live handle.
double clc_dp_cache_epsilon(const struct ClcDpCache *cache);

// Copies the 32-byte SHA-256 digest of the cached values.
//
// # Safety
// `cache` must be a live handle; `out` must have room for 32 bytes.
enum ClcStatus clc_dp_cache_digest(const struct ClcDpCache *cache, uint8_t *out);

// # Safety
// `cache` must be NULL or a handle not yet freed.
void clc_dp_cache_free(struct ClcDpCache *cache);

// Scales `row` in place onto the l1 ball of radius `radius`.
//
// # Safety
// `row` must point to `len` writable values.
enum ClcStatus clc_clip_l1(double *row, size_t len, double radius);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ClcStatus clc_segment_load(const char *path, struct ClcSegment **out);

// # Safety
// `seg` must be NULL or a live handle.
size_t clc_segment_input_dim(const struct ClcSegment *seg);

// # Safety
// `seg` must be NULL or a live handle.
size_t clc_segment_output_dim(const struct ClcSegment *seg);

// Forward pass over a row-major `rows x input_dim` batch into a
// `rows x output_dim` buffer.
//
// # Safety
// `seg` must be a live handle; `x` must hold `rows * input_dim` values and
// `out` must have room for `out_len` values.
enum ClcStatus clc_segment_infer(const struct ClcSegment *seg,
                                 const double *x,
                                 size_t rows,
                                 double *out,
                                 size_t out_len);

// # Safety
// `seg` must be NULL or a handle not yet freed.
void clc_segment_free(struct ClcSegment *seg);

// Checks the released chain `trainers[0..n]` against the cache and the
// public manifest at `manifest_path`. A failed check is not an error: the
// call returns `Ok` and the verdict is read from the report.
//
// # Safety
// `trainers` must point to `n` live segment handles, `cache` must be a live
// handle, `manifest_path` a NUL-terminated string and `out` writable.
enum ClcStatus clc_verify_chain(const struct ClcSegment *const *trainers,
                                size_t n,
                                const struct ClcDpCache *cache,
                                const char *manifest_path,
                                double eta_goal,
                                struct ClcReport **out);

// # Safety
// `report` must be NULL or a live handle.
bool clc_report_success(const struct ClcReport *report);

// # Safety
// `report` must be NULL or a live handle.
size_t clc_report_link_count(const struct ClcReport *report);

// Detection rate of the `i`-th checked link.
//
// # Safety
// `report` must be a live handle; `out` must be writable.
enum ClcStatus clc_report_link_eta(const struct ClcReport *report, size_t i, double *out);

// # Safety
// `report` must be a live handle; `out` must be writable.
enum ClcStatus clc_report_to_json(const struct ClcReport *report, char **out);

// # Safety
// `report` must be NULL or a handle not yet freed.
void clc_report_free(struct ClcReport *report);

// Per-link transfer seconds `size / bandwidth + overhead` into
// `per_link[0..n]`, and their sum into `total`.
//
// # Safety
// `sizes` must hold `n` values, `per_link` must have room for `n` values
// and `total` must be writable.
enum ClcStatus clc_estimate_latency(const double *sizes,
                                    size_t n,
                                    double bandwidth,
                                    double overhead,
                                    double *per_link,
                                    double *total);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CLICOOPER_H */
