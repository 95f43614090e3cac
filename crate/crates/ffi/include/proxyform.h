#ifndef PROXYFORM_H
#define PROXYFORM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_POINTER = 1,
  PF_STATUS_INVALID_ARGUMENT = 2,
  PF_STATUS_INVALID_CONFIG = 3,
  PF_STATUS_IO = 4,
  PF_STATUS_PARSE = 5,
  PF_STATUS_SHAPE = 6,
  PF_STATUS_RUNTIME = 7,
  PF_STATUS_PANIC = 8,
} PfStatus;

typedef enum PfFormat {
  // Chosen from the file extension.
  PF_FORMAT_AUTO = 0,
  PF_FORMAT_PLY = 1,
  PF_FORMAT_CSV = 2,
} PfFormat;

typedef enum PfVariant {
  PF_VARIANT_SELF_ATTENTION = 0,
  PF_VARIANT_CROSS = 1,
  PF_VARIANT_PROXY = 2,
} PfVariant;

// Point cloud.
typedef struct PfCloud PfCloud;

// Pipeline configuration.
typedef struct PfConfig PfConfig;

// Report of one enhancement run.
typedef struct PfReport PfReport;

// Analytic cost of an attention stack.
typedef struct PfFlops {
  uint64_t projections;
  uint64_t attention_core;
  uint64_t ffn;
  uint64_t bias;
  uint64_t total;
  uint64_t params;
} PfFlops;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or `NULL` if none. Valid until
// the next failing call on the same thread; do not free.
const char *pf_last_error(void);

// Library version as a static string; do not free.
const char *pf_version(void);

// # Safety
// `s` must be `NULL` or a string returned by this library.
void pf_string_free(char *s);

// Default configuration (`fast != 0` selects the quick preset).
//
// # Safety
// `out` must be a valid pointer.
enum PfStatus pf_config_default(int32_t fast, struct PfConfig **out);

// Parses a JSON configuration; missing fields take their defaults.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum PfStatus pf_config_from_json(const char *json, struct PfConfig **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PfStatus pf_config_load(const char *path, struct PfConfig **out);

// Canonical JSON; release with [`pf_string_free`].
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum PfStatus pf_config_to_json(const struct PfConfig *cfg, char **out);

// # Safety
// `cfg` must be a live handle.
enum PfStatus pf_config_set_seed(struct PfConfig *cfg, uint64_t seed);

// `0` uses all cores.
//
// # Safety
// `cfg` must be a live handle.
enum PfStatus pf_config_set_threads(struct PfConfig *cfg, size_t threads);

// Clusters that survive the drop.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum PfStatus pf_config_kept_clusters(const struct PfConfig *cfg, size_t *out);

// # Safety
// `cfg` must be `NULL` or a handle not yet freed.
void pf_config_free(struct PfConfig *cfg);

// Cloud from `n` interleaved `x, y, z` triples.
//
// # Safety
// `xyz` must point to `3 * n` doubles (may be `NULL` when `n == 0`); `out`
// must be a valid pointer.
enum PfStatus pf_cloud_new(const double *xyz, size_t n, struct PfCloud **out);

// Synthetic scene of `n_points` points.
//
// # Safety
// `out` must be a valid pointer.
enum PfStatus pf_scene_generate(size_t n_points, uint64_t seed, struct PfCloud **out);

// Number of points; `0` for `NULL`.
//
// # Safety
// `cloud` must be `NULL` or a live handle.
size_t pf_cloud_len(const struct PfCloud *cloud);

// Copies the coordinates into `buf` as interleaved triples. `buf_len` is the
// capacity in doubles and must be at least `3 * pf_cloud_len(cloud)`.
//
// # Safety
// `cloud` must be a live handle and `buf` must hold `buf_len` doubles.
enum PfStatus pf_cloud_copy_xyz(const struct PfCloud *cloud, double *buf, size_t buf_len);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PfStatus pf_cloud_read(const char *path, enum PfFormat format, struct PfCloud **out);

// # Safety
// `cloud` must be a live handle and `path` a NUL-terminated string.
enum PfStatus pf_cloud_write(const struct PfCloud *cloud, const char *path, enum PfFormat format);

// # Safety
// `cloud` must be `NULL` or a handle not yet freed.
void pf_cloud_free(struct PfCloud *cloud);

// Runs the pipeline with parameters and proxy tokens derived from the
// config seed. `out_report` may be `NULL`.
//
// # Safety
// `cfg` and `cloud` must be live handles, `out_cloud` a valid pointer, and
// `out_report` `NULL` or a valid pointer.
enum PfStatus pf_enhance(const struct PfConfig *cfg,
                         const struct PfCloud *cloud,
                         struct PfCloud **out_cloud,
                         struct PfReport **out_report);

// # Safety
// `report` must be a live handle and `out` a valid pointer.
enum PfStatus pf_report_kept_clusters(const struct PfReport *report, size_t *out);

// Pretty JSON; release with [`pf_string_free`].
//
// # Safety
// `report` must be a live handle and `out` a valid pointer.
enum PfStatus pf_report_to_json(const struct PfReport *report, char **out);

// # Safety
// `report` must be `NULL` or a handle not yet freed.
void pf_report_free(struct PfReport *report);

// FLOPs and parameters of a `layers`-block stack, with an output projection.
//
// # Safety
// `out` must be a valid pointer.
enum PfStatus pf_flops(uint64_t n_seq,
                       uint64_t n_proxy,
                       uint64_t channels,
                       uint64_t ffn_mult,
                       uint64_t layers,
                       enum PfVariant variant,
                       struct PfFlops *out);

// Worst relative gradient error over `instances` random instances of every
// check. `out_passed` (may be `NULL`) receives 1 when within tolerance.
//
// # Safety
// `out_max_error` must be a valid pointer; `out_passed` `NULL` or valid.
enum PfStatus pf_gradcheck(size_t instances,
                           uint64_t seed,
                           double *out_max_error,
                           int32_t *out_passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROXYFORM_H */
