#ifndef STYLESHIFT_H
#define STYLESHIFT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result codes.
 */
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_DIMENSION = 2,
  SS_STATUS_NON_FINITE = 3,
  SS_STATUS_EMPTY_SET = 4,
  SS_STATUS_CONFIG = 5,
  SS_STATUS_PARSE = 6,
  SS_STATUS_IO = 7,
  SS_STATUS_REGISTRY_BUILD = 8,
  SS_STATUS_INVALID_ARGUMENT = 9,
  /*
   Any other library error.
   */
  SS_STATUS_FAILED = 10,
  /*
   A panic was caught at the boundary.
   */
  SS_STATUS_INTERNAL = 99,
} SsStatus;

/*
 Test-time shifting rule for [`ss_ts_apply`].
 */
typedef enum SsShiftMode {
  SS_SHIFT_MODE_OFF = 0,
  SS_SHIFT_MODE_PROPOSED = 1,
  SS_SHIFT_MODE_SHIFT_ALL = 2,
  SS_SHIFT_MODE_SINGLE_DOMAIN = 3,
} SsShiftMode;

/*
 Opaque registry of per-domain mean styles.
 */
typedef struct SsRegistry SsRegistry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Description of the last failure on this thread. The pointer stays valid
 until the next failing call on the same thread; never free it.
 */
const char *ss_last_error(void);

/*
 Writes the `2 * channels` style vector `[mu, sigma]` of a
 `channels x height x width` feature map to `out`.

 # Safety
 `features` holds `channels * height * width` doubles; `out` has room
 for `2 * channels`.
 */
enum SsStatus ss_style_vector(const double *features,
                              size_t channels,
                              size_t height,
                              size_t width,
                              double *out);

/*
 AdaIN of a `channels x height x width` map to the target style
 `[mu, sigma]` (`2 * channels` values). `out` receives the shifted map.

 # Safety
 `content` and `out` hold `channels * height * width` doubles; `style`
 holds `2 * channels`.
 */
enum SsStatus ss_adain(const double *content,
                       size_t channels,
                       size_t height,
                       size_t width,
                       const double *style,
                       double *out);

/*
 Exact distribution matching of one plane: `out` gets the values of `y`
 arranged in the rank order of `x`.

 # Safety
 `x`, `y` and `out` each hold `len` doubles.
 */
enum SsStatus ss_efdm(const double *x, const double *y, size_t len, double *out);

/*
 Per-domain sample targets for one class from `num_domains` counts.
 `targets` receives `num_domains` values and `average` the real mean.
 A class with no samples yields all-zero targets.

 # Safety
 `counts` and `targets` hold `num_domains` elements; `average` may be null.
 */
enum SsStatus ss_compute_targets(const size_t *counts,
                                 size_t num_domains,
                                 size_t *targets,
                                 double *average);

/*
 Selects up to `m` of `count` style vectors (row-major, `style_len`
 each) by redundancy. Positions go to `selected` in selection order and
 their number to `selected_len`; `distance_evals` (nullable) receives the
 number of pairwise distances computed.

 # Safety
 `styles` holds `count * style_len` doubles; `selected` has room for
 `m` elements.
 */
enum SsStatus ss_select_samples(const double *styles,
                                size_t count,
                                size_t style_len,
                                size_t m,
                                size_t *selected,
                                size_t *selected_len,
                                size_t *distance_evals);

/*
 Builds a registry from `num_domains` centroids of `style_len` values
 each (row-major). Domains are named `domain0`, `domain1`, ... Free the
 handle with [`ss_registry_free`].

 # Safety
 `layer` is a NUL-terminated string; `centroids` holds
 `num_domains * style_len` doubles; `out` is writable.
 */
enum SsStatus ss_registry_new(const char *layer,
                              double alpha,
                              const double *centroids,
                              size_t num_domains,
                              size_t style_len,
                              struct SsRegistry **out_handle);

/*
 Loads a registry JSON file written by the `stats` command.

 # Safety
 `path` is a NUL-terminated string; `out_handle` is writable.
 */
enum SsStatus ss_registry_load(const char *path, struct SsRegistry **out_handle);

/*
 # Safety
 `registry` is a live handle; `path` is a NUL-terminated string.
 */
enum SsStatus ss_registry_save(const struct SsRegistry *registry, const char *path);

/*
 Releases a handle. Null is ignored.

 # Safety
 `registry` is null or a handle not yet freed.
 */
void ss_registry_free(struct SsRegistry *registry);

/*
 Number of domains, channels, the spread and the default alpha.

 # Safety
 `registry` is a live handle; each output is null or writable.
 */
enum SsStatus ss_registry_info(const struct SsRegistry *registry,
                               size_t *num_domains,
                               size_t *channels,
                               double *spread,
                               double *alpha);

/*
 The shift test for one style vector of `2 * channels` values.
 `shift_to` gets the destination domain or -1; `avg_distance` and
 `threshold` (both nullable) the quantities compared.

 # Safety
 `registry` is a live handle; `phi` holds `len` doubles.
 */
enum SsStatus ss_decide(const struct SsRegistry *registry,
                        const double *phi,
                        size_t len,
                        double alpha,
                        int64_t *shift_to,
                        double *avg_distance,
                        double *threshold);

/*
 Applies a test-time rule to one `channels x height x width` map.
 `out` receives the (possibly unchanged) map, `shift_to` the destination
 domain or -1.

 # Safety
 `registry` is a live handle; `features` and `out` hold
 `channels * height * width` doubles; `shift_to` is writable.
 */
enum SsStatus ss_ts_apply(const struct SsRegistry *registry,
                          const double *features,
                          size_t channels,
                          size_t height,
                          size_t width,
                          double alpha,
                          enum SsShiftMode mode,
                          double *out,
                          int64_t *shift_to);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STYLESHIFT_H */
