#ifndef TURBOGAN_H
#define TURBOGAN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TgOracleKind {
  TG_ORACLE_KIND_GAUSSIAN = 0,
  TG_ORACLE_KIND_FBM = 1,
  TG_ORACLE_KIND_MRW = 2,
} TgOracleKind;

typedef enum TgStatus {
  TG_STATUS_OK = 0,
  TG_STATUS_INVALID_ARGUMENT = 1,
  TG_STATUS_DEGENERATE_INPUT = 2,
  TG_STATUS_FORMAT = 3,
  TG_STATUS_IO = 4,
  TG_STATUS_DIVERGENCE = 5,
  TG_STATUS_NULL_POINTER = 6,
  TG_STATUS_PANIC = 7,
} TgStatus;

/**
 * Opaque ensemble of `R` realizations of `N` samples.
 */
typedef struct TgEnsemble TgEnsemble;

/**
 * Opaque trained generator.
 */
typedef struct TgGenerator TgGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t tg_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tg_version(void);

/**
 * Samples an oracle ensemble. `hurst` is ignored for Gaussian noise;
 * `lambda2` and `correlation_length` only apply to MRW.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum TgStatus tg_ensemble_synth(enum TgOracleKind kind,
                                double hurst,
                                double lambda2,
                                size_t correlation_length,
                                size_t realizations,
                                size_t samples,
                                uint64_t seed,
                                struct TgEnsemble **out);

/**
 * Copies `realizations * samples` row-major values into a new ensemble.
 *
 * # Safety
 * `data` must point to `realizations * samples` readable doubles.
 */
enum TgStatus tg_ensemble_from_data(const double *data,
                                    size_t realizations,
                                    size_t samples,
                                    struct TgEnsemble **out);

/**
 * Reads `<path>.f32` and `<path>.meta`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum TgStatus tg_ensemble_read(const char *path, struct TgEnsemble **out);

/**
 * Writes `<path>.f32` and `<path>.meta`.
 *
 * # Safety
 * `ens` must be a live handle and `path` a NUL-terminated string.
 */
enum TgStatus tg_ensemble_write(const struct TgEnsemble *ens, const char *path);

/**
 * # Safety
 * `ens` must be a live handle; the output pointers must be valid.
 */
enum TgStatus tg_ensemble_shape(const struct TgEnsemble *ens,
                                size_t *realizations,
                                size_t *samples);

/**
 * Copies the row-major data into `buf`, which must hold exactly `R * N` values.
 *
 * # Safety
 * `buf` must point to `len` writable doubles.
 */
enum TgStatus tg_ensemble_data(const struct TgEnsemble *ens, double *buf, size_t len);

/**
 * # Safety
 * `ens` must be null or a handle not yet freed.
 */
void tg_ensemble_free(struct TgEnsemble *ens);

/**
 * Ensemble-mean `log S_2`, skewness and `log(F/3)` at the given lags.
 * Each output array must hold `n_lags` values.
 *
 * # Safety
 * `lags` must point to `n_lags` values and each output to `n_lags` writable doubles.
 */
enum TgStatus tg_stat_curves(const struct TgEnsemble *ens,
                             const size_t *lags,
                             size_t n_lags,
                             double *log_s2,
                             double *skewness,
                             double *log_flatness_over_3);

/**
 * Scaling exponents on the default lag grid, fitted over `[fit_min, fit_max]`.
 *
 * # Safety
 * `orders` must point to `n_orders` values and `zeta` to `n_orders` writable doubles.
 */
enum TgStatus tg_zeta_fit(const struct TgEnsemble *ens,
                          const double *orders,
                          size_t n_orders,
                          double fit_min,
                          double fit_max,
                          double *zeta);

/**
 * Loads the generator stored in a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum TgStatus tg_generator_load(const char *path, struct TgGenerator **out);

/**
 * Generates `realizations` signals of `samples` values after trimming `border` samples.
 *
 * # Safety
 * `gen` must be a live handle; `out` a valid handle slot.
 */
enum TgStatus tg_generator_generate(const struct TgGenerator *gen,
                                    size_t realizations,
                                    size_t samples,
                                    size_t border,
                                    uint64_t seed,
                                    struct TgEnsemble **out);

/**
 * Trainable parameter count of a loaded generator.
 *
 * # Safety
 * `gen` must be a live handle and `count` a valid pointer.
 */
enum TgStatus tg_generator_param_count(const struct TgGenerator *gen, size_t *count);

/**
 * # Safety
 * `gen` must be null or a handle not yet freed.
 */
void tg_generator_free(struct TgGenerator *gen);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TURBOGAN_H */
