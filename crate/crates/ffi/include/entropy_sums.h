#ifndef ENTROPY_SUMS_H
#define ENTROPY_SUMS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum EsStatus {
  ES_STATUS_OK = 0,
  ES_STATUS_NULL_ARGUMENT = 1,
  ES_STATUS_INVALID_UTF8 = 2,
  ES_STATUS_DOMAIN = 3,
  ES_STATUS_CONTRACT = 4,
  ES_STATUS_NUMERICAL = 5,
  ES_STATUS_CAPACITY = 6,
  ES_STATUS_DEGENERATE_COMPONENT = 7,
  ES_STATUS_UNSUPPORTED = 8,
  ES_STATUS_NOT_APPLICABLE = 9,
  ES_STATUS_IO = 10,
  ES_STATUS_JSON = 11,
  ES_STATUS_PANIC = 12,
} EsStatus;

// A dataset of observation rows.
typedef struct EsDataset EsDataset;

// The result of a fit.
typedef struct EsFit EsFit;

// A parsed model.
typedef struct EsModel EsModel;

// Outcome of comparing the ELBO with the entropy sum.
typedef struct EsVerdict {
  double elbo;
  double entropy_sum;
  double abs_gap;
  double rel_gap;
  bool pass;
} EsVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next failing call on the same thread.
const char *es_last_error_message(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must be NULL or a string returned by this library and not yet freed.
void es_string_free(char *s);

// Parses a model from its JSON description.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum EsStatus es_model_from_json(const char *json, struct EsModel **out);

// # Safety
// `model` must be NULL or a handle from this library not yet freed.
void es_model_free(struct EsModel *model);

// Mean log marginal likelihood `(1/N) Σ log p(x_n)` of a dataset.
//
// # Safety
// Handles must be live; `out` must be writable.
enum EsStatus es_model_mean_log_likelihood(const struct EsModel *model,
                                           const struct EsDataset *data,
                                           double *out);

// Draws `n` rows from `model` with the given seed.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum EsStatus es_model_sample(const struct EsModel *model,
                              size_t n,
                              uint64_t seed,
                              struct EsDataset **out);

// Parses a dataset in the JSON-lines format written by the `entsum` tool.
//
// # Safety
// `jsonl` must be a NUL-terminated string; `out` must be writable.
enum EsStatus es_dataset_from_jsonl(const char *jsonl, struct EsDataset **out);

// Number of rows, or 0 for NULL.
//
// # Safety
// `data` must be NULL or a live handle.
size_t es_dataset_len(const struct EsDataset *data);

// Row length, or 0 for NULL.
//
// # Safety
// `data` must be NULL or a live handle.
size_t es_dataset_dim(const struct EsDataset *data);

// # Safety
// `data` must be NULL or a handle from this library not yet freed.
void es_dataset_free(struct EsDataset *data);

// EM from a seeded initialization with the structure of `model`. Pass 0 for
// `max_iters` or a non-positive tolerance to use the default.
//
// # Safety
// Handles must be live; `out` must be writable.
enum EsStatus es_fit_em(const struct EsModel *model,
                        const struct EsDataset *data,
                        uint64_t seed,
                        size_t max_iters,
                        double tol_elbo,
                        double tol_grad,
                        struct EsFit **out);

// Closed-form p-PCA fit with `h` latent dimensions.
//
// # Safety
// `data` must be a live handle; `out` must be writable.
enum EsStatus es_fit_ppca(const struct EsDataset *data, size_t h, struct EsFit **out);

// Whether the fit met its stationarity thresholds; false for NULL.
//
// # Safety
// `fit` must be NULL or a live handle.
bool es_fit_converged(const struct EsFit *fit);

// Final ELBO of the fit.
//
// # Safety
// `fit` must be a live handle; `out` must be writable.
enum EsStatus es_fit_final_elbo(const struct EsFit *fit, double *out);

// Fitted model as a new handle.
//
// # Safety
// `fit` must be a live handle; `out` must be writable.
enum EsStatus es_fit_model(const struct EsFit *fit, struct EsModel **out);

// The full fit report as JSON; free with [`es_string_free`].
//
// # Safety
// `fit` must be a live handle; `out` must be writable.
enum EsStatus es_fit_to_json(const struct EsFit *fit, char **out);

// # Safety
// `fit` must be NULL or a handle from this library not yet freed.
void es_fit_free(struct EsFit *fit);

// Compares the (pseudo-)ELBO with the entropy sum at the fitted parameters.
// A non-positive `tol` selects the default.
//
// # Safety
// Handles must be live; `out` must be writable.
enum EsStatus es_verify(const struct EsFit *fit,
                        const struct EsDataset *data,
                        double tol,
                        struct EsVerdict *out);

// Stationary p-PCA ELBO for a row-major `d × h` loading matrix.
//
// # Safety
// `w` must point to `d * h` readable doubles; `out` must be writable.
enum EsStatus es_ppca_stationary_elbo(const double *w,
                                      size_t d,
                                      size_t h,
                                      double sigma2,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENTROPY_SUMS_H */
