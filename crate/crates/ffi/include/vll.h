#ifndef VLL_H
#define VLL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VllStatus {
  VLL_STATUS_OK = 0,
  VLL_STATUS_NULL_POINTER = 1,
  VLL_STATUS_INVALID_ARGUMENT = 2,
  VLL_STATUS_NUMERICAL = 3,
  VLL_STATUS_IO = 4,
  VLL_STATUS_PANIC = 5,
} VllStatus;

typedef enum VllAlphaMode {
  VLL_ALPHA_MODE_WEIGHT_RESCALE = 0,
  VLL_ALPHA_MODE_OUTPUT_RESCALE = 1,
} VllAlphaMode;

// Opaque Gram-matrix handle.
typedef struct VllGram VllGram;

// Opaque network handle.
typedef struct VllMlp VllMlp;

// Opaque covariate-model handle.
typedef struct VllModel VllModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *vll_version(void);

// Copy the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length in bytes.
//
// # Safety
// `buf` must be valid for `len` bytes or null.
uintptr_t vll_last_error_message(char *buf, uintptr_t len);

// Create a network with standard-normal weights.
//
// # Safety
// `out` must be a valid pointer.
enum VllStatus vll_mlp_new(uintptr_t d,
                           uintptr_t depth,
                           uintptr_t width,
                           double alpha,
                           enum VllAlphaMode mode,
                           uint64_t seed,
                           struct VllMlp **out);

// # Safety
// `h` must come from `vll_mlp_new` and not be used afterwards.
void vll_mlp_free(struct VllMlp *h);

// Parameter count of the network.
//
// # Safety
// `h` must be a live handle.
uintptr_t vll_mlp_param_count(const struct VllMlp *h);

// Centered outputs on `n` inputs of dimension `d` (row-major); writes `n` values.
//
// # Safety
// Buffers must hold `n*d` and `n` doubles.
enum VllStatus vll_mlp_centered_output(const struct VllMlp *h,
                                       const double *x,
                                       uintptr_t n,
                                       uintptr_t d,
                                       double *out);

// Empirical tangent kernel between `x1` (n×d) and `x2` (m×d).
//
// # Safety
// Buffers must hold `n*d` and `m*d` doubles; `out` must be valid.
enum VllStatus vll_entk(const struct VllMlp *h,
                        const double *x1,
                        uintptr_t n,
                        const double *x2,
                        uintptr_t m,
                        uintptr_t d,
                        struct VllGram **out);

// Wrap a square row-major matrix as a Gram handle.
//
// # Safety
// `k` must hold `n*n` doubles; `out` must be valid.
enum VllStatus vll_gram_from_matrix(const double *k, uintptr_t n, struct VllGram **out);

// Rows and columns of a Gram handle.
//
// # Safety
// `h` must be a live handle; `rows`/`cols` valid or null.
enum VllStatus vll_gram_shape(const struct VllGram *h, uintptr_t *rows, uintptr_t *cols);

// Copy the Gram entries (row-major) into `out`, which must hold rows*cols doubles.
//
// # Safety
// `h` must be live and `out` large enough.
enum VllStatus vll_gram_copy(const struct VllGram *h, double *out);

// # Safety
// `h` must come from this library and not be used afterwards.
void vll_gram_free(struct VllGram *h);

// Kernel-target alignment yᵀKy / (Tr K · |y|²).
//
// # Safety
// `y` must hold as many doubles as the Gram has rows.
enum VllStatus vll_alignment(const struct VllGram *h, const double *y, uintptr_t n, double *out);

// Infinite-width ReLU NTK and NNGP between `x1` (n×d) and `x2` (m×d).
// Either output may be null.
//
// # Safety
// Non-null outputs must hold `n*m` doubles.
enum VllStatus vll_ntk_infinite_relu(const double *x1,
                                     uintptr_t n,
                                     const double *x2,
                                     uintptr_t m,
                                     uintptr_t d,
                                     uintptr_t depth,
                                     double sigma,
                                     double *ntk_out,
                                     double *nngp_out);

// Kernel ridge regression: fit on `k_train` (p×p) and predict with `k_cross`
// (t×p). `ridge = 0` gives the minimum-norm interpolant.
//
// # Safety
// Buffers must match the stated sizes.
enum VllStatus vll_kernel_regression(const double *k_train,
                                     const double *y,
                                     uintptr_t p,
                                     const double *k_cross,
                                     uintptr_t t,
                                     double ridge,
                                     double *out);

// Covariate model with Σ_M eigenvalues `k^-exponent`, identity map, no noise
// and all target coefficients 1.
//
// # Safety
// `out` must be valid.
enum VllStatus vll_model_power_law(uintptr_t m, double exponent, struct VllModel **out);

// Covariate model from explicit spectra and a structured or Gaussian map.
// `map_kind`: 0 identity, 1 projection onto the top `keep_top` modes, 2 Gaussian
// with entries of scale `sigma_a` and `n_h = eta·M` rows.
//
// # Safety
// `eigs` and `wstar` hold `m` doubles; `noise` holds `n_noise` doubles.
enum VllStatus vll_model_new(const double *eigs,
                             const double *wstar,
                             uintptr_t m,
                             const double *noise,
                             uintptr_t n_noise,
                             int map_kind,
                             uintptr_t keep_top,
                             double sigma_a,
                             double eta,
                             struct VllModel **out);

// # Safety
// `h` must come from this library and not be used afterwards.
void vll_model_free(struct VllModel *h);

// Learning-curve theory at load P/M = `alpha_load`. Structured maps use the
// fixed-map solver, Gaussian maps the quenched one. `gamma` may be null.
//
// # Safety
// `h` must be live; `eg` valid.
enum VllStatus vll_theory_error(const struct VllModel *h,
                                double alpha_load,
                                double ridge,
                                double *eg,
                                double *gamma);

// Sample size where eg_ensembled/eg_single crosses 1/2. `found` is set to 0 when
// the ratio never reaches 1/2 (then `p_half` is left untouched).
//
// # Safety
// Each array holds `n` doubles; outputs valid.
enum VllStatus vll_p_half(const double *p,
                          const double *eg_single,
                          const double *eg_ensembled,
                          uintptr_t n,
                          double *p_half,
                          int *found);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VLL_H */
