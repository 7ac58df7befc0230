#ifndef SVDDIP_H
#define SVDDIP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SvddipStatus {
  SVDDIP_STATUS_OK = 0,
  SVDDIP_STATUS_INVALID_ARGUMENT = 1,
  SVDDIP_STATUS_NUMERICAL_FAILURE = 2,
  SVDDIP_STATUS_FORMAT = 3,
  SVDDIP_STATUS_IO = 4,
  SVDDIP_STATUS_NULL_POINTER = 5,
  SVDDIP_STATUS_BUFFER_TOO_SMALL = 6,
  SVDDIP_STATUS_PANIC = 7,
} SvddipStatus;

typedef enum SvddipVariant {
  SVDDIP_VARIANT_DIP = 0,
  SVDDIP_VARIANT_EDIP = 1,
  SVDDIP_VARIANT_SVD_DIP = 2,
} SvddipVariant;

// A U-Net with its parameters.
typedef struct SvddipNetwork SvddipNetwork;

// A CT forward operator.
typedef struct SvddipOperator SvddipOperator;

// Options of [`svddip_reconstruct`]; fill with [`svddip_reconstruct_defaults`].
typedef struct SvddipReconstructOptions {
  enum SvddipVariant variant;
  size_t iterations;
  // Non-positive selects the variant default.
  double learning_rate;
  double gamma;
  uint64_t seed;
} SvddipReconstructOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next call.
const char *svddip_last_error_message(void);

// Parallel-beam operator with uniformly spaced angles over [0, pi).
enum SvddipStatus svddip_operator_parallel(size_t num_angles,
                                           size_t num_detectors,
                                           size_t n_px,
                                           struct SvddipOperator **out);

void svddip_operator_free(struct SvddipOperator *op);

// Image side and sinogram dimensions of an operator.
enum SvddipStatus svddip_operator_shape(const struct SvddipOperator *op,
                                        size_t *n_px,
                                        size_t *num_angles,
                                        size_t *num_detectors);

// Sinogram of an image.
enum SvddipStatus svddip_operator_forward(const struct SvddipOperator *op,
                                          const double *image,
                                          size_t image_len,
                                          double *sinogram,
                                          size_t sinogram_len);

// Filtered back-projection with the Ram-Lak filter.
enum SvddipStatus svddip_operator_fbp(const struct SvddipOperator *op,
                                      const double *sinogram,
                                      size_t sinogram_len,
                                      double *image,
                                      size_t image_len);

// Freshly initialized desk-scale U-Net.
enum SvddipStatus svddip_network_desk(uint64_t seed, struct SvddipNetwork **out);

// Loads a checkpoint directory.
enum SvddipStatus svddip_network_load(const char *dir, struct SvddipNetwork **out);

enum SvddipStatus svddip_network_save(const struct SvddipNetwork *net, const char *dir);

void svddip_network_free(struct SvddipNetwork *net);

// Factorizes every down/up-block conv, keeping `rank_fraction` of each rank
// (1 keeps all). Only singular values stay trainable.
enum SvddipStatus svddip_network_factorize(struct SvddipNetwork *net, double rank_fraction);

enum SvddipStatus svddip_network_trainable_count(const struct SvddipNetwork *net, size_t *out);

// Network output for an `n * n` input image.
enum SvddipStatus svddip_network_predict(const struct SvddipNetwork *net,
                                         const double *image,
                                         size_t n,
                                         double *out,
                                         size_t out_len);

struct SvddipReconstructOptions svddip_reconstruct_defaults(enum SvddipVariant variant);

// Runs DIP, EDIP or SVD-DIP on a sinogram and writes the last iterate.
//
// `net` is the pretrained starting point (ignored for DIP, which uses a fresh
// desk-scale network). `ground_truth` may be null; otherwise the PSNR of the
// last iterate is stored in `final_psnr` (which may also be null).
enum SvddipStatus svddip_reconstruct(const struct SvddipOperator *op,
                                     const struct SvddipNetwork *net,
                                     const struct SvddipReconstructOptions *options,
                                     const double *sinogram,
                                     size_t sinogram_len,
                                     const double *ground_truth,
                                     double *image,
                                     size_t image_len,
                                     double *final_psnr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SVDDIP_H */
