#ifndef IR2QSM_H
#define IR2QSM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result codes; values match the CLI exit codes.
 */
typedef enum Ir2Status {
  IR2_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  IR2_STATUS_NULL = 1,
  /**
   * Invalid configuration or argument value.
   */
  IR2_STATUS_CONFIG = 2,
  /**
   * File missing, unreadable or malformed.
   */
  IR2_STATUS_IO = 3,
  /**
   * Shape mismatch or numeric failure.
   */
  IR2_STATUS_SHAPE = 4,
  /**
   * Internal panic; the handle arguments should be treated as unusable.
   */
  IR2_STATUS_PANIC = 5,
} Ir2Status;

/**
 * Trained network loaded from a checkpoint.
 */
typedef struct Ir2Network Ir2Network;

/**
 * Susceptibility or field volume (float64 internally).
 */
typedef struct Ir2Volume Ir2Volume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or "" after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *ir2_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ir2_version(void);

/**
 * Creates a volume of `nx·ny·nz` voxels, x fastest. `data` may be null for
 * an all-zero volume; otherwise it must hold `nx·ny·nz` floats.
 *
 * # Safety
 * `data` must be null or valid for `nx·ny·nz` reads; `out` must be valid
 * for one write.
 */
enum Ir2Status ir2_volume_new(size_t nx,
                              size_t ny,
                              size_t nz,
                              const double *voxel_size_mm,
                              const float *data,
                              struct Ir2Volume **out);

/**
 * Reads a QSMV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for one write.
 */
enum Ir2Status ir2_volume_read(const char *path, struct Ir2Volume **out);

/**
 * Writes a QSMV file.
 *
 * # Safety
 * `v` must be a live handle and `path` a NUL-terminated string.
 */
enum Ir2Status ir2_volume_write(const struct Ir2Volume *v, const char *path);

/**
 * Stores the extents (x, y, z) into `dims[0..3]`.
 *
 * # Safety
 * `v` must be a live handle; `dims` must be valid for three writes.
 */
enum Ir2Status ir2_volume_dims(const struct Ir2Volume *v, size_t *dims);

/**
 * Copies the voxel values (x fastest) into `dst`, which holds `len` floats.
 * `len` must equal the voxel count.
 *
 * # Safety
 * `v` must be a live handle; `dst` must be valid for `len` writes.
 */
enum Ir2Status ir2_volume_copy_data(const struct Ir2Volume *v, float *dst, size_t len);

/**
 * Releases a volume. Null is ignored.
 *
 * # Safety
 * `v` must be null or a handle not yet freed.
 */
void ir2_volume_free(struct Ir2Volume *v);

/**
 * Local field of a susceptibility map (circular convolution with the
 * dipole kernel, B0 along z).
 *
 * # Safety
 * `chi` must be a live handle; `out` must be valid for one write.
 */
enum Ir2Status ir2_forward_field(const struct Ir2Volume *chi, struct Ir2Volume **out);

/**
 * Truncated k-space division with the given kernel threshold.
 *
 * # Safety
 * `field` must be a live handle; `out` must be valid for one write.
 */
enum Ir2Status ir2_tkd_invert(const struct Ir2Volume *field,
                              double threshold,
                              struct Ir2Volume **out);

/**
 * Loads a trained network from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for one write.
 */
enum Ir2Status ir2_network_load(const char *path, struct Ir2Network **out);

/**
 * Number of U-net iterations T of a loaded network.
 *
 * # Safety
 * `net` must be a live handle; `out` must be valid for one write.
 */
enum Ir2Status ir2_network_iterations(const struct Ir2Network *net, size_t *out);

/**
 * Eval-mode reconstruction. Field extents must be multiples of 8.
 * `latents` may be null; otherwise it must hold T slots, which receive the
 * per-iteration maps as new handles.
 *
 * # Safety
 * Handles must be live; `out` valid for one write; `latents` null or valid
 * for T writes.
 */
enum Ir2Status ir2_network_reconstruct(const struct Ir2Network *net,
                                       const struct Ir2Volume *field,
                                       struct Ir2Volume **out,
                                       struct Ir2Volume **latents);

/**
 * Releases a network. Null is ignored.
 *
 * # Safety
 * `net` must be null or a handle not yet freed.
 */
void ir2_network_free(struct Ir2Network *net);

/**
 * NRMSE (%), HFEN (%) and SSIM (fraction) of `pred` against `gt` over all
 * voxels. A zero reference yields NaN rather than an error. Any output
 * pointer may be null.
 *
 * # Safety
 * Handles must be live; output pointers null or valid for one write.
 */
enum Ir2Status ir2_metrics(const struct Ir2Volume *pred,
                           const struct Ir2Volume *gt,
                           double *nrmse_percent,
                           double *hfen_percent,
                           double *ssim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IR2QSM_H */
