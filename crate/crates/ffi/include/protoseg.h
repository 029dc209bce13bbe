#ifndef PROTOSEG_H
#define PROTOSEG_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ProtosegStatus {
  PROTOSEG_STATUS_OK = 0,
  PROTOSEG_STATUS_NULL_POINTER = 1,
  PROTOSEG_STATUS_INVALID_ARGUMENT = 2,
  PROTOSEG_STATUS_INVALID_SHAPE = 3,
  PROTOSEG_STATUS_INVALID_CONFIG = 4,
  PROTOSEG_STATUS_FORMAT = 5,
  PROTOSEG_STATUS_IO = 6,
  PROTOSEG_STATUS_EMPTY_CLASS = 7,
  PROTOSEG_STATUS_INTERNAL = 8,
  PROTOSEG_STATUS_PANIC = 9,
} ProtosegStatus;

/**
 * Segmentation settings. Starts at the library defaults.
 */
typedef struct ProtosegConfig ProtosegConfig;

/**
 * A 3D label mask, `[S, H, W]`, one class id per voxel.
 */
typedef struct ProtosegMask ProtosegMask;

/**
 * Output of `protoseg_segment`.
 */
typedef struct ProtosegResult ProtosegResult;

/**
 * A 3D intensity volume, `[S, H, W]`.
 */
typedef struct ProtosegVolume ProtosegVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *protoseg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *protoseg_version(void);

/**
 * Copies `s*h*w` floats (slice-major, row-major) into a new volume.
 */
enum ProtosegStatus protoseg_volume_new(const float *data,
                                        size_t s,
                                        size_t h,
                                        size_t w,
                                        struct ProtosegVolume **out);

/**
 * Reads a VOLRAW file.
 */
enum ProtosegStatus protoseg_volume_read(const char *path, struct ProtosegVolume **out);

/**
 * Writes `dims` as `[S, H, W]`.
 */
enum ProtosegStatus protoseg_volume_dims(const struct ProtosegVolume *volume, size_t *dims);

void protoseg_volume_free(struct ProtosegVolume *volume);

/**
 * Copies `s*h*w` class ids into a new mask.
 */
enum ProtosegStatus protoseg_mask_new(const uint8_t *data,
                                      size_t s,
                                      size_t h,
                                      size_t w,
                                      struct ProtosegMask **out);

/**
 * Reads a MASKRAW file.
 */
enum ProtosegStatus protoseg_mask_read(const char *path, struct ProtosegMask **out);

/**
 * Writes `dims` as `[S, H, W]`.
 */
enum ProtosegStatus protoseg_mask_dims(const struct ProtosegMask *mask, size_t *dims);

/**
 * Copies the class ids into `buf`, which must hold exactly `S*H*W` bytes.
 */
enum ProtosegStatus protoseg_mask_copy(const struct ProtosegMask *mask, uint8_t *buf, size_t len);

/**
 * Writes a MASKRAW file.
 */
enum ProtosegStatus protoseg_mask_write(const struct ProtosegMask *mask, const char *path);

void protoseg_mask_free(struct ProtosegMask *mask);

/**
 * New configuration with the default settings. Never NULL.
 */
struct ProtosegConfig *protoseg_config_new(void);

/**
 * Sets one option by name, using the command-line spelling of the value:
 * `gamma`, `window` (slices or ALL), `iterations`, `strategy`, `alpha`,
 * `fusion`, `pairing`, `shots`, `extractor`, `selection`
 * (EVENLY_SPACED or CENTER_BLOCK) and `class_gamma` (CLASS=GAMMA).
 */
enum ProtosegStatus protoseg_config_set(struct ProtosegConfig *config,
                                        const char *key,
                                        const char *value);

void protoseg_config_free(struct ProtosegConfig *config);

/**
 * Segments `query` using `shots` slices of the annotated support volume.
 * A NULL `config` uses the defaults.
 */
enum ProtosegStatus protoseg_segment(const struct ProtosegConfig *config,
                                     const struct ProtosegVolume *support,
                                     const struct ProtosegMask *support_mask,
                                     const struct ProtosegVolume *query,
                                     struct ProtosegResult **out);

/**
 * The predicted mask, owned by `result`. NULL if `result` is NULL.
 */
const struct ProtosegMask *protoseg_result_mask(const struct ProtosegResult *result);

/**
 * Number of pseudo-label rounds that ran.
 */
size_t protoseg_result_rounds(const struct ProtosegResult *result);

void protoseg_result_free(struct ProtosegResult *result);

/**
 * 3D Dice of `class` between a prediction and the ground truth.
 */
enum ProtosegStatus protoseg_dice(const struct ProtosegMask *pred,
                                  const struct ProtosegMask *truth,
                                  uint8_t class_,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTOSEG_H */
