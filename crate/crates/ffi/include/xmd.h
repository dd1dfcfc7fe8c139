#ifndef XMD_H
#define XMD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum XmdStatus {
  XMD_STATUS_OK = 0,
  XMD_STATUS_NULL_POINTER = 1,
  XMD_STATUS_INVALID_ARGUMENT = 2,
  XMD_STATUS_SHAPE = 3,
  XMD_STATUS_INDEX = 4,
  XMD_STATUS_DATA = 5,
  XMD_STATUS_CONTRACT = 6,
  XMD_STATUS_CONFIG = 7,
  XMD_STATUS_MISSING_ARTIFACT = 8,
  XMD_STATUS_NUMERIC = 9,
  XMD_STATUS_IO = 10,
  XMD_STATUS_PANIC = 11,
} XmdStatus;

/*
 A 3D segmentation network with its architecture settings.
 */
typedef struct XmdNetwork XmdNetwork;

/*
 Generated paired camera/LiDAR sample.
 */
typedef struct XmdScene XmdScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version; a static NUL-terminated string.
 */
const char *xmd_version(void);

/*
 Copies the calling thread's last error message into `buf` (NUL
 terminated, truncated to `len`). Returns the full message length plus one,
 or 0 when there is no error.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t xmd_last_error(char *buf, size_t len);

/*
 Generates one scene with the default specification.

 # Safety
 `out` must point to writable storage for one pointer.
 */
enum XmdStatus xmd_scene_generate(uint64_t seed, struct XmdScene **out);

/*
 # Safety
 `scene` must be null or a live handle from [`xmd_scene_generate`].
 */
size_t xmd_scene_num_points(const struct XmdScene *scene);

/*
 # Safety
 `scene` must be a live handle; `height` and `width` writable.
 */
enum XmdStatus xmd_scene_image_size(const struct XmdScene *scene, size_t *height, size_t *width);

/*
 Copies the `n x 4` cloud (`x, y, z, intensity`) into `buf`; `len` must
 equal `4 n`.

 # Safety
 `scene` must be a live handle and `buf` point to `len` writable floats.
 */
enum XmdStatus xmd_scene_copy_cloud(const struct XmdScene *scene, float *buf, size_t len);

/*
 Copies the `3 x h x w` image into `buf`.

 # Safety
 `scene` must be a live handle and `buf` point to `len` writable floats.
 */
enum XmdStatus xmd_scene_copy_image(const struct XmdScene *scene, float *buf, size_t len);

/*
 Copies the coarse per-point labels into `buf`; `len` must equal `n`.

 # Safety
 `scene` must be a live handle and `buf` point to `len` writable ints.
 */
enum XmdStatus xmd_scene_copy_point_labels(const struct XmdScene *scene, int32_t *buf, size_t len);

/*
 # Safety
 `scene` must be null or a handle not freed before.
 */
void xmd_scene_free(struct XmdScene *scene);

/*
 An untrained network with default sizes, seeded.

 # Safety
 `out` must point to writable storage for one pointer.
 */
enum XmdStatus xmd_network_random(uint64_t seed, struct XmdNetwork **out);

/*
 Loads the distilled 3D network of a run directory written by
 `xmd train --mode fskd`.

 # Safety
 `run_dir` must be a NUL-terminated UTF-8 path; `out` writable.
 */
enum XmdStatus xmd_network_load(const char *run_dir, struct XmdNetwork **out);

/*
 # Safety
 `net` must be null or a live handle.
 */
size_t xmd_network_num_classes(const struct XmdNetwork *net);

/*
 Per-point class ids for an `n_points x 4` cloud.

 # Safety
 `net` must be a live handle, `cloud` point to `4 n_points` floats and
 `labels` to `n_points` writable ints.
 */
enum XmdStatus xmd_network_predict(const struct XmdNetwork *net,
                                   const float *cloud,
                                   size_t n_points,
                                   int32_t *labels);

/*
 # Safety
 `net` must be null or a handle not freed before.
 */
void xmd_network_free(struct XmdNetwork *net);

/*
 Mean IoU over classes present in either array.

 # Safety
 `preds` and `labels` must point to `n` ints; `out` must be writable.
 */
enum XmdStatus xmd_miou(const int32_t *preds,
                        const int32_t *labels,
                        size_t n,
                        size_t classes,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XMD_H */
