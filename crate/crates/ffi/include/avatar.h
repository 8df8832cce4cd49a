#ifndef AVATAR_H
#define AVATAR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AvatarStatus {
  AVATAR_STATUS_OK = 0,
  AVATAR_STATUS_NULL_POINTER = 1,
  AVATAR_STATUS_INVALID_ARGUMENT = 2,
  // A file could not be read or written.
  AVATAR_STATUS_IO = 3,
  // A file was read but its contents are unusable.
  AVATAR_STATUS_MALFORMED = 4,
  AVATAR_STATUS_INVARIANT = 5,
  AVATAR_STATUS_DIVERGED = 6,
  AVATAR_STATUS_PANIC = 7,
} AvatarStatus;

// Template body handle.
typedef struct AvatarBody AvatarBody;

// Fitted or freshly initialized scene handle.
typedef struct AvatarScene AvatarScene;

// Body parameters. `theta` holds `joints` axis-angle triples, `beta` holds `shapes` values.
typedef struct AvatarPose {
  const double *theta;
  size_t joints;
  const double *beta;
  size_t shapes;
  double root_translation[3];
} AvatarPose;

// Pinhole camera. `rotation` (row-major) and `translation` map camera to world coordinates;
// the camera looks along its +z axis with +y pointing down the image.
typedef struct AvatarCamera {
  uint32_t width;
  uint32_t height;
  double fx;
  double fy;
  double cx;
  double cy;
  double rotation[9];
  double translation[3];
} AvatarCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success. The pointer stays
// valid until the next call into this library from the same thread.
const char *avatar_last_error(void);

// Library version as a static NUL-terminated string.
const char *avatar_version(void);

// `σ = Sigmoid(−d/α)/α`.
//
// # Safety
// `out` must be null or point to writable memory for one `double`.
enum AvatarStatus avatar_sdf_to_density(double d, double alpha, double *out);

// Procedural test body. Nonpositive `height`, `girth` or zero `resolution` take defaults.
//
// # Safety
// `out` must be null or point to writable memory for one pointer.
enum AvatarStatus avatar_body_generate(double height,
                                       double girth,
                                       uint32_t resolution,
                                       struct AvatarBody **out);

// # Safety
// `path` must be null or NUL-terminated; `out` must be null or writable.
enum AvatarStatus avatar_body_load(const char *path, struct AvatarBody **out);

// # Safety
// `body` must be null or a live handle; `path` must be null or NUL-terminated.
enum AvatarStatus avatar_body_save(const struct AvatarBody *body, const char *path);

// Joint count, or 0 for a null handle.
//
// # Safety
// `body` must be null or a live handle.
size_t avatar_body_joint_count(const struct AvatarBody *body);

// # Safety
// `body` must be null or a live handle.
size_t avatar_body_shape_count(const struct AvatarBody *body);

// # Safety
// `body` must be null or a live handle.
size_t avatar_body_vertex_count(const struct AvatarBody *body);

// # Safety
// `body` must be null or a handle from this library that has not been freed.
void avatar_body_free(struct AvatarBody *body);

// Fresh scene with the default architecture for `body`.
//
// # Safety
// `body` must be null or a live handle; `out` must be null or writable.
enum AvatarStatus avatar_scene_new(const struct AvatarBody *body,
                                   uint64_t seed,
                                   struct AvatarScene **out);

// # Safety
// `path` must be null or NUL-terminated; `out` must be null or writable.
enum AvatarStatus avatar_scene_load(const char *path, struct AvatarScene **out);

// # Safety
// `scene` must be null or a live handle; `path` must be null or NUL-terminated.
enum AvatarStatus avatar_scene_save(const struct AvatarScene *scene, const char *path);

// Density sharpness `α` of the scene, or NaN for a null handle.
//
// # Safety
// `scene` must be null or a live handle.
double avatar_scene_alpha(const struct AvatarScene *scene);

// # Safety
// `scene` must be null or a handle from this library that has not been freed.
void avatar_scene_free(struct AvatarScene *scene);

// Observation-space `point` mapped into the canonical space of `scene` under `pose`.
//
// # Safety
// Handles must be live; `pose` arrays must hold `3 * joints` and `shapes` doubles; `point`
// and `out` must each hold three doubles.
enum AvatarStatus avatar_canonical_map(const struct AvatarScene *scene,
                                       const struct AvatarBody *body,
                                       const struct AvatarPose *pose,
                                       const double *point,
                                       double *out);

// Renders `scene` posed by `pose` from `camera` with `samples` points per ray (0 = default)
// on a white background. Outputs are row-major: `rgb` holds `3·w·h` floats, `depth` and
// `alpha` hold `w·h`; any of them may be null. Background depth is `+∞`.
//
// # Safety
// Handles must be live, `pose` arrays sized as declared, and non-null outputs sized as above.
enum AvatarStatus avatar_render(const struct AvatarScene *scene,
                                const struct AvatarBody *body,
                                const struct AvatarPose *pose,
                                const struct AvatarCamera *camera,
                                uint32_t samples,
                                float *rgb,
                                float *depth,
                                float *alpha);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVATAR_H */
