#ifndef DAEDALUS_H
#define DAEDALUS_H

/* Generated by cbindgen from daedalus-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum {
  DAEDALUS_STATUS_OK = 0,
  DAEDALUS_STATUS_INVALID_ARGUMENT = 1,
  DAEDALUS_STATUS_IO_ERROR = 2,
  DAEDALUS_STATUS_NUMERIC_ERROR = 3,
  DAEDALUS_STATUS_NULL_POINTER = 4,
  DAEDALUS_STATUS_PANIC = 5,
} DaedalusStatus;

/**
 * NMS variant selector.
 */
typedef enum {
  DAEDALUS_NMS_HARD = 0,
  DAEDALUS_NMS_SOFT_LINEAR = 1,
  DAEDALUS_NMS_SOFT_GAUSSIAN = 2,
} DaedalusNms;

/**
 * Attack norm selector.
 */
typedef enum {
  DAEDALUS_NORM_L2 = 0,
  DAEDALUS_NORM_L0 = 1,
} DaedalusNorm;

/**
 * Adversarial loss selector.
 */
typedef enum {
  DAEDALUS_LOSS_F1 = 0,
  DAEDALUS_LOSS_F2 = 1,
  DAEDALUS_LOSS_F3 = 2,
} DaedalusLoss;

/**
 * Opaque detector-model handle.
 */
typedef struct DaedalusModel DaedalusModel;

/**
 * Detection-pipeline options. `daedalus_detect_options_default` fills the
 * recommended values.
 */
typedef struct {
  double objectness_threshold;
  double nt;
  DaedalusNms nms;
  double soft_sigma;
  double soft_score_floor;
  double defence_min_area;
} DaedalusDetectOptions;

/**
 * Attack configuration. `daedalus_attack_options_default` fills the
 * published defaults. A null/empty `target_classes` attacks every category.
 */
typedef struct {
  double gamma;
  DaedalusNorm norm;
  DaedalusLoss loss;
  double eta;
  uint32_t max_iteration;
  uint32_t binary_steps;
  double l0_top_fraction;
  uint64_t seed;
  const uint32_t *target_classes;
  uintptr_t n_target_classes;
} DaedalusAttackOptions;

/**
 * One detection box.
 */
typedef struct {
  uint32_t class_id;
  double score;
  double cx;
  double cy;
  double w;
  double h;
} DaedalusDetection;

/**
 * Attack outcome summary.
 */
typedef struct {
  bool success;
  double l2_distortion;
  uint64_t l0_distortion;
  double best_c;
  double loss_init;
  double final_loss;
} DaedalusAttackStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *daedalus_version(void);

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must point to at least `len` writable bytes (or be null).
 */
uintptr_t daedalus_last_error_message(char *buf, uintptr_t len);

/**
 * Build a seeded micro detector. `variant` is 'A', 'B' or 'C'.
 *
 * # Safety
 * `out` must be a valid pointer; the returned handle must be released with
 * `daedalus_model_free`.
 */
DaedalusStatus daedalus_model_build(uint64_t seed,
                                    char variant,
                                    uint32_t num_classes,
                                    uint32_t input_side,
                                    DaedalusModel **out);

/**
 * Load a model from a binary model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
DaedalusStatus daedalus_model_load(const char *path, DaedalusModel **out);

/**
 * Save a model to a binary model file (bit-exact round trip).
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
DaedalusStatus daedalus_model_save(const DaedalusModel *model, const char *path);

/**
 * Train a copy of `model` on a scene directory (see `daedalus gen-scenes`),
 * returning a new handle.
 *
 * # Safety
 * `model` must be live; `scenes_dir` NUL-terminated; `out` valid.
 */
DaedalusStatus daedalus_model_train(const DaedalusModel *model,
                                    const char *scenes_dir,
                                    uint32_t epochs,
                                    double learning_rate,
                                    uint64_t seed,
                                    DaedalusModel **out);

/**
 * # Safety
 * `model` must be a live handle (null is ignored).
 */
void daedalus_model_free(DaedalusModel *model);

/**
 * Input side length the model expects, in pixels.
 *
 * # Safety
 * `model` must be a live handle.
 */
uint32_t daedalus_model_input_side(const DaedalusModel *model);

/**
 * Constant raw box count of the model head.
 *
 * # Safety
 * `model` must be a live handle.
 */
uint32_t daedalus_model_num_boxes(const DaedalusModel *model);

/**
 * Generate a synthetic scene corpus into a directory (PNG + JSON pairs).
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string.
 */
DaedalusStatus daedalus_scenes_generate(uint64_t seed,
                                        uint32_t count,
                                        uint32_t size,
                                        uint32_t max_objects,
                                        const char *out_dir);

/**
 * Recommended detection options.
 */
DaedalusDetectOptions daedalus_detect_options_default(void);

/**
 * Published attack defaults (attacks every category).
 */
DaedalusAttackOptions daedalus_attack_options_default(void);

/**
 * Run the detection pipeline on an interleaved RGB8 buffer. On success the
 * detections are allocated into `*out_boxes` / `*out_len`; release them with
 * `daedalus_detections_free`. `opts` may be null for defaults.
 *
 * # Safety
 * `model` must be live; `rgb` must hold `width*height*3` bytes; out pointers
 * must be valid.
 */
DaedalusStatus daedalus_detect(const DaedalusModel *model,
                               const uint8_t *rgb,
                               uint32_t width,
                               uint32_t height,
                               const DaedalusDetectOptions *opts,
                               DaedalusDetection **out_boxes,
                               uintptr_t *out_len);

/**
 * Release a detection array from `daedalus_detect`.
 *
 * # Safety
 * `boxes`/`len` must come from `daedalus_detect`, unmodified.
 */
void daedalus_detections_free(DaedalusDetection *boxes, uintptr_t len);

/**
 * Run the L2 or L0 attack against one or more models (an ensemble) on an
 * interleaved RGB8 image. The adversarial image is written into `out_rgb`
 * (same layout and size as the input, 8-bit quantized); `out_stats` may be
 * null.
 *
 * # Safety
 * `models` must point to `n_models` live handles; `rgb` and `out_rgb` must
 * hold `width*height*3` bytes each.
 */
DaedalusStatus daedalus_attack(const DaedalusModel *const *models,
                               uintptr_t n_models,
                               const uint8_t *rgb,
                               uint32_t width,
                               uint32_t height,
                               const DaedalusAttackOptions *opts,
                               uint8_t *out_rgb,
                               DaedalusAttackStats *out_stats);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAEDALUS_H */
