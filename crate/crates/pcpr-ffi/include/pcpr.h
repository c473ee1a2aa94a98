/* C interface for the pcpr surface-reconstruction library. */

#ifndef PCPR_H
#define PCPR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum PcprStatus {
  PCPR_STATUS_OK = 0,
  PCPR_STATUS_USAGE_ERROR = 1,
  PCPR_STATUS_DATA_ERROR = 2,
  PCPR_STATUS_NUMERICAL_ERROR = 3,
  PCPR_STATUS_NULL_ARGUMENT = 4,
  PCPR_STATUS_PANIC = 5,
} PcprStatus;

typedef struct PcprCloud PcprCloud;

typedef struct PcprMesh PcprMesh;

typedef struct PcprPrior PcprPrior;

typedef struct PcprSdf PcprSdf;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message for this thread; valid until the next failing call.
 */
const char *pcpr_last_error_message(void);

/**
 * Library version string (static storage).
 */
const char *pcpr_version(void);

/**
 * Read an ASCII XYZ or PLY point cloud from disk.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer to receive the handle.
 */
enum PcprStatus pcpr_cloud_read(const char *path, struct PcprCloud **out);

/**
 * Build a cloud from `count` dim-packed coordinates.
 *
 * # Safety
 * `coords` must point to `count * dim` readable doubles.
 */
enum PcprStatus pcpr_cloud_from_points(const double *coords,
                                       uintptr_t count,
                                       uintptr_t dim,
                                       struct PcprCloud **out);

/**
 * # Safety
 * `cloud` must be a live handle from this library.
 */
uintptr_t pcpr_cloud_len(const struct PcprCloud *cloud);

/**
 * # Safety
 * `cloud` must be a live handle from this library.
 */
uintptr_t pcpr_cloud_dim(const struct PcprCloud *cloud);

/**
 * # Safety
 * Handle from this library, not yet freed; null is a no-op.
 */
void pcpr_cloud_free(struct PcprCloud *cloud);

/**
 * Train the local prior on one cloud. `settings_json` follows the
 * `TrainPriorSettings` schema (grid, train.*); null means defaults. The
 * architecture's dimension is taken from the cloud.
 *
 * # Safety
 * `cloud` must be a live handle; `settings_json` null or NUL-terminated.
 */
enum PcprStatus pcpr_prior_train(const struct PcprCloud *cloud,
                                 const char *settings_json,
                                 struct PcprPrior **out);

/**
 * # Safety
 * `prior` must be a live handle; `path` NUL-terminated.
 */
enum PcprStatus pcpr_prior_save(const struct PcprPrior *prior, const char *path);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` valid.
 */
enum PcprStatus pcpr_prior_load(const char *path, struct PcprPrior **out);

/**
 * # Safety
 * Handle from this library, not yet freed; null is a no-op.
 */
void pcpr_prior_free(struct PcprPrior *prior);

/**
 * Specialize a prior to one cloud. `config_json` follows the
 * `SpecializeConfig` schema; null means defaults. `prior` may be null only
 * for mode "no_prior" with an architecture given in the config.
 *
 * # Safety
 * Handles must be live; strings NUL-terminated or null.
 */
enum PcprStatus pcpr_specialize(const struct PcprCloud *cloud,
                                const struct PcprPrior *prior,
                                const char *config_json,
                                struct PcprSdf **out);

/**
 * Evaluate signed distances at `count` dim-packed query positions.
 *
 * # Safety
 * `queries` must hold `count * dim` doubles and `out_values` room for
 * `count` doubles.
 */
enum PcprStatus pcpr_sdf_eval(const struct PcprSdf *sdf,
                              const double *queries,
                              uintptr_t count,
                              double *out_values);

/**
 * # Safety
 * `sdf` live handle, `path` NUL-terminated.
 */
enum PcprStatus pcpr_sdf_save(const struct PcprSdf *sdf, const char *path);

/**
 * # Safety
 * `path` NUL-terminated, `out` valid.
 */
enum PcprStatus pcpr_sdf_load(const char *path, struct PcprSdf **out);

/**
 * # Safety
 * Handle from this library, not yet freed; null is a no-op.
 */
void pcpr_sdf_free(struct PcprSdf *sdf);

/**
 * Evaluate the SDF on a lattice over the cloud's inflated bounding box and
 * run marching cubes at the zero level set.
 *
 * # Safety
 * Handles must be live.
 */
enum PcprStatus pcpr_reconstruct_mesh(const struct PcprSdf *sdf,
                                      const struct PcprCloud *cloud,
                                      uintptr_t resolution,
                                      double bounds_inflate,
                                      struct PcprMesh **out);

/**
 * # Safety
 * `mesh` must be a live handle from this library.
 */
uintptr_t pcpr_mesh_vertex_count(const struct PcprMesh *mesh);

/**
 * # Safety
 * `mesh` must be a live handle from this library.
 */
uintptr_t pcpr_mesh_triangle_count(const struct PcprMesh *mesh);

/**
 * Copy xyz-packed vertices into a caller buffer of 3 x vertex_count doubles.
 *
 * # Safety
 * `out_xyz` must have room for `3 * pcpr_mesh_vertex_count` doubles.
 */
enum PcprStatus pcpr_mesh_copy_vertices(const struct PcprMesh *mesh, double *out_xyz);

/**
 * Copy index triples into a caller buffer of 3 x triangle_count u32.
 *
 * # Safety
 * `out_indices` must have room for `3 * pcpr_mesh_triangle_count` entries.
 */
enum PcprStatus pcpr_mesh_copy_triangles(const struct PcprMesh *mesh, uint32_t *out_indices);

/**
 * Write the mesh as OBJ or ASCII PLY depending on the file extension.
 *
 * # Safety
 * `mesh` live handle, `path` NUL-terminated.
 */
enum PcprStatus pcpr_mesh_write(const struct PcprMesh *mesh, const char *path);

/**
 * # Safety
 * Handle from this library, not yet freed; null is a no-op.
 */
void pcpr_mesh_free(struct PcprMesh *mesh);

/**
 * Compare two geometry files (mesh or point set) and return the metric
 * report as a JSON string; free it with `pcpr_string_free`.
 * `settings_json` follows the `MetricConfig` schema; null means defaults.
 *
 * # Safety
 * Paths must be NUL-terminated; `out_json` valid.
 */
enum PcprStatus pcpr_evaluate_files(const char *recon,
                                    const char *truth,
                                    const char *settings_json,
                                    char **out_json);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must originate from this library and not be freed twice; null is a
 * no-op.
 */
void pcpr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PCPR_H */
