#ifndef FIBERSIM_H
#define FIBERSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  FS_STATUS_OK = 0,
  FS_STATUS_NULL_POINTER = 1,
  FS_STATUS_INVALID_ARGUMENT = 2,
  FS_STATUS_CONFIG = 3,
  FS_STATUS_PRECONDITION = 4,
  FS_STATUS_NON_CONVERGENCE = 5,
  FS_STATUS_BLOW_UP = 6,
  FS_STATUS_IO = 7,
  FS_STATUS_BUFFER_TOO_SMALL = 8,
  FS_STATUS_PANIC = 9,
  FS_STATUS_INTERNAL = 10,
} FsStatus;

/**
 * Opaque simulator built from a configuration text.
 */
typedef struct FsSimulator FsSimulator;

/**
 * Opaque single-path trajectory.
 */
typedef struct FsTrajectory FsTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fs_last_error_message(void);

/**
 * Static NUL-terminated version string.
 */
const char *fs_version(void);

/**
 * Parses `config` (flat key=value text) and assembles a simulator.
 *
 * # Safety
 * `config` must be a NUL-terminated string; `out` must be writable.
 */
FsStatus fs_simulator_new(const char *config, FsSimulator **out);

/**
 * # Safety
 * `sim` must come from [`fs_simulator_new`] and not be used afterwards.
 */
void fs_simulator_free(FsSimulator *sim);

/**
 * Number of time points (steps + 1) and of grid nodes including s = 0.
 *
 * # Safety
 * `sim` must be a live handle; the outputs must be writable.
 */
FsStatus fs_simulator_shape(const FsSimulator *sim, size_t *time_points, size_t *nodes);

/**
 * Simulates sample path `path`. Paths with the same index and seed are
 * bitwise reproducible.
 *
 * # Safety
 * `sim` must be a live handle; `out` must be writable.
 */
FsStatus fs_simulator_run_path(const FsSimulator *sim, uint64_t path, FsTrajectory **out);

/**
 * # Safety
 * `traj` must come from [`fs_simulator_run_path`] and not be used afterwards.
 */
void fs_trajectory_free(FsTrajectory *traj);

/**
 * Copies the state at time index `k`: node-major, three channels per node,
 * into `u` and `v` (each of length `len` >= nodes * 3), and its time into `t`.
 *
 * # Safety
 * `traj` must be a live handle; `u` and `v` must hold `len` doubles.
 */
FsStatus fs_trajectory_state(const FsTrajectory *traj,
                             size_t k,
                             double *t,
                             double *u,
                             double *v,
                             size_t len);

/**
 * Observable `⟨X(t_k), h⟩_H` for every time point, where `h` is the sine
 * mode `mode` in `channel` (1..=3) of the displacement (`component` 0) or
 * velocity (`component` 1).
 *
 * # Safety
 * Both handles must be live; `out` must hold `len` doubles.
 */
FsStatus fs_trajectory_observe(const FsSimulator *sim,
                               const FsTrajectory *traj,
                               size_t mode,
                               size_t channel,
                               uint32_t component,
                               double *out,
                               size_t len);

/**
 * Runs the invariant suite on `config`; writes the number of failed checks.
 * The status reports whether the suite could run, not whether it passed.
 *
 * # Safety
 * `config` must be a NUL-terminated string; `failed` must be writable.
 */
FsStatus fs_verify(const char *config, uint32_t *failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FIBERSIM_H */
