/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef RAMPSAFE_H
#define RAMPSAFE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Length of the online observation vector.
 */
#define RS_OBS_DIM 10

typedef enum {
  RS_CBF_MODE_COUPLED = 0,
  RS_CBF_MODE_DECOUPLED = 1,
} RsCbfMode;

typedef enum {
  RS_CHANCE_MARGIN_EXACT = 0,
  RS_CHANCE_MARGIN_UNSCALED = 1,
} RsChanceMargin;

typedef enum {
  RS_STATUS_OK = 0,
  RS_STATUS_NULL_POINTER = 1,
  RS_STATUS_DOMAIN = 2,
  RS_STATUS_DIMENSION = 3,
  RS_STATUS_CONFIG = 4,
  RS_STATUS_PARSE = 5,
  RS_STATUS_CHECKPOINT = 6,
  RS_STATUS_IO = 7,
  RS_STATUS_INVALID_ARGUMENT = 8,
  RS_STATUS_PANIC = 9,
} RsStatus;

typedef enum {
  RS_AXIS_X = 0,
  RS_AXIS_Y = 1,
  RS_AXIS_COUPLED = 2,
} RsAxis;

/**
 * Opaque online environment.
 */
typedef struct RsEnv RsEnv;

/**
 * Opaque actor network.
 */
typedef struct RsPolicy RsPolicy;

typedef struct {
  double alpha;
  double eta;
  double r_safe;
  double dt;
  double u_min;
  double u_max;
  RsCbfMode mode;
  RsChanceMargin margin;
} RsCbfConfig;

typedef struct {
  double dx[2];
  double dv[2];
  double eps_mean[2];
  double eps_var[2];
} RsPairGeometry;

typedef struct {
  RsAxis axis;
  double a[2];
  double b;
} RsConstraint;

typedef struct {
  double reward;
  double filtered[2];
  bool done;
  bool reached_goal;
  bool infeasible;
} RsStepResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length of the pending error message in bytes, excluding the NUL.
 */
size_t rs_last_error_length(void);

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the number
 * of bytes written, excluding the NUL.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null.
 */
size_t rs_last_error_message(char *buf, size_t len);

/**
 * Default CBF parameters.
 */
RsCbfConfig rs_cbf_config_default(void);

/**
 * # Safety
 * All pointers must be valid for their types.
 */
RsStatus rs_barrier(const RsPairGeometry *pair, const RsCbfConfig *cfg, RsAxis axis, double *out);

/**
 * # Safety
 * All pointers must be valid for their types.
 */
RsStatus rs_chance_constraint(const RsPairGeometry *pair,
                              const RsCbfConfig *cfg,
                              RsAxis axis,
                              RsConstraint *out);

/**
 * Writes one constraint per axis in use (1 coupled, 2 decoupled) to `out`
 * and their count to `written`.
 *
 * # Safety
 * `out` must be valid for `capacity` constraints; other pointers for their
 * types.
 */
RsStatus rs_pair_constraints(const RsPairGeometry *pair,
                             const RsCbfConfig *cfg,
                             RsConstraint *out,
                             size_t capacity,
                             size_t *written);

/**
 * Projects `nominal` onto the box and the constraints.
 *
 * # Safety
 * `constraints` must be valid for `count` entries; `nominal` and `out` for
 * two doubles.
 */
RsStatus rs_safety_filter(const double *nominal,
                          const RsConstraint *constraints,
                          size_t count,
                          const RsCbfConfig *cfg,
                          double *out,
                          bool *infeasible);

/**
 * Creates an online environment from a run-config TOML document (null for
 * defaults). Only the `seed` and `[scenario]` parts are used.
 *
 * # Safety
 * `config_toml` must be null or a NUL-terminated string; `out` valid.
 */
RsStatus rs_env_new(const char *config_toml, uint64_t seed, RsEnv **out);

/**
 * # Safety
 * `env` must come from `rs_env_new` and not be used afterwards.
 */
void rs_env_free(RsEnv *env);

/**
 * Resets the episode to start time `t0` and writes the raw observation.
 *
 * # Safety
 * `env` valid; `obs` valid for `RS_OBS_DIM` doubles.
 */
RsStatus rs_env_reset(RsEnv *env, double t0, double *obs);

/**
 * Applies one policy action (longitudinal acceleration, m/s²).
 *
 * # Safety
 * `env` and `result` valid.
 */
RsStatus rs_env_step(RsEnv *env, double action, RsStepResult *result);

/**
 * Raw observation (`scaled = false`) or the scaled policy features.
 *
 * # Safety
 * `env` valid; `obs` valid for `RS_OBS_DIM` doubles.
 */
RsStatus rs_env_observation(const RsEnv *env, bool scaled, double *obs);

/**
 * Current ego/host distance and the episode minimum so far, m.
 *
 * # Safety
 * `env` valid; outputs valid or null.
 */
RsStatus rs_env_distance(const RsEnv *env, double *current, double *minimum);

/**
 * Loads the actor from a checkpoint file.
 *
 * # Safety
 * `path` NUL-terminated; `out` valid.
 */
RsStatus rs_policy_load(const char *path, RsPolicy **out);

/**
 * Parses the actor from checkpoint JSON text.
 *
 * # Safety
 * `json` NUL-terminated; `out` valid.
 */
RsStatus rs_policy_from_json(const char *json, RsPolicy **out);

/**
 * # Safety
 * `policy` must come from a `rs_policy_*` constructor and not be used
 * afterwards.
 */
void rs_policy_free(RsPolicy *policy);

/**
 * Observation and action sizes of the actor.
 *
 * # Safety
 * `policy` valid; outputs valid or null.
 */
RsStatus rs_policy_dims(const RsPolicy *policy, size_t *obs_dim, size_t *action_dim);

/**
 * Gaussian policy mean and standard deviation for one observation.
 *
 * # Safety
 * `obs` valid for `obs_len` doubles; `mean` and `std` (or null) for
 * `action_len`.
 */
RsStatus rs_policy_forward(const RsPolicy *policy,
                           const double *obs,
                           size_t obs_len,
                           double *mean,
                           double *std,
                           size_t action_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAMPSAFE_H */
