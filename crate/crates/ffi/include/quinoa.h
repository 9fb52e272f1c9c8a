/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef QUINOA_H
#define QUINOA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a C call. The first four values match the CLI exit codes.
 */
typedef enum QuinoaStatus {
  QUINOA_STATUS_OK = 0,
  QUINOA_STATUS_CONFIG = 1,
  QUINOA_STATUS_NUMERIC = 2,
  QUINOA_STATUS_IO = 3,
  QUINOA_STATUS_NULL_POINTER = 4,
  QUINOA_STATUS_INVALID_ARGUMENT = 5,
  QUINOA_STATUS_PANIC = 6,
} QuinoaStatus;

/**
 * One environment instance with its own reset generator.
 */
typedef struct QuinoaEnv QuinoaEnv;

/**
 * A policy loaded from a checkpoint, with its own sampling generator.
 */
typedef struct QuinoaPolicy QuinoaPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *quinoa_last_error(void);

/**
 * Loads the live policy from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QuinoaStatus quinoa_policy_load(const char *path, uint64_t seed, struct QuinoaPolicy **out);

/**
 * # Safety
 * `policy` must be null or a handle from [`quinoa_policy_load`] not yet freed.
 */
void quinoa_policy_free(struct QuinoaPolicy *policy);

/**
 * State dimension of the policy, or 0 for a null handle.
 *
 * # Safety
 * `policy` must be null or a live handle.
 */
size_t quinoa_policy_state_dim(const struct QuinoaPolicy *policy);

/**
 * Action dimension of the policy, or 0 for a null handle.
 *
 * # Safety
 * `policy` must be null or a live handle.
 */
size_t quinoa_policy_action_dim(const struct QuinoaPolicy *policy);

/**
 * Draws one action in `(−1, 1)^D` and optionally its log-density.
 *
 * # Safety
 * `policy` must be a live handle, `state` must hold `state_len` values,
 * `action` must have room for `action_len` values and `log_prob` must be
 * null or writable.
 */
enum QuinoaStatus quinoa_policy_sample(struct QuinoaPolicy *policy,
                                       const double *state,
                                       size_t state_len,
                                       double *action,
                                       size_t action_len,
                                       double *log_prob);

/**
 * `log π(a|s)` for one state–action pair.
 *
 * # Safety
 * `policy` must be a live handle, the arrays must hold the given number of
 * values and `out` must be writable.
 */
enum QuinoaStatus quinoa_policy_log_prob(const struct QuinoaPolicy *policy,
                                         const double *state,
                                         size_t state_len,
                                         const double *action,
                                         size_t action_len,
                                         double *out);

/**
 * Creates an environment by name (`bandit`, `pendulum`, `pointmass`).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QuinoaStatus quinoa_env_new(const char *name, uint64_t seed, struct QuinoaEnv **out);

/**
 * # Safety
 * `env` must be null or a handle from [`quinoa_env_new`] not yet freed.
 */
void quinoa_env_free(struct QuinoaEnv *env);

/**
 * # Safety
 * `env` must be null or a live handle.
 */
size_t quinoa_env_state_dim(const struct QuinoaEnv *env);

/**
 * # Safety
 * `env` must be null or a live handle.
 */
size_t quinoa_env_action_dim(const struct QuinoaEnv *env);

/**
 * Starts an episode and writes the first observation.
 *
 * # Safety
 * `env` must be a live handle and `obs` must have room for `obs_len` values.
 */
enum QuinoaStatus quinoa_env_reset(struct QuinoaEnv *env, double *obs, size_t obs_len);

/**
 * Applies a policy-space action and writes the next observation, reward and
 * termination flag (1 for a genuine terminal state, 0 otherwise).
 *
 * # Safety
 * `env` must be a live handle, the arrays must hold the given number of
 * values and `reward` and `terminal` must be writable.
 */
enum QuinoaStatus quinoa_env_step(struct QuinoaEnv *env,
                                  const double *action,
                                  size_t action_len,
                                  double *obs,
                                  size_t obs_len,
                                  double *reward,
                                  int32_t *terminal);

/**
 * Solves the batch temperature for values `v` and log-ratios `kl` with KL
 * budget `epsilon` and default solver settings. `converged` receives 1 for
 * an interior root, 0 when a boundary was returned.
 *
 * # Safety
 * `v` and `kl` must hold `n` values; `alpha` and `converged` must be writable.
 */
enum QuinoaStatus quinoa_solve_alpha(const double *v,
                                     const double *kl,
                                     size_t n,
                                     double epsilon,
                                     double *alpha,
                                     int32_t *converged);

/**
 * Runs a full training job from flat `key = value` text, writing the usual
 * outputs to its `output_dir`.
 *
 * # Safety
 * `config_text` must be a NUL-terminated string.
 */
enum QuinoaStatus quinoa_train(const char *config_text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUINOA_H */
