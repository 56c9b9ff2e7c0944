#ifndef ECOPOOL_H
#define ECOPOOL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum EcoStatus {
  ECO_STATUS_OK = 0,
  ECO_STATUS_NULL_POINTER = 1,
  ECO_STATUS_INVALID_ARGUMENT = 2,
  ECO_STATUS_EPISODE_DONE = 3,
  ECO_STATUS_IO = 4,
  ECO_STATUS_FORMAT = 5,
  ECO_STATUS_RUNTIME = 6,
  ECO_STATUS_PANIC = 7,
} EcoStatus;

typedef struct EcoEnv EcoEnv;

typedef struct EcoLevel EcoLevel;

typedef struct EcoPolicy EcoPolicy;

typedef struct EcoPool EcoPool;

// What happened when a pool was shown one level.
typedef struct EcoOutcome {
  uint64_t level_seed;
  // Id of the agent credited with the level, or -1.
  int64_t solved_by;
  bool created_new;
  bool failed;
  uint64_t training_steps;
  uint64_t tests_run;
  uint64_t agents_removed;
} EcoOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *eco_version(void);

// Length of an observation buffer: 7 x 7 cells x 3 channels, row-major,
// agent at row 6, column 3, facing up.
size_t eco_observation_len(void);

// Copy of the last error message on this thread, or NULL if the last call
// succeeded. Release with `eco_string_free`.
char *eco_last_error(void);

// # Safety
// `s` must come from this library and not have been freed yet.
void eco_string_free(char *s);

// Generates the level for `seed`. Zero for `width`, `height` or
// `max_steps` selects the default (9, 9, 100).
//
// # Safety
// `out` must be valid for writes.
enum EcoStatus eco_level_generate(uint64_t seed,
                                  uint32_t width,
                                  uint32_t height,
                                  uint32_t max_steps,
                                  struct EcoLevel **out);

// # Safety
// `json` must be a NUL-terminated string; `out` must be valid for writes.
enum EcoStatus eco_level_from_json(const char *json, struct EcoLevel **out);

// Canonical JSON of the level. Release with `eco_string_free`.
//
// # Safety
// `level` must be a live handle; `out` must be valid for writes.
enum EcoStatus eco_level_to_json(const struct EcoLevel *level, char **out);

// ASCII rendering of the level at its start state.
//
// # Safety
// `level` must be a live handle; `out` must be valid for writes.
enum EcoStatus eco_level_render(const struct EcoLevel *level, char **out);

// # Safety
// `level` must be a live handle or NULL.
uint64_t eco_level_seed(const struct EcoLevel *level);

// # Safety
// `level` must be NULL or a handle not yet freed.
void eco_level_free(struct EcoLevel *level);

// Environment over a copy of `level`, already reset. The first
// observation is written to `obs` if it is not NULL.
//
// # Safety
// `level` must be a live handle; `out` must be valid for writes; `obs`
// must be NULL or have room for `eco_observation_len()` bytes.
enum EcoStatus eco_env_new(const struct EcoLevel *level, uint8_t *obs, struct EcoEnv **out);

// # Safety
// As for `eco_env_new`.
enum EcoStatus eco_env_reset(struct EcoEnv *env, uint8_t *obs);

// Applies `action` (0 turn left, 1 turn right, 2 forward).
//
// # Safety
// `env` must be a live handle; `obs` must be NULL or have room for
// `eco_observation_len()` bytes; `reward` and `done` must be NULL or valid
// for writes.
enum EcoStatus eco_env_step(struct EcoEnv *env,
                            uint32_t action,
                            uint8_t *obs,
                            double *reward,
                            bool *done);

// # Safety
// `env` must be NULL or a handle not yet freed.
void eco_env_free(struct EcoEnv *env);

// Freshly initialized policy.
//
// # Safety
// `out` must be valid for writes.
enum EcoStatus eco_policy_new(uint64_t seed, struct EcoPolicy **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
enum EcoStatus eco_policy_load(const char *path, struct EcoPolicy **out);

// # Safety
// `policy` must be a live handle; `path` a NUL-terminated string.
enum EcoStatus eco_policy_save(const struct EcoPolicy *policy, const char *path);

// Action probabilities and value estimate for one observation. Writes
// three probabilities to `probs` and the greedy action to `action`; either
// output may be NULL.
//
// # Safety
// `obs` must point to `eco_observation_len()` bytes; `probs` must be NULL or
// have room for 3 doubles; `action` and `value` NULL or valid for writes.
enum EcoStatus eco_policy_act(const struct EcoPolicy *policy,
                              const uint8_t *obs,
                              double *probs,
                              uint32_t *action,
                              double *value);

// Total reward of one greedy episode of `policy` on `level`.
//
// # Safety
// Handles must be live; `reward` must be valid for writes.
enum EcoStatus eco_policy_test(const struct EcoPolicy *policy,
                               const struct EcoLevel *level,
                               double *reward);

// # Safety
// `policy` must be NULL or a handle not yet freed.
void eco_policy_free(struct EcoPolicy *policy);

// Empty pool. `strategy`: 0 basic, 1 random, 2 best, 3 forked. `budget` is
// the learn-epoch cap per new agent; 0 selects the default.
//
// # Safety
// `out` must be valid for writes.
enum EcoStatus eco_pool_new(uint32_t strategy,
                            uint64_t seed,
                            uint32_t budget,
                            struct EcoPool **out);

// Shows `level` to the pool: credits an existing solver or trains a new
// agent. The level must use the pool's level dimensions (9 x 9, 100 steps).
//
// # Safety
// Handles must be live; `outcome` must be NULL or valid for writes.
enum EcoStatus eco_pool_learn(struct EcoPool *pool,
                              const struct EcoLevel *level,
                              struct EcoOutcome *outcome);

// # Safety
// `pool` must be a live handle or NULL.
size_t eco_pool_len(const struct EcoPool *pool);

// Adaptability index: mean over `levels` of the best pool reward on each.
// The pool is not modified.
//
// # Safety
// `levels` must point to `n_levels` live handles; `zeta` must be valid for
// writes.
enum EcoStatus eco_pool_zeta(const struct EcoPool *pool,
                             const struct EcoLevel *const *levels,
                             size_t n_levels,
                             double *zeta);

// Writes a checkpoint directory readable by `ecopool inspect-pool`.
//
// # Safety
// `pool` must be a live handle; `dir` a NUL-terminated string.
enum EcoStatus eco_pool_save(const struct EcoPool *pool, const char *dir);

// # Safety
// `pool` must be NULL or a handle not yet freed.
void eco_pool_free(struct EcoPool *pool);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECOPOOL_H */
