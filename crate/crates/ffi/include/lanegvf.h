#ifndef LANEGVF_H
#define LANEGVF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LgStatus {
  LG_STATUS_OK = 0,
  LG_STATUS_NULL_POINTER = 1,
  LG_STATUS_INVALID_ARGUMENT = 2,
  LG_STATUS_NOT_FOUND = 3,
  LG_STATUS_IO = 4,
  /**
   * A numerical or state invariant failed.
   */
  LG_STATUS_INVARIANT = 5,
  LG_STATUS_PANIC = 6,
} LgStatus;

typedef struct LgEnv LgEnv;

typedef struct LgPolicy LgPolicy;

typedef struct LgSumTree LgSumTree;

typedef struct LgTrack LgTrack;

typedef struct LgLaneState {
  size_t index;
  double alpha;
  double beta;
  bool out_of_lane;
} LgLaneState;

typedef struct LgStep {
  double reward;
  double alpha;
  double beta;
  double speed;
  bool terminated;
  bool out_of_lane;
} LgStep;

typedef struct LgMetrics {
  size_t steps;
  double reward_per_sec;
  double avg_speed;
  double avg_abs_alpha;
  double avg_abs_beta;
  double near_out_of_lane_frac;
  double jerk1_steer;
  double jerk1_speed;
  double jerk2_steer;
  double jerk2_speed;
  bool out_of_lane;
} LgMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. Valid until the
 * next failing call on the same thread.
 */
const char *lg_last_error_message(void);

/**
 * Builds a catalog layout. With `damaged`, markings are damaged using `damage_seed`.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum LgStatus lg_track_new(const char *name,
                           bool damaged,
                           uint64_t damage_seed,
                           struct LgTrack **out);

/**
 * Same layout driven in the opposite direction.
 *
 * # Safety
 * `track` must come from `lg_track_new`; `out` must be writable.
 */
enum LgStatus lg_track_reversed(const struct LgTrack *track, struct LgTrack **out);

/**
 * # Safety
 * `track` must come from `lg_track_new` or be null.
 */
void lg_track_free(struct LgTrack *track);

/**
 * # Safety
 * Pointers must be valid.
 */
enum LgStatus lg_track_info(const struct LgTrack *track,
                            size_t *waypoints,
                            double *length,
                            double *half_width);

/**
 * Lane centeredness and road angle of a pose, using a global nearest-waypoint search.
 *
 * # Safety
 * Pointers must be valid.
 */
enum LgStatus lg_track_lane_state(const struct LgTrack *track,
                                  double x,
                                  double y,
                                  double yaw,
                                  struct LgLaneState *out);

/**
 * Simulator on `track` with default settings and `max_steps` per episode.
 *
 * # Safety
 * Pointers must be valid.
 */
enum LgStatus lg_env_new(const struct LgTrack *track, size_t max_steps, struct LgEnv **out);

/**
 * # Safety
 * `env` must come from `lg_env_new` or be null.
 */
void lg_env_free(struct LgEnv *env);

/**
 * # Safety
 * `env` must be valid.
 */
enum LgStatus lg_env_reset(struct LgEnv *env, size_t start, double lateral_offset);

/**
 * # Safety
 * Pointers must be valid.
 */
enum LgStatus lg_env_step(struct LgEnv *env, double steer, double target_speed, struct LgStep *out);

/**
 * Copies both observation frames, scaled to `[0, 1]`, into `buf`. `written`
 * receives the required length even when `len` is too small.
 *
 * # Safety
 * `buf` must hold `len` doubles; other pointers must be valid.
 */
enum LgStatus lg_env_observation(const struct LgEnv *env, double *buf, size_t len, size_t *written);

/**
 * # Safety
 * `out` must be writable.
 */
enum LgStatus lg_sumtree_new(size_t capacity, struct LgSumTree **out);

/**
 * # Safety
 * `tree` must come from `lg_sumtree_new` or be null.
 */
void lg_sumtree_free(struct LgSumTree *tree);

/**
 * # Safety
 * `tree` must be valid.
 */
enum LgStatus lg_sumtree_set(struct LgSumTree *tree, size_t index, double priority);

/**
 * # Safety
 * Pointers must be valid.
 */
enum LgStatus lg_sumtree_total(const struct LgSumTree *tree, double *out);

/**
 * Leaf whose cumulative priority interval contains `u`, for `u` in `[0, total)`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum LgStatus lg_sumtree_find(struct LgSumTree *tree, double u, size_t *out);

/**
 * Metrics of one logged episode of `n >= 3` steps.
 *
 * # Safety
 * Each array must hold `n` doubles; `out` must be writable.
 */
enum LgStatus lg_episode_metrics(double dt,
                                 size_t n,
                                 const double *rewards,
                                 const double *speeds,
                                 const double *alphas,
                                 const double *betas,
                                 const double *steers,
                                 const double *target_speeds,
                                 bool out_of_lane,
                                 struct LgMetrics *out);

/**
 * Track-priority probabilities. A negative length marks a track never sampled;
 * a NaN `kappa` selects the mean of the known lengths.
 *
 * # Safety
 * `lengths` and `out` must hold `n` doubles.
 */
enum LgStatus lg_track_sampling_probs(const double *lengths, size_t n, double kappa, double *out);

/**
 * Loads a GVF-BCQ policy from its predictor and BCQ checkpoints.
 *
 * # Safety
 * Paths must be NUL-terminated; `out` must be writable.
 */
enum LgStatus lg_policy_load(const char *gvf_path, const char *bcq_path, struct LgPolicy **out);

/**
 * # Safety
 * `policy` must come from `lg_policy_load` or be null.
 */
void lg_policy_free(struct LgPolicy *policy);

/**
 * Greedy action for the environment's current observation.
 *
 * # Safety
 * Pointers must be valid.
 */
enum LgStatus lg_policy_act(struct LgPolicy *policy,
                            const struct LgEnv *env,
                            double *steer,
                            double *target_speed);

/**
 * Greedy rollout of `seconds` on `track` with speed clipped at `max_speed`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum LgStatus lg_policy_evaluate(struct LgPolicy *policy,
                                 const struct LgTrack *track,
                                 double seconds,
                                 double max_speed,
                                 struct LgMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LANEGVF_H */
