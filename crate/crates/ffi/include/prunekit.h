#ifndef PRUNEKIT_H
#define PRUNEKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PkStatus {
  PK_STATUS_OK = 0,
  PK_STATUS_NULL_POINTER = 1,
  PK_STATUS_INVALID_ARGUMENT = 2,
  PK_STATUS_SHAPE = 3,
  PK_STATUS_IO = 4,
  PK_STATUS_CHECKPOINT = 5,
  PK_STATUS_CONFIG = 6,
  PK_STATUS_POLICY = 7,
  PK_STATUS_UNSUPPORTED_TOPOLOGY = 8,
  PK_STATUS_INTERNAL = 9,
} PkStatus;

typedef enum PkAttentionFunction {
  PK_ATTENTION_FUNCTION_MEAN = 0,
  PK_ATTENTION_FUNCTION_MAX = 1,
  PK_ATTENTION_FUNCTION_SUM = 2,
} PkAttentionFunction;

typedef enum PkPolicyKind {
  PK_POLICY_KIND_ACCURACY_GUARANTEED = 0,
  PK_POLICY_KIND_MEMORY_CONSTRAINED = 1,
  PK_POLICY_KIND_FLOPS_CONSTRAINED = 2,
} PkPolicyKind;

typedef enum PkAction {
  PK_ACTION_CONTINUE = 0,
  PK_ACTION_ROLLBACK = 1,
  PK_ACTION_TERMINATE = 2,
} PkAction;

typedef enum PkTermination {
  PK_TERMINATION_NONE = 0,
  PK_TERMINATION_CONVERGED = 1,
  PK_TERMINATION_FAILED = 2,
  PK_TERMINATION_BUDGET_EXHAUSTED = 3,
} PkTermination;

/**
 * Opaque controller handle.
 */
typedef struct PkController PkController;

/**
 * Opaque model handle.
 */
typedef struct PkModel PkModel;

typedef struct PkAccounting {
  uint64_t total_params;
  uint64_t total_flops;
  uint64_t conv_params;
  uint64_t conv_flops;
  uint64_t linear_params;
  uint64_t linear_flops;
} PkAccounting;

typedef struct PkControllerConfig {
  double initial_t;
  double initial_lambda;
  uint32_t convergence_window;
  double convergence_tol;
  uint32_t max_rollbacks;
  uint32_t exponent_base;
  uint32_t max_rounds;
} PkControllerConfig;

/**
 * Metrics of one pruning round. A NaN `acc_loss` or a negative value in
 * any other field means "not measured".
 */
typedef struct PkObservation {
  double acc_loss;
  double param_reduction;
  double flops_reduction;
  int64_t current_params;
  int64_t current_flops;
} PkObservation;

typedef struct PkDecision {
  enum PkAction action;
  uint32_t rollback_round;
  enum PkTermination termination;
  bool acceptable;
  double next_t;
  double next_lambda;
} PkDecision;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t pk_last_error_message(char *buf, size_t len);

/**
 * Builds a freshly initialized model: `arch` is `toy4`, `toy2` or `vgg_tiny`.
 *
 * # Safety
 * `arch` must be a NUL-terminated string; `out` must be valid for a write.
 */
enum PkStatus pk_model_new(const char *arch,
                           size_t channels,
                           size_t height,
                           size_t width,
                           size_t classes,
                           uint64_t seed,
                           struct PkModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
enum PkStatus pk_model_load(const char *path, struct PkModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum PkStatus pk_model_save(const struct PkModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void pk_model_free(struct PkModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` valid for a write.
 */
enum PkStatus pk_model_accounting(const struct PkModel *model, struct PkAccounting *out);

/**
 * Floats per input sample (`C·H·W`) and per output row (classes).
 *
 * # Safety
 * `model` must be a live handle; both outputs valid for writes.
 */
enum PkStatus pk_model_io_len(const struct PkModel *model, size_t *input_len, size_t *output_len);

/**
 * Masked forward pass on `batch` samples laid out NCHW; writes `batch·classes` logits.
 *
 * # Safety
 * `input` must hold `input_len` floats and `output` `output_len` floats.
 */
enum PkStatus pk_model_forward(const struct PkModel *model,
                               const float *input,
                               size_t input_len,
                               size_t batch,
                               float *output,
                               size_t output_len);

/**
 * # Safety
 * `model` must be a live handle; `out` valid for a write.
 */
enum PkStatus pk_model_num_conv(const struct PkModel *model, size_t *out);

/**
 * Total and live filter counts of conv layer `conv` (0-based among conv layers).
 *
 * # Safety
 * `model` must be a live handle; outputs valid for writes.
 */
enum PkStatus pk_model_filters(const struct PkModel *model,
                               size_t conv,
                               size_t *total,
                               size_t *live);

/**
 * # Safety
 * `model` must be a live handle; `out` valid for a write.
 */
enum PkStatus pk_model_is_live(const struct PkModel *model, size_t conv, size_t filter, bool *out);

/**
 * Prunes one filter. Refuses to prune the last live filter of a layer.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum PkStatus pk_model_prune_filter(struct PkModel *model, size_t conv, size_t filter);

/**
 * Physically removes pruned filters into a new model handle.
 *
 * # Safety
 * `model` must be a live handle; `out` valid for a write.
 */
enum PkStatus pk_model_export_compact(const struct PkModel *model, struct PkModel **out);

/**
 * Attention score of one feature map.
 *
 * # Safety
 * `map` must hold `len` floats; `out` valid for a write.
 */
enum PkStatus pk_attention_of_map(const float *map,
                                  size_t len,
                                  enum PkAttentionFunction function,
                                  double p,
                                  double *out);

struct PkControllerConfig pk_controller_default_config(void);

/**
 * `config` may be null for the defaults. `baseline_size` is the unpruned
 * parameter or FLOP count, matching the policy's size measure.
 *
 * # Safety
 * `config` must be null or valid for a read; `out` valid for a write.
 */
enum PkStatus pk_controller_new(enum PkPolicyKind kind,
                                double target,
                                const struct PkControllerConfig *config,
                                uint64_t baseline_size,
                                struct PkController **out);

/**
 * # Safety
 * `ctrl` must be null or a handle not yet freed.
 */
void pk_controller_free(struct PkController *ctrl);

/**
 * Threshold and step size for the next pruning round.
 *
 * # Safety
 * `ctrl` must be a live handle; outputs valid for writes.
 */
enum PkStatus pk_controller_state(const struct PkController *ctrl,
                                  double *t,
                                  double *lambda,
                                  uint32_t *round);

/**
 * Feeds one round's measurements and returns the controller's decision.
 *
 * # Safety
 * `ctrl` must be a live handle; `obs` valid for a read; `out` for a write.
 */
enum PkStatus pk_controller_observe(struct PkController *ctrl,
                                    const struct PkObservation *obs,
                                    struct PkDecision *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRUNEKIT_H */
