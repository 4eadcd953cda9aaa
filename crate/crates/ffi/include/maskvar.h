#ifndef MASKVAR_H
#define MASKVAR_H

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum MvStatus {
  MV_STATUS_OK = 0,
  MV_STATUS_NULL_POINTER = 1,
  MV_STATUS_INVALID_ARGUMENT = 2,
  MV_STATUS_IO = 3,
  MV_STATUS_FORMAT = 4,
  MV_STATUS_NUMERIC = 5,
  // An oracle suite ran and at least one check failed.
  MV_STATUS_CHECK_FAILED = 6,
  MV_STATUS_PANIC = 7,
} MvStatus;

// A model plus the training config it was built or saved with.
typedef struct MvModel MvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until
// the next failing call on the same thread.
const char *mv_last_error_message(void);

// Fresh toy-sized model with seeded initialisation.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum MvStatus mv_model_new_toy(uint64_t vocab_size, uint64_t seed, struct MvModel **out);

// Loads the model and training config from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` as for `mv_model_new_toy`.
enum MvStatus mv_model_load(const char *path, struct MvModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `m` must come from this library and not be used afterwards.
void mv_model_free(struct MvModel *m);

// Vocabulary size of the model, 0 for null.
//
// # Safety
// `m` must be null or a live handle.
uint64_t mv_model_vocab_size(const struct MvModel *m);

// Longest sentence the model accepts, 0 for null.
//
// # Safety
// `m` must be null or a live handle.
uint64_t mv_model_max_seq_len(const struct MvModel *m);

// Proposal distribution over the `n` positions of `tokens`, written to
// `out_probs[0..n]`.
//
// # Safety
// `tokens` and `out_probs` must each hold `n` elements.
enum MvStatus mv_propose(const struct MvModel *m,
                         const uint32_t *tokens,
                         size_t n,
                         double *out_probs);

// Encoder loss of each position when it alone is replaced by `[MASK]`,
// written to `out_losses[0..n]`.
//
// # Safety
// `tokens` and `out_losses` must each hold `n` elements.
enum MvStatus mv_position_losses(const struct MvModel *m,
                                 const uint32_t *tokens,
                                 size_t n,
                                 double *out_losses);

// Learning rate the model's schedule applies at `step`.
//
// # Safety
// `out` must be writable.
enum MvStatus mv_model_lr_at(const struct MvModel *m, uint64_t step, double *out);

// Draws `k` distinct positions from `probs[0..n]` without replacement,
// writing the positions and their draw-time probabilities.
//
// # Safety
// `probs` must hold `n` elements; both outputs must hold `k`.
enum MvStatus mv_sample_positions(const double *probs,
                                  size_t n,
                                  size_t k,
                                  uint64_t seed,
                                  size_t *out_positions,
                                  double *out_raw_probs);

// Importance weight of a draw against uniform masking and its clipped
// value in `[1 - eps, 1 + eps]`.
//
// # Safety
// `raw_probs` must hold `k` elements; both outputs must be writable.
enum MvStatus mv_importance_ratio(const double *raw_probs,
                                  size_t k,
                                  size_t n,
                                  double eps,
                                  double *out_ratio,
                                  double *out_clipped);

// Uniform-branch probability at `step` of a linear schedule from
// `start_p` to `end_p` over `end_step` steps. NaN for invalid input.
double mv_explore_p(double start_p, double end_p, uint64_t end_step, uint64_t step);

// Runs an oracle suite (`decomposition`, `unbiasedness`, `optimality`,
// `correlation`) and returns its JSON report in `out_json`, to be released
// with `mv_string_free`. Returns `CheckFailed` with the report set when a
// check fails.
//
// # Safety
// `suite` must be a NUL-terminated string; `out_json` must be writable.
enum MvStatus mv_oracle_run(const char *suite, uint64_t seed, char **out_json);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void mv_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKVAR_H */
