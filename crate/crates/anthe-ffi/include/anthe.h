/* C interface for Anthe model analysis. Generated; do not edit. */

#ifndef ANTHE_H
#define ANTHE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum AntheStatus {
  ANTHE_OK = 0,
  /**
   * A required pointer argument was null.
   */
  ANTHE_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  ANTHE_INVALID_UTF8 = 2,
  /**
   * The configuration or an argument violates an invariant.
   */
  ANTHE_INVALID_ARGUMENT = 3,
  /**
   * Anything else (see `anthe_last_error`).
   */
  ANTHE_ERROR = 4,
} AntheStatus;

/**
 * Opaque configuration handle.
 */
typedef struct AntheConfig AntheConfig;

/**
 * Exact learnable-parameter counts per component.
 */
typedef struct AntheCensus {
  uint64_t encoder_embedding;
  uint64_t decoder_embedding;
  uint64_t patt;
  uint64_t attention_output;
  uint64_t ff;
  uint64_t layer_norms;
  uint64_t output_projection;
  uint64_t total;
} AntheCensus;

/**
 * A planned tensor-chain shape for a dense layer of `n_in x n_out`.
 */
typedef struct AntheTcPlan {
  /**
   * Chain length.
   */
  uint64_t n;
  /**
   * Shared bond dimension.
   */
  uint64_t bond;
  /**
   * Total parameters across the factors.
   */
  uint64_t param_count;
  /**
   * Requested compression ratio.
   */
  double r_target;
  /**
   * Achieved ratio (factor parameters over dense parameters).
   */
  double r_actual;
} AntheTcPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Never null; empty
 * before any failure. The pointer is invalidated by the next failure on
 * the same thread.
 */
const char *anthe_last_error(void);

/**
 * Creates the default configuration. Never fails; free with
 * `anthe_config_free`.
 */
struct AntheConfig *anthe_config_default(void);

/**
 * Creates a named preset configuration and stores it in `out`.
 */
enum AntheStatus anthe_config_preset(const char *name, struct AntheConfig **out);

/**
 * Sets one configuration key (same keys as the CLI's `--set`).
 */
enum AntheStatus anthe_config_set(struct AntheConfig *cfg, const char *key, const char *value);

/**
 * Releases a configuration handle. Null is a no-op.
 */
void anthe_config_free(struct AntheConfig *cfg);

/**
 * Validates `cfg` and writes its parameter census to `out`.
 */
enum AntheStatus anthe_census(const struct AntheConfig *cfg, struct AntheCensus *out);

/**
 * Plans factor shapes for compressing an `n_in x n_out` dense layer to a
 * fraction `r` of its parameters with a chain of length `n`.
 */
enum AntheStatus anthe_plan_factors(uint64_t n_in,
                                    uint64_t n_out,
                                    uint64_t n,
                                    double r,
                                    struct AntheTcPlan *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANTHE_H */
