/* C interface for milr-ffi: self-healing CNN inference.
 *
 * Networks and recovery states are opaque handles created and destroyed by
 * this library. All fallible functions return a MILR_STATUS_* code; on
 * failure, milr_last_error_message() returns a thread-local description
 * valid until the next failing call on the same thread.
 */

#ifndef MILR_H
#define MILR_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
    MILR_STATUS_OK = 0,
    MILR_STATUS_NULL_ARGUMENT = 1,
    MILR_STATUS_INVALID_UTF8 = 2,
    MILR_STATUS_SHAPE = 3,
    MILR_STATUS_DTYPE = 4,
    MILR_STATUS_CONSTRUCTION = 5,
    MILR_STATUS_SINGULAR = 6,
    MILR_STATUS_NO_RECOVERY = 7,
    MILR_STATUS_PLAN_CORRUPTED = 8,
    MILR_STATUS_FORMAT = 9,
    MILR_STATUS_DOMAIN = 10,
    MILR_STATUS_IO = 11
};

typedef struct MilrNetwork MilrNetwork;
typedef struct MilrRecoveryState MilrRecoveryState;

/* Most recent error message on this thread. Never NULL. */
const char *milr_last_error_message(void);

/* -- Network lifecycle -------------------------------------------------- */

/* Builds a built-in architecture ("mnist", "cifar-small", "cifar-large")
 * with seeded random weights. use_f64 selects 64-bit parameters. */
int32_t milr_network_builtin(const char *name, int32_t use_f64, uint64_t seed,
                             MilrNetwork **out);

int32_t milr_network_load(const char *path, MilrNetwork **out);
int32_t milr_network_save(const MilrNetwork *net, const char *path);
void milr_network_free(MilrNetwork *net);

size_t milr_network_param_count(const MilrNetwork *net);
size_t milr_network_input_len(const MilrNetwork *net);

/* Classifies one input (input_len doubles, row-major) and writes the argmax
 * class index. */
int32_t milr_network_predict(const MilrNetwork *net, const double *input,
                             size_t input_len, size_t *class_out);

/* -- Recovery state ------------------------------------------------------ */

/* Builds checkpoints, detection records, and recovery plans. Passing 0 for a
 * seed or for batch selects the library default. */
int32_t milr_state_init(const MilrNetwork *net, uint64_t detect_seed,
                        uint64_t recovery_seed, uint32_t batch,
                        MilrRecoveryState **out);

int32_t milr_state_load(const char *path, MilrRecoveryState **out);
int32_t milr_state_save(const MilrRecoveryState *state, const char *path);
void milr_state_free(MilrRecoveryState *state);

/* Sidecar storage footprint in bytes. */
uint64_t milr_state_cost_bytes(const MilrRecoveryState *state);

/* -- Detection and recovery ---------------------------------------------- */

/* Writes the number of corrupted layers (0 = clean). */
int32_t milr_detect(const MilrNetwork *net, const MilrRecoveryState *state,
                    size_t *corrupted_out);

/* Detects and heals in place; updates the state's records for healed
 * layers. recovered_out counts fully recovered layers, failed_out counts
 * degraded or unrecoverable ones. */
int32_t milr_recover(MilrNetwork *net, MilrRecoveryState *state,
                     size_t *recovered_out, size_t *failed_out);

/* -- Fault injection ------------------------------------------------------ */

/* Flips each stored parameter bit independently with probability rate;
 * flips_out (may be NULL) receives the flip count. */
int32_t milr_inject_bitflips(MilrNetwork *net, double rate, uint64_t seed,
                             uint64_t *flips_out);

/* -- SECDED(39,32) codec --------------------------------------------------- */

uint64_t milr_secded_encode(uint32_t data);

/* Returns 0 (clean), 1 (single error corrected), or 2 (double error
 * detected; data unreliable). data_out may be NULL. */
int32_t milr_secded_decode(uint64_t code, uint32_t *data_out);

#ifdef __cplusplus
}
#endif

#endif /* MILR_H */
