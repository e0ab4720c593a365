#ifndef DQULEARN_H
#define DQULEARN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum DqlAssign {
  DQL_ASSIGN_ASSIGNED = 0,
  DQL_ASSIGN_QUEUED = 1,
  /**
   * A result is already stored for this id.
   */
  DQL_ASSIGN_CACHED = 2,
  /**
   * The id is queued or executing.
   */
  DQL_ASSIGN_DUPLICATE_IN_FLIGHT = 3,
} DqlAssign;

typedef enum DqlGateKind {
  DQL_GATE_KIND_H = 0,
  DQL_GATE_KIND_RX = 1,
  DQL_GATE_KIND_RY = 2,
  DQL_GATE_KIND_RZ = 3,
  DQL_GATE_KIND_RYY = 4,
  DQL_GATE_KIND_RZZ = 5,
  DQL_GATE_KIND_CRY = 6,
  DQL_GATE_KIND_CRZ = 7,
  DQL_GATE_KIND_CSWAP = 8,
} DqlGateKind;

typedef enum DqlStatus {
  DQL_STATUS_OK = 0,
  DQL_STATUS_NULL_POINTER = 1,
  DQL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Input bytes are not a valid encoding.
   */
  DQL_STATUS_MALFORMED = 3,
  /**
   * Request exceeds a qubit limit.
   */
  DQL_STATUS_CAPACITY = 4,
  /**
   * Output buffer too small; the required size was written.
   */
  DQL_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * Worker id already registered.
   */
  DQL_STATUS_CONFLICT = 6,
  /**
   * Unknown worker or circuit.
   */
  DQL_STATUS_NOT_FOUND = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  DQL_STATUS_INTERNAL = 8,
} DqlStatus;

typedef struct DqlCircuit DqlCircuit;

typedef struct DqlCoManager DqlCoManager;

typedef struct DqlStateVector DqlStateVector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dql_version(void);

/**
 * Copies the calling thread's last error message (NUL-terminated) into
 * `buf`. Returns the buffer size the full message needs, including the
 * NUL; the copy is truncated when `cap` is smaller.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
uintptr_t dql_last_error(char *buf, uintptr_t cap);

/**
 * Allocates `|0…0⟩` on `n_qubits` qubits.
 *
 * # Safety
 * `out` must be valid for writing one pointer.
 */
enum DqlStatus dql_state_new(uintptr_t n_qubits, struct DqlStateVector **out);

/**
 * Builds a state from `n_amplitudes` interleaved `(re, im)` pairs. The
 * count must be a power of two and the vector normalized.
 *
 * # Safety
 * `re_im` must hold `2 * n_amplitudes` doubles; `out` must be writable.
 */
enum DqlStatus dql_state_from_amplitudes(const double *re_im,
                                         uintptr_t n_amplitudes,
                                         struct DqlStateVector **out);

/**
 * # Safety
 * `state` must be null or a handle from this library, not yet freed.
 */
void dql_state_free(struct DqlStateVector *state);

/**
 * # Safety
 * `state` must be a live handle or null.
 */
uintptr_t dql_state_n_qubits(const struct DqlStateVector *state);

/**
 * Applies one gate. `angle` is ignored for H and CSWAP.
 *
 * # Safety
 * `state` must be a live handle; `targets` must hold `n_targets` values.
 */
enum DqlStatus dql_state_apply(struct DqlStateVector *state,
                               enum DqlGateKind kind,
                               const uintptr_t *targets,
                               uintptr_t n_targets,
                               double angle);

/**
 * # Safety
 * `state` must be a live handle; `out` must be writable.
 */
enum DqlStatus dql_state_prob_zero(const struct DqlStateVector *state,
                                   uintptr_t qubit,
                                   double *out);

/**
 * Writes the amplitudes as interleaved `(re, im)` pairs. `cap` counts
 * doubles; `needed` (optional) receives `2 * 2^n`.
 *
 * # Safety
 * `state` must be a live handle; `buf` must be valid for `cap` doubles.
 */
enum DqlStatus dql_state_amplitudes(const struct DqlStateVector *state,
                                    double *buf,
                                    uintptr_t cap,
                                    uintptr_t *needed);

/**
 * Exact SWAP-test probability `½ + ½|⟨ψ|φ⟩|²`.
 *
 * # Safety
 * `psi` and `phi` must be live handles; `out` must be writable.
 */
enum DqlStatus dql_swap_test(const struct DqlStateVector *psi,
                             const struct DqlStateVector *phi,
                             double *out);

/**
 * Assembles the SWAP-test classifier circuit for `qubit_count` qubits and
 * `n_layers` variational layers from encoding angles and layer parameters.
 *
 * # Safety
 * `circuit_id` must be a NUL-terminated string; `angles` and `params` must
 * hold the given counts; `out` must be writable.
 */
enum DqlStatus dql_circuit_build(const char *circuit_id,
                                 uintptr_t qubit_count,
                                 uintptr_t n_layers,
                                 const double *angles,
                                 uintptr_t n_angles,
                                 const double *params,
                                 uintptr_t n_params,
                                 struct DqlCircuit **out);

/**
 * Decodes the circuit wire format.
 *
 * # Safety
 * `bytes` must hold `len` bytes; `out` must be writable.
 */
enum DqlStatus dql_circuit_deserialize(const uint8_t *bytes,
                                       uintptr_t len,
                                       struct DqlCircuit **out);

/**
 * Writes the canonical encoding. `needed` (optional) receives its length.
 *
 * # Safety
 * `circuit` must be a live handle; `buf` must be valid for `cap` bytes.
 */
enum DqlStatus dql_circuit_serialize(const struct DqlCircuit *circuit,
                                     uint8_t *buf,
                                     uintptr_t cap,
                                     uintptr_t *needed);

/**
 * Copies the circuit id (NUL-terminated) into `buf`.
 *
 * # Safety
 * `circuit` must be a live handle; `buf` must be valid for `cap` bytes.
 */
enum DqlStatus dql_circuit_id(const struct DqlCircuit *circuit,
                              char *buf,
                              uintptr_t cap,
                              uintptr_t *needed);

/**
 * # Safety
 * `circuit` must be a live handle or null.
 */
uintptr_t dql_circuit_qubit_demand(const struct DqlCircuit *circuit);

/**
 * Runs the circuit and writes `P(ancilla = 0)`.
 *
 * # Safety
 * `circuit` must be a live handle; `out` must be writable.
 */
enum DqlStatus dql_circuit_execute(const struct DqlCircuit *circuit, double *out);

/**
 * # Safety
 * `circuit` must be null or a handle from this library, not yet freed.
 */
void dql_circuit_free(struct DqlCircuit *circuit);

/**
 * Empty co-manager. `allow_exact_fit` relaxes placement from `AR > D` to
 * `AR >= D`.
 *
 * # Safety
 * `out` must be writable.
 */
enum DqlStatus dql_comanager_new(uint64_t heartbeat_period_ms,
                                 bool allow_exact_fit,
                                 struct DqlCoManager **out);

/**
 * # Safety
 * `manager` must be null or a handle from this library, not yet freed.
 */
void dql_comanager_free(struct DqlCoManager *manager);

/**
 * # Safety
 * `manager` must be a live handle; `worker_id` a NUL-terminated string.
 */
enum DqlStatus dql_comanager_register(struct DqlCoManager *manager,
                                      const char *worker_id,
                                      uintptr_t max_qubits,
                                      double cru,
                                      uint64_t now_ms);

/**
 * Applies a heartbeat listing `n_active` circuits (`circuit_ids[i]` with
 * `demands[i]` qubits). `quarantined` (optional) is set when the report
 * did not fit the worker's capacity.
 *
 * # Safety
 * `manager` must be a live handle; the arrays must hold `n_active`
 * entries of NUL-terminated strings and sizes.
 */
enum DqlStatus dql_comanager_heartbeat(struct DqlCoManager *manager,
                                       const char *worker_id,
                                       const char *const *circuit_ids,
                                       const uintptr_t *demands,
                                       uintptr_t n_active,
                                       double cru,
                                       uint64_t now_ms,
                                       bool *quarantined);

/**
 * Places or queues a circuit. On `Assigned` the chosen worker id is copied
 * (NUL-terminated) into `worker_buf`; on `Cached` the stored fidelity is
 * written to `cached` (optional).
 *
 * # Safety
 * `manager` must be a live handle; strings NUL-terminated; `outcome`
 * writable; `worker_buf` valid for `worker_cap` bytes.
 */
enum DqlStatus dql_comanager_assign(struct DqlCoManager *manager,
                                    const char *circuit_id,
                                    uintptr_t demand,
                                    const char *client_id,
                                    uint64_t now_ms,
                                    enum DqlAssign *outcome,
                                    char *worker_buf,
                                    uintptr_t worker_cap,
                                    double *cached);

/**
 * Records a worker's result. `delivered` is set when this was the first
 * result for the circuit and it should be forwarded to its client.
 *
 * # Safety
 * `manager` must be a live handle; strings NUL-terminated; `delivered`
 * writable.
 */
enum DqlStatus dql_comanager_complete(struct DqlCoManager *manager,
                                      const char *circuit_id,
                                      const char *worker_id,
                                      double fidelity,
                                      uint64_t now_ms,
                                      bool *delivered);

/**
 * Evicts workers silent for more than three heartbeat periods and
 * re-queues their circuits. `evicted` receives the number removed.
 *
 * # Safety
 * `manager` must be a live handle; `evicted` writable.
 */
enum DqlStatus dql_comanager_detect_failures(struct DqlCoManager *manager,
                                             uint64_t now_ms,
                                             uintptr_t *evicted);

/**
 * Free qubits (`AR = MR − OR`) of a worker.
 *
 * # Safety
 * `manager` must be a live handle; `worker_id` NUL-terminated; `out`
 * writable.
 */
enum DqlStatus dql_comanager_available(const struct DqlCoManager *manager,
                                       const char *worker_id,
                                       uintptr_t *out);

/**
 * Number of circuits waiting for a worker.
 *
 * # Safety
 * `manager` must be a live handle or null.
 */
uintptr_t dql_comanager_queue_len(const struct DqlCoManager *manager);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DQULEARN_H */
