#ifndef ISQL_H
#define ISQL_H

#include <stddef.h>
#include <stdint.h>

// Environment selector for [`isql_dynamics_real`].
#define ISQL_ENV_GRID 0

#define ISQL_ENV_POINTMASS 1

typedef enum IsqlStatus {
  ISQL_STATUS_OK = 0,
  ISQL_STATUS_NULL_POINTER = 1,
  ISQL_STATUS_INVALID_ARGUMENT = 2,
  ISQL_STATUS_IO = 3,
  ISQL_STATUS_PARSE = 4,
  ISQL_STATUS_CONFIG = 5,
  ISQL_STATUS_HASH_MISMATCH = 6,
  ISQL_STATUS_NUMERICAL = 7,
  ISQL_STATUS_BUFFER_TOO_SMALL = 8,
  ISQL_STATUS_PANIC = 9,
} IsqlStatus;

// A training artifact loaded from disk.
typedef struct IsqlArtifact IsqlArtifact;

// A dynamics model: learned, real or user-specified.
typedef struct IsqlDynamics IsqlDynamics;

// An assist-session service speaking the line protocol.
typedef struct IsqlService IsqlService;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *isql_version(void);

// Bytes needed for the last error message on this thread, including the
// terminating NUL; 0 when the last call succeeded.
size_t isql_last_error_length(void);

// Copies the last error message into `buf`. Returns `BufferTooSmall`
// (copying nothing) when `len` is under [`isql_last_error_length`].
//
// # Safety
// `buf` must point to `len` writable bytes.
enum IsqlStatus isql_last_error_message(char *buf, size_t len);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void isql_string_free(char *s);

// Loads an artifact, verifying its format and config hash.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum IsqlStatus isql_artifact_load(const char *path, struct IsqlArtifact **out);

// Releases an artifact. Null is ignored.
//
// # Safety
// `artifact` must come from [`isql_artifact_load`] and not be freed twice.
void isql_artifact_free(struct IsqlArtifact *artifact);

// Number of training tasks recorded in the artifact.
//
// # Safety
// Pointers must be valid.
enum IsqlStatus isql_artifact_task_count(const struct IsqlArtifact *artifact, size_t *out);

// The artifact's config hash as a new string (free with
// [`isql_string_free`]).
//
// # Safety
// Pointers must be valid.
enum IsqlStatus isql_artifact_config_hash(const struct IsqlArtifact *artifact, char **out);

// Stored dynamics score; `InvalidArgument` when training had no truth.
//
// # Safety
// Pointers must be valid.
enum IsqlStatus isql_artifact_dynamics_score(const struct IsqlArtifact *artifact, double *out);

// The learned dynamics of an artifact as a new handle.
//
// # Safety
// Pointers must be valid.
enum IsqlStatus isql_artifact_dynamics(const struct IsqlArtifact *artifact,
                                       struct IsqlDynamics **out);

// Linear point-mass dynamics from `[a13, a24, a33, a44, b11, b22, b31, b42]`.
//
// # Safety
// `params` must point to 8 doubles and `out` be writable.
enum IsqlStatus isql_dynamics_linear_new(const double *params, struct IsqlDynamics **out);

// Real dynamics of the default grid or point-mass environment.
//
// # Safety
// `out` must be writable.
enum IsqlStatus isql_dynamics_real(uint32_t env, struct IsqlDynamics **out);

// Releases a dynamics handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be freed twice.
void isql_dynamics_free(struct IsqlDynamics *model);

// Expected next state under `model`. A state is one cell index (grid) or
// four reals `[x, y, vx, vy]`; `next` receives as many values as `state`.
//
// # Safety
// `state` and `next` must each hold `len` doubles.
enum IsqlStatus isql_dynamics_expected_next(const struct IsqlDynamics *model,
                                            const double *state,
                                            size_t len,
                                            size_t action,
                                            double *next);

// Internal-to-real transfer: the real action whose outcome best matches
// what the user expects from `user_action` under `phi`. `scores` receives
// one divergence per action (lower is better) when non-null.
//
// # Safety
// `state` must hold `len` doubles, `scores` (if non-null) `scores_len`
// doubles, and `executed` must be writable.
enum IsqlStatus isql_transfer_action(const struct IsqlDynamics *phi,
                                     const struct IsqlDynamics *real,
                                     const double *state,
                                     size_t len,
                                     size_t user_action,
                                     size_t *executed,
                                     double *scores,
                                     size_t scores_len);

// Builds a session service from a TOML config of kind `serve`.
//
// # Safety
// `config_toml` must be a NUL-terminated string and `out` writable.
enum IsqlStatus isql_service_new(const char *config_toml, struct IsqlService **out);

// Handles one protocol request line and returns the reply line (free with
// [`isql_string_free`]). Protocol errors are replies, not failures.
//
// # Safety
// Pointers must be valid; `request` NUL-terminated.
enum IsqlStatus isql_service_handle(const struct IsqlService *service,
                                    const char *request,
                                    char **reply);

// Releases a service. Null is ignored.
//
// # Safety
// `service` must come from [`isql_service_new`] and not be freed twice.
void isql_service_free(struct IsqlService *service);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ISQL_H */
