#ifndef SAFEMERGE_H
#define SAFEMERGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

// Status codes returned by every fallible function.
typedef enum SmStatus {
  SM_OK = 0,
  SM_ERR_NULL = 1,
  SM_ERR_VALIDATION = 2,
  SM_ERR_IO = 3,
  SM_ERR_FORMAT = 4,
  SM_ERR_INCOMPATIBLE = 5,
  SM_ERR_PANIC = 6,
  SM_ERR_BUFFER_TOO_SMALL = 7,
} SmStatus;

// Opaque checkpoint handle.
typedef struct SmCheckpoint SmCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread. Empty after a
// successful call. Valid until the next call on the same thread.
const char *sm_last_error(void);

// Library version as a static NUL-terminated string.
const char *sm_version(void);

// Creates an empty checkpoint.
//
// # Safety
// `out` must be a valid pointer to writable storage.
enum SmStatus sm_checkpoint_new(struct SmCheckpoint **out);

// # Safety
// `path` must be a NUL-terminated string, `out` writable.
enum SmStatus sm_checkpoint_load(const char *path, struct SmCheckpoint **out);

// # Safety
// `ckpt` must be a live handle and `path` a NUL-terminated string.
enum SmStatus sm_checkpoint_save(const struct SmCheckpoint *ckpt, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `ckpt` must be null or a handle not yet freed.
void sm_checkpoint_free(struct SmCheckpoint *ckpt);

// # Safety
// `ckpt` must be a live handle, `out` writable.
enum SmStatus sm_checkpoint_num_tensors(const struct SmCheckpoint *ckpt, uintptr_t *out);

// # Safety
// `ckpt` must be a live handle, `out` writable.
enum SmStatus sm_checkpoint_num_params(const struct SmCheckpoint *ckpt, uintptr_t *out);

// Copies the name of tensor `index` (sorted order) into `buf` with a NUL
// terminator. `needed` receives the required size including the NUL;
// a too-small buffer returns `SM_ERR_BUFFER_TOO_SMALL` with `needed` set.
//
// # Safety
// `buf` must hold `buf_len` bytes (may be null when `buf_len` is 0);
// `needed` writable.
enum SmStatus sm_checkpoint_tensor_name(const struct SmCheckpoint *ckpt,
                                        uintptr_t index,
                                        char *buf,
                                        uintptr_t buf_len,
                                        uintptr_t *needed);

// Element count and rank of a tensor.
//
// # Safety
// `name` NUL-terminated; `len` and `ndim` writable.
enum SmStatus sm_checkpoint_tensor_info(const struct SmCheckpoint *ckpt,
                                        const char *name,
                                        uintptr_t *len,
                                        uintptr_t *ndim);

// Copies a tensor's shape into `shape` (`ndim` entries) and its data into
// `data` (`len` entries); either output may be null to skip it. The sizes
// must match [`sm_checkpoint_tensor_info`].
//
// # Safety
// Non-null outputs must hold the stated number of elements.
enum SmStatus sm_checkpoint_tensor_read(const struct SmCheckpoint *ckpt,
                                        const char *name,
                                        uintptr_t *shape,
                                        uintptr_t ndim,
                                        float *data,
                                        uintptr_t len);

// Inserts or replaces a tensor.
//
// # Safety
// `shape` holds `ndim` entries and `data` holds `len` entries; both may be
// null when their count is 0.
enum SmStatus sm_checkpoint_insert(struct SmCheckpoint *ckpt,
                                   const char *name,
                                   const uintptr_t *shape,
                                   uintptr_t ndim,
                                   const float *data,
                                   uintptr_t len);

// Sets `out` to whether the two checkpoints have identical names and
// shapes. On a mismatch `sm_last_error` describes it.
//
// # Safety
// Both handles live; `out` writable.
enum SmStatus sm_checkpoints_compatible(const struct SmCheckpoint *a,
                                        const struct SmCheckpoint *b,
                                        bool *out);

// Merges `experts` into `base` following a recipe JSON document and
// returns a new handle.
//
// # Safety
// `experts` points to `n_experts` live handles; `recipe_json`
// NUL-terminated; `out` writable.
enum SmStatus sm_merge(const struct SmCheckpoint *base,
                       const struct SmCheckpoint *const *experts,
                       uintptr_t n_experts,
                       const char *recipe_json,
                       struct SmCheckpoint **out);

// Evaluates `L_safety + alpha * L_expert` of a toy-LM checkpoint on two
// QA JSONL files. The model configuration is read from the checkpoint
// metadata. Any of the outputs may be null.
//
// # Safety
// Paths NUL-terminated; non-null outputs writable.
enum SmStatus sm_merge_loss(const struct SmCheckpoint *ckpt,
                            const char *safety_jsonl,
                            const char *expert_jsonl,
                            double alpha,
                            double *l_safety,
                            double *l_expert,
                            double *l_merge);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAFEMERGE_H */
