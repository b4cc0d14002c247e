#ifndef PATTERNLOOM_H
#define PATTERNLOOM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum PlStatus {
  Ok = 0,
  NullArgument = 1,
  InvalidUtf8 = 2,
  InvalidJson = 3,
  DomainError = 4,
} PlStatus;

/**
 * Opaque catalog handle.
 */
typedef struct PlCatalog PlCatalog;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Create a catalog from the built-in matrix data.
 */
struct PlCatalog *pl_catalog_new(void);

/**
 * Create a catalog from catalog JSON. Returns NULL on invalid input.
 *
 * # Safety
 * `json` must be a valid NUL-terminated C string or NULL.
 */
struct PlCatalog *pl_catalog_from_json(const char *json);

/**
 * Release a catalog handle. NULL is a no-op.
 *
 * # Safety
 * `catalog` must have come from `pl_catalog_new`/`pl_catalog_from_json`
 * and must not be used afterwards.
 */
void pl_catalog_free(struct PlCatalog *catalog);

/**
 * Number of named pattern cells, or 0 on NULL.
 *
 * # Safety
 * `catalog` must be a live handle or NULL.
 */
uint64_t pl_catalog_named_count(const struct PlCatalog *catalog);

/**
 * Orthogonality report as a JSON string written to `*out`.
 *
 * # Safety
 * `catalog` must be a live handle; `out` must be a valid pointer.
 */
enum PlStatus pl_catalog_report_json(const struct PlCatalog *catalog, char **out);

/**
 * Run the advisor on `constraints_json` (a DomainConstraints record)
 * and write the Recommendation JSON to `*out`.
 *
 * # Safety
 * `catalog` must be a live handle; `constraints_json` a valid C
 * string; `out` a valid pointer.
 */
enum PlStatus pl_advise_json(const struct PlCatalog *catalog,
                             const char *constraints_json,
                             char **out);

/**
 * Validate the four built-in case studies; Ok only when all pass.
 *
 * # Safety
 * `catalog` must be a live handle or NULL.
 */
enum PlStatus pl_check_fixtures(const struct PlCatalog *catalog);

/**
 * Evaluate an approval gate: `action_json` is an ActionRequest,
 * `rules_json` a {deny,allow} rule set; the decision JSON lands in
 * `*out`.
 *
 * # Safety
 * Both JSON arguments must be valid C strings; `out` a valid pointer.
 */
enum PlStatus pl_gate_eval_json(const char *action_json, const char *rules_json, char **out);

/**
 * Token count of a UTF-8 string under the fixed chars/4 tokenizer;
 * 0 for NULL or invalid UTF-8.
 *
 * # Safety
 * `text` must be a valid NUL-terminated C string or NULL.
 */
uint64_t pl_tokenize(const char *text);

/**
 * Release a string returned by this library. NULL is a no-op.
 *
 * # Safety
 * `s` must have been returned by a pl_* function and not freed before.
 */
void pl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATTERNLOOM_H */
