#ifndef MAPL_H
#define MAPL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes shared by every function in this library.
 */
typedef enum MaplStatus {
  MAPL_STATUS_OK = 0,
  MAPL_STATUS_NULL_POINTER = 1,
  MAPL_STATUS_INVALID_UTF8 = 2,
  MAPL_STATUS_SHAPE = 3,
  MAPL_STATUS_CONFIG = 4,
  MAPL_STATUS_DATA = 5,
  MAPL_STATUS_LENGTH = 6,
  MAPL_STATUS_NUMERIC = 7,
  MAPL_STATUS_CHECKPOINT = 8,
  MAPL_STATUS_PARSE = 9,
  MAPL_STATUS_IO = 10,
  MAPL_STATUS_BUFFER_TOO_SMALL = 11,
  MAPL_STATUS_PANIC = 12,
} MaplStatus;

/*
 A trained mapping network.
 */
typedef struct MaplMapper MaplMapper;

/*
 Frozen backbones plus a trained mapping network.
 */
typedef struct MaplPipeline MaplPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static nul-terminated string.
 */
const char *mapl_version(void);

/*
 Message of the last failure on this thread, or NULL. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *mapl_last_error(void);

/*
 # Safety
 `s` must be NULL or a string returned by this library, freed once.
 */
void mapl_string_free(char *s);

/*
 Trainable parameter count of a mapper. `config` holds `key = value`
 lines applied on top of the medium configuration (`variant`, `size`,
 `l_out`, ...; an optional `mapper.` prefix is accepted).

 # Safety
 `config` must be a nul-terminated string and `out` a valid pointer.
 */
enum MaplStatus mapl_count_parameters(const char *config, uint64_t *out);

/*
 Accuracy of `prediction` against exactly ten reference answers.

 # Safety
 `prediction` and each of the `n_answers` entries of `answers` must be
 nul-terminated strings; `out` must be a valid pointer.
 */
enum MaplStatus mapl_vqa_accuracy(const char *prediction,
                                  const char *const *answers,
                                  size_t n_answers,
                                  double *out);

/*
 Corpus BLEU-4 with one reference per candidate.

 # Safety
 `candidates` and `references` must each hold `n` nul-terminated strings;
 `out` must be a valid pointer.
 */
enum MaplStatus mapl_bleu4(const char *const *candidates,
                           const char *const *references,
                           size_t n,
                           double *out);

/*
 Loads a mapper checkpoint.

 # Safety
 `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum MaplStatus mapl_mapper_load(const char *path, struct MaplMapper **out);

/*
 # Safety
 `mapper` must be NULL or a handle from [`mapl_mapper_load`], freed once.
 */
void mapl_mapper_free(struct MaplMapper *mapper);

/*
 Expected feature matrix shape, `rows x cols`.

 # Safety
 All pointers must be valid.
 */
enum MaplStatus mapl_mapper_input_shape(const struct MaplMapper *mapper,
                                        size_t *rows,
                                        size_t *cols);

/*
 Produced prefix shape, `rows x cols`.

 # Safety
 All pointers must be valid.
 */
enum MaplStatus mapl_mapper_output_shape(const struct MaplMapper *mapper,
                                         size_t *rows,
                                         size_t *cols);

/*
 Maps a row-major feature matrix to a row-major prefix. `out_len` must be
 at least the output rows times columns.

 # Safety
 `features` must point to `rows * cols` doubles and `out` to `out_len`.
 */
enum MaplStatus mapl_mapper_map(const struct MaplMapper *mapper,
                                const double *features,
                                size_t rows,
                                size_t cols,
                                double *out,
                                size_t out_len);

/*
 Loads the fixture backbones in `fixtures_dir` together with a mapper
 checkpoint trained against them.

 # Safety
 `fixtures_dir` and `checkpoint` must be nul-terminated strings and `out`
 a valid pointer.
 */
enum MaplStatus mapl_pipeline_load(const char *fixtures_dir,
                                   const char *checkpoint,
                                   struct MaplPipeline **out);

/*
 # Safety
 `pipeline` must be NULL or a handle from [`mapl_pipeline_load`], freed once.
 */
void mapl_pipeline_free(struct MaplPipeline *pipeline);

/*
 Greedy caption for a row-major grid of color indices. The caller frees
 `*out` with [`mapl_string_free`].

 # Safety
 `cells` must point to `n_cells` values and `out` must be valid.
 */
enum MaplStatus mapl_pipeline_caption(const struct MaplPipeline *pipeline,
                                      const uint32_t *cells,
                                      size_t n_cells,
                                      char **out);

/*
 Zero-shot answer to "color of `row` `col`?" about the given grid, with
 1-based coordinates. The caller frees `*out` with [`mapl_string_free`].

 # Safety
 `cells` must point to `n_cells` values and `out` must be valid.
 */
enum MaplStatus mapl_pipeline_answer_color(const struct MaplPipeline *pipeline,
                                           const uint32_t *cells,
                                           size_t n_cells,
                                           size_t row,
                                           size_t col,
                                           char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAPL_H */
