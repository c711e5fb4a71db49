#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "sedtriadv.h"

#define CHECK(call)                                                        \
  do {                                                                     \
    SedStatus s_ = (call);                                                 \
    if (s_ != SED_STATUS_OK) {                                             \
      fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, sed_last_error()); \
      return 1;                                                            \
    }                                                                      \
  } while (0)

int main(int argc, char **argv) {
  if (argc != 2) return 2;
  SedRun *bad = NULL;
  if (sed_run_load("/nonexistent/run", NULL, &bad) != SED_STATUS_IO || bad) return 3;
  if (strlen(sed_last_error()) == 0) return 4;

  SedRun *run = NULL;
  CHECK(sed_run_load(argv[1], NULL, &run));
  size_t k = 0;
  CHECK(sed_run_n_classes(run, &k));
  const char *name = NULL;
  CHECK(sed_run_class_name(run, 0, &name));
  if (sed_run_class_name(run, k, &name) != SED_STATUS_OUT_OF_RANGE) return 5;

  size_t n = 44100 * 10;
  float *x = calloc(n, sizeof(float));
  for (size_t i = 44100; i < 3 * 44100; i++) x[i] = 0.2f * sinf(2.0f * 3.14159265f * 1000.0f * (float)i / 44100.0f);
  SedPrediction *pred = NULL;
  CHECK(sed_run_predict(run, x, n, 44100, &pred));
  size_t frames = 0, classes = 0;
  double hop = 0;
  CHECK(sed_prediction_shape(pred, &frames, &classes, &hop));
  float *probs = malloc(frames * classes * sizeof(float));
  if (sed_prediction_frame_probs(pred, probs, frames * classes - 1) != SED_STATUS_BUFFER_TOO_SMALL) return 6;
  CHECK(sed_prediction_frame_probs(pred, probs, frames * classes));
  for (size_t i = 0; i < frames * classes; i++)
    if (!(probs[i] >= 0.0f && probs[i] <= 1.0f)) return 7;
  size_t n_events = 0;
  CHECK(sed_prediction_n_events(pred, &n_events));
  for (size_t i = 0; i < n_events; i++) {
    SedEvent e;
    CHECK(sed_prediction_event(pred, i, &e));
    printf("%u\t%.6f\t%.6f\n", e.class_id, e.onset_s, e.offset_s);
  }
  printf("classes %zu frames %zu version %s\n", k, frames, sed_version());
  free(probs);
  free(x);
  sed_prediction_free(pred);
  sed_run_free(run);
  return 0;
}
