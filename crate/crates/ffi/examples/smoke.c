/* Minimal C client: builds an untrained generator, segments a synthetic slice and
   scores it against itself. Exits nonzero on any unexpected status. */
#include <stdio.h>
#include <stdlib.h>
#include "aseg.h"

#define CHECK(call)                                                          \
    do {                                                                     \
        AsegStatus s_ = (call);                                              \
        if (s_ != ASEG_STATUS_OK) {                                          \
            const char *m_ = aseg_last_error();                              \
            fprintf(stderr, "%s -> %d: %s\n", #call, s_, m_ ? m_ : "(none)"); \
            return 1;                                                        \
        }                                                                    \
    } while (0)

int main(void) {
    enum { H = 40, W = 36 };
    float image[H * W];
    uint8_t labels[H * W];
    AsegGenerator *g = NULL;
    size_t params = 0, j = 0;
    double dice = 0.0, hd = -1.0, asd = -1.0;
    int flagged = -1;

    for (int k = 0; k < H * W; ++k) image[k] = (float)((k * 37) % 101);
    CHECK(aseg_generator_new(NULL, 7, &g));
    CHECK(aseg_generator_param_count(g, &params));
    CHECK(aseg_generator_predict_slice(g, image, H, W, 32, labels));
    CHECK(aseg_dice(labels, labels, H * W, 1, &dice));
    CHECK(aseg_surface_distances(labels, labels, 1, H, W, 1.0, 1.0, 2, &hd, &asd, &flagged));
    CHECK(aseg_map_slice_index(7, 10, 5, &j));

    if (aseg_map_slice_index(10, 10, 5, &j) != ASEG_STATUS_INVALID_ARGUMENT || aseg_last_error() == NULL) {
        fprintf(stderr, "out-of-range index was accepted\n");
        return 1;
    }
    aseg_generator_free(g);
    printf("version=%s params=%zu dice=%.1f hd=%.1f asd=%.1f flagged=%d j=%zu\n", aseg_version(), params, dice,
           hd, asd, flagged, j);
    return 0;
}
