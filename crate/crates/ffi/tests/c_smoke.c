#include <stdio.h>
#include <string.h>
#include "hemiseg.h"

#define CHECK(x)                                                        \
    do {                                                                \
        HsStatus s_ = (x);                                              \
        if (s_ != HS_STATUS_OK) {                                       \
            fprintf(stderr, "%s -> %d: %s\n", #x, s_, hs_last_error()); \
            return 1;                                                   \
        }                                                               \
    } while (0)

int main(void) {
    uint8_t a[8] = {1, 1, 0, 0, 0, 0, 0, 0};
    uint8_t b[8] = {0, 1, 1, 0, 0, 0, 0, 0};
    double d = -1.0, spacing[3] = {1.0, 0.117, 0.117};
    CHECK(hs_dice(a, b, 2, 2, 2, &d));
    if (d != 0.5) return 2;
    CHECK(hs_hausdorff_mm(a, b, 2, 2, 2, spacing, &d));

    HsModel *m = NULL;
    CHECK(hs_model_new(0.125, 1, &m));
    enum { D = 16, H = 16, W = 16, N = D * H * W };
    static double vol[N];
    static uint8_t labels[N];
    for (int i = 0; i < N; i++) vol[i] = (double)(i % 7);
    CHECK(hs_segment(m, vol, D, H, W, spacing, labels, N));
    for (int i = 0; i < N; i++)
        if (labels[i] > 2) return 3;

    if (hs_segment(m, vol, D, H, 12, spacing, labels, N) != HS_STATUS_SHAPE) return 4;
    if (strstr(hs_last_error(), "pad") == NULL) return 5;
    if (hs_dice(NULL, b, 2, 2, 2, &d) != HS_STATUS_NULL_POINTER) return 6;
    hs_model_free(m);
    printf("ok %s\n", hs_version());
    return 0;
}
