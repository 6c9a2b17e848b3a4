#include "util.h"

void stencil_apply(const double (*src)[GRID], double (*dst)[GRID]) {
    int i, j;

    for (i = 1; i < GRID - 1; i++) {
        for (j = 1; j < GRID - 1; j++) {
            dst[i][j] = 0.25 * (src[i - 1][j] + src[i + 1][j]
                                + src[i][j - 1] + src[i][j + 1]);
        }
    }
}

void stencil_damp(double (*g)[GRID], double factor) {
    int i = 1;

    while (i < GRID - 1) {
        int j;
        for (j = 1; j < GRID - 1; j++) {
            g[i][j] *= factor;
        }
        i++;
    }
}
