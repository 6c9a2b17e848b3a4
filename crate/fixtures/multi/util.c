#include "util.h"

double cur[GRID][GRID];
double nxt[GRID][GRID];

void util_fill(void) {
    int i, j;

    for (i = 0; i < GRID; i++) {
        for (j = 0; j < GRID; j++) {
            cur[i][j] = (double)((i * 23 + j * 5 + 1) % 83) / 7.0;
            nxt[i][j] = 0.0;
        }
    }
}

double util_checksum(const double (*g)[GRID]) {
    double s = 0.0;
    int i;

    for (i = 0; i < GRID; i++) {
        s += g[i][(i * 3 + 1) % GRID] * (double)(i % 11 + 1);
    }
    return s;
}
