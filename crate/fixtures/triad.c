/* Streaming vector triad x = y + scale * z, repeated with a drifting scale.
 * The repetition loop carries the scale scalar and rewrites x, so only the
 * inner streaming loops are safe to parallelize.
 */
#include <stdio.h>

static double x[2097152];
static double y[2097152];
static double z[2097152];

int main(void) {
    int r, i;
    double scale, check;

    for (i = 0; i < 2097152; i++) {
        y[i] = (double)((i * 7) % 513) / 8.0;
        z[i] = (double)((i * 3) % 1027) / 32.0;
        x[i] = 0.0;
    }

    scale = 3.0;
    for (r = 0; r < 40; r++) {
        for (i = 0; i < 2097152; i++) {
            x[i] = y[i] + scale * z[i];
        }
        scale = scale + 0.125;
    }

    check = 0.0;
    for (i = 0; i < 2097152; i++) {
        check += x[i] * (double)(i % 9 + 1);
    }
    printf("triad %.12e\n", check);
    return 0;
}
