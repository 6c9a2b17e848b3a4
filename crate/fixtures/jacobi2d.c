/* 2-D Jacobi relaxation on a 1024x1024 grid for 100 timesteps.
 * The timestep loop is intentionally loop-carried; the interior sweeps are not.
 */
#include <stdio.h>

static double grid[1024][1024];
static double next[1024][1024];

int main(void) {
    int t, i, j;
    double trace;

    for (i = 0; i < 1024; i++) {
        for (j = 0; j < 1024; j++) {
            grid[i][j] = (double)((i * 53 + j * 41) % 257) / 16.0;
            next[i][j] = 0.0;
        }
    }

    for (t = 0; t < 100; t++) {
        for (i = 1; i < 1023; i++) {
            for (j = 1; j < 1023; j++) {
                next[i][j] = 0.25 * (grid[i - 1][j] + grid[i + 1][j]
                                     + grid[i][j - 1] + grid[i][j + 1]);
            }
        }
        for (i = 1; i < 1023; i++) {
            for (j = 1; j < 1023; j++) {
                grid[i][j] = next[i][j];
            }
        }
    }

    trace = 0.0;
    for (i = 0; i < 1024; i++) {
        trace += grid[i][(i * 11 + 7) % 1024] * (double)(i % 7 + 1);
    }
    printf("trace %.12e\n", trace);
    return 0;
}
