/* Dense 512x512 matrix product with a weighted checksum.
 * Three nests, six loops total: 2-deep init, 3-deep compute, 1-deep checksum.
 * Bounds are literal so trip counts are statically known.
 */
#include <stdio.h>

static double a[512][512];
static double b[512][512];
static double c[512][512];

int main(void) {
    int i, j, k;
    double sum;

    for (i = 0; i < 512; i++) {
        for (j = 0; j < 512; j++) {
            a[i][j] = (double)((i * 31 + j * 17) % 1024) / 64.0;
            b[i][j] = (double)((i * 13 + j * 29) % 1024) / 128.0;
            c[i][j] = 0.0;
        }
    }

    for (i = 0; i < 512; i++) {
        for (j = 0; j < 512; j++) {
            for (k = 0; k < 512; k++) {
                c[i][j] = c[i][j] + a[i][k] * b[k][j];
            }
        }
    }

    sum = 0.0;
    for (i = 0; i < 512; i++) {
        sum += c[i][(i * 7 + 3) % 512] * (double)(i % 13 + 1);
    }
    printf("checksum %.12e\n", sum);
    return 0;
}
