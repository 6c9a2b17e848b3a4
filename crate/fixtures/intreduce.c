/* Integer sum over a pseudo-random vector. Integer addition is associative
 * and commutative, so the reduction result is bitwise stable under any
 * schedule or thread count.
 */
#include <stdio.h>

static long long v[4194304];

int main(void) {
    long long total;
    int i;

    for (i = 0; i < 4194304; i++) {
        v[i] = (long long)((i * 2654435761u) % 1000003u) - 500000;
    }

    total = 0;
    for (i = 0; i < 4194304; i++) {
        total += v[i];
    }
    printf("total %lld\n", total);
    return 0;
}
