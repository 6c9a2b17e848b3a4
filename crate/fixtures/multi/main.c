#include <stdio.h>
#include "util.h"

int main(void) {
    int t;

    util_fill();
    for (t = 0; t < STEPS; t++) {
        stencil_apply(cur, nxt);
        stencil_damp(nxt, 0.999);
        stencil_apply(nxt, cur);
    }
    printf("multi %.12e\n", util_checksum(cur));
    return 0;
}
