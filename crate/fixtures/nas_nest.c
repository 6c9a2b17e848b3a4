/* Banded conjugate-gradient kernel bundle with a small multigrid-style
 * smoother stack. The file is deliberately loop-heavy and mixes loop shapes:
 * canonical for loops (unit, non-unit and negative stride, braced and
 * unbraced), non-canonical for loops (pointer walk, empty header), while
 * loops, and a do-while loop. It also carries decoys that must NOT be
 * enumerated as loops: loop keywords inside comments, string literals, and
 * a function-like macro body.
 *
 * All arithmetic is integer-seeded and deterministic, so the printed results
 * are reproducible across runs and compilers at a fixed floating point model.
 */
#include <stdio.h>

#define N 600
#define BAND 7
#define LEVELS 4
#define WIDTH 64

/* Decoy one: for (ghost = 0; ghost < 9; ghost++) must never be counted. */
#define SQUARE(v) ((v) * (v))

/* Decoy two: a macro whose body mentions while (0). */
#define ONCE(stmt) do { stmt; } while (0)

static double mat[N][BAND];
static double xv[N];
static double bv[N];
static double rv[N];
static double pv[N];
static double qv[N];
static double levels[LEVELS][WIDTH][WIDTH];

/* Decoy three: loop keywords inside a string literal. */
static const char *banner = "while (1) { for (;;) break; }";

/* Fill the band matrix with a diagonally dominant pattern and build a
 * right-hand side from a small integer hash. The second statement group
 * shows an unbraced loop body, which the enumerator must still span
 * correctly.
 */
static void init_system(void) {
    int i, d;

    for (i = 0; i < N; i++) {
        for (d = 0; d < BAND; d++) {
            if (d == BAND / 2) {
                mat[i][d] = 8.0 + (double)(i % 5);
            } else {
                mat[i][d] = -1.0 + (double)((i * 3 + d) % 3) * 0.25;
            }
        }
    }

    for (i = 0; i < N; i++)
        bv[i] = (double)((i * 37 + 11) % 101) / 13.0;
}

static double band_dot(const double *u, const double *w) {
    double s = 0.0;
    int i;

    for (i = 0; i < N; i++) {
        s += u[i] * w[i];
    }
    return s;
}

static void band_axpy(double *dst, double alpha, const double *u) {
    int i;

    for (i = 0; i < N; i++) {
        dst[i] += alpha * u[i];
    }
}

/* Banded sparse matrix-vector product. Column clamping keeps the stencil
 * inside the vector, so rows near the boundary simply use fewer terms.
 */
static void band_spmv(const double *u, double *out) {
    int i, d;

    for (i = 0; i < N; i++) {
        double acc = 0.0;
        for (d = 0; d < BAND; d++) {
            int col = i + d - BAND / 2;
            if (col >= 0 && col < N) {
                acc += mat[i][d] * u[col];
            }
        }
        out[i] = acc;
    }
}

/* Plain conjugate gradient on the band system. The outer iteration is a
 * while loop whose trip count depends on the residual, i.e. it is not
 * statically bounded.
 */
static int conj_grad_lite(double tol, int max_iter) {
    double rr, rr_new, alpha, beta, pq;
    int it = 0;
    int i;

    for (i = 0; i < N; i++) {
        xv[i] = 0.0;
        rv[i] = bv[i];
        pv[i] = bv[i];
    }

    rr = band_dot(rv, rv);
    while (rr > tol * tol && it < max_iter) {
        band_spmv(pv, qv);
        pq = band_dot(pv, qv);
        if (pq == 0.0) {
            break;
        }
        alpha = rr / pq;
        band_axpy(xv, alpha, pv);
        band_axpy(rv, -alpha, qv);
        rr_new = band_dot(rv, rv);
        beta = rr_new / rr;
        for (i = 0; i < N; i++) {
            pv[i] = rv[i] + beta * pv[i];
        }
        rr = rr_new;
        it++;
    }
    return it;
}

/* Seed every level of the smoother stack from an integer hash. This is the
 * first of two triple nests in the file.
 */
static void seed_levels(void) {
    int l, i, j;

    for (l = 0; l < LEVELS; l++) {
        for (i = 0; i < WIDTH; i++) {
            for (j = 0; j < WIDTH; j++) {
                levels[l][i][j] = (double)((l * 19 + i * 7 + j * 3) % 97) / 9.0;
            }
        }
    }
}

/* In-place Gauss-Seidel style smoothing pass over each level. Every loop in
 * this nest carries a dependence because updated neighbours are re-read
 * within the same sweep.
 */
static void smooth_levels(void) {
    int l, i, j;

    for (l = 0; l < LEVELS; l++) {
        for (i = 1; i < WIDTH - 1; i++) {
            for (j = 1; j < WIDTH - 1; j++) {
                levels[l][i][j] = 0.2 * (levels[l][i][j]
                                         + levels[l][i - 1][j]
                                         + levels[l][i + 1][j]
                                         + levels[l][i][j - 1]
                                         + levels[l][i][j + 1]);
            }
        }
    }
}

/* Full-weighting restriction from a fine level onto the interior of a
 * coarse level, using every other point of the fine grid.
 */
static void restrict_level(int src, int dst) {
    int i, j;

    for (i = 1; i < WIDTH / 2 - 1; i++) {
        for (j = 1; j < WIDTH / 2 - 1; j++) {
            levels[dst][i][j] = 0.25 * levels[src][2 * i][2 * j]
                + 0.125 * (levels[src][2 * i - 1][2 * j]
                           + levels[src][2 * i + 1][2 * j]
                           + levels[src][2 * i][2 * j - 1]
                           + levels[src][2 * i][2 * j + 1]);
        }
    }
}

/* Mirror boundary handling: copy the first interior line onto each edge.
 * Two separate single loops rather than one fused loop, to keep the access
 * pattern obvious.
 */
static void apply_bc(int l) {
    int i;

    for (i = 0; i < WIDTH; i++) {
        levels[l][0][i] = levels[l][1][i];
        levels[l][WIDTH - 1][i] = levels[l][WIDTH - 2][i];
    }

    for (i = 0; i < WIDTH; i++) {
        levels[l][i][0] = levels[l][i][1];
        levels[l][i][WIDTH - 1] = levels[l][i][WIDTH - 2];
    }
}

/* Max-magnitude norm via a do-while loop; the ternary keeps the body free
 * of calls so the kernel stays self-contained.
 */
static double norm_inf(const double *u) {
    double m = 0.0;
    int i = 0;

    do {
        double av = u[i] < 0.0 ? -u[i] : u[i];
        if (av > m) {
            m = av;
        }
        i++;
    } while (i < N);
    return m;
}

/* Pointer-walk scan of a string: a for loop with a non-canonical header
 * (the condition dereferences a pointer instead of comparing an index).
 */
static int count_braces(const char *s) {
    const char *p;
    int hits = 0;

    for (p = s; *p; p++) {
        if (*p == '{') {
            hits++;
        }
    }
    return hits;
}

/* Event-queue drain with an empty for header; termination comes from the
 * break inside the body.
 */
static double drain_queue(void) {
    double total = 0.0;
    int ticket = 0;

    for (;;) {
        total += (double)(ticket % 5);
        ticket++;
        if (ticket >= 1000) {
            break;
        }
    }
    return total;
}

/* Descending accumulation with a switch in the body. The breaks inside the
 * switch belong to the switch, not to the loop.
 */
static double tail_sum(int n) {
    double s = 0.0;
    int i;

    for (i = n - 1; i >= 0; i--) {
        s += bv[i] * 0.5;
        switch (i % 3) {
        case 0:
            s += 1.0;
            break;
        case 1:
            s -= 0.25;
            break;
        default:
            break;
        }
    }
    return s;
}

/* Canonical loop with a non-unit stride: every other entry of the solution
 * vector contributes.
 */
static double stride_scan(void) {
    double s = 0.0;
    int i;

    for (i = 0; i < N; i += 2) {
        s += xv[i];
    }
    return s;
}

int main(void) {
    int iters, braces;
    double norm, queue, tail, strided, surface;
    int l;

    init_system();
    seed_levels();
    smooth_levels();
    restrict_level(0, 1);
    apply_bc(1);

    iters = conj_grad_lite(1.0e-8, 200);
    norm = norm_inf(rv);
    braces = count_braces(banner);
    queue = drain_queue();
    tail = tail_sum(N);
    strided = stride_scan();

    surface = 0.0;
    l = 0;
    while (l < LEVELS) {
        surface += levels[l][WIDTH / 2][WIDTH / 2];
        l++;
    }

    ONCE(surface += SQUARE(0.5));

    printf("iters %d\n", iters);
    printf("norm %.12e\n", norm);
    printf("braces %d\n", braces);
    printf("queue %.12e\n", queue);
    printf("tail %.12e\n", tail);
    printf("strided %.12e\n", strided);
    printf("surface %.12e\n", surface);
    return 0;
}
