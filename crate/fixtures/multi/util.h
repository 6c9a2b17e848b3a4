#ifndef UTIL_H
#define UTIL_H

#define GRID 256
#define STEPS 20

extern double cur[GRID][GRID];
extern double nxt[GRID][GRID];

void util_fill(void);
double util_checksum(const double (*g)[GRID]);
void stencil_apply(const double (*src)[GRID], double (*dst)[GRID]);
void stencil_damp(double (*g)[GRID], double factor);

#endif
