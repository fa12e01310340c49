"""Compiled gather/scatter helpers for valid 3D convolution.

Arrays are channels-last ``(X, Y, Z, C)``. A column row holds the
``k**3 * C`` inputs of one output voxel ordered ``(i, j, l, c)``, matching a
weight tensor of shape ``(k, k, k, C_in, C_out)`` flattened to
``(k**3 * C_in, C_out)``.
"""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def im2col_into(x, k, cols):
    n0, n1, n2, ci = x.shape
    o0, o1, o2 = n0 - k + 1, n1 - k + 1, n2 - k + 1
    r = 0
    for a in range(o0):
        for b in range(o1):
            for c in range(o2):
                q = 0
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            for m in range(ci):
                                cols[r, q] = x[a + i, b + j, c + l, m]
                                q += 1
                r += 1


@numba.njit(cache=True, nogil=True)
def col2im(d, n0, n1, n2, k):
    ci = d.shape[1] // (k * k * k)
    o0, o1, o2 = n0 - k + 1, n1 - k + 1, n2 - k + 1
    out = np.zeros((n0, n1, n2, ci), d.dtype)
    r = 0
    for a in range(o0):
        for b in range(o1):
            for c in range(o2):
                q = 0
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            for m in range(ci):
                                out[a + i, b + j, c + l, m] += d[r, q]
                                q += 1
                r += 1
    return out

