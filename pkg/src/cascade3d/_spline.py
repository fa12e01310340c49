"""Compiled cubic B-spline evaluation on a coarse control grid."""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _mirror(i, n):
    if n == 1:
        return 0
    p = 2 * n - 2
    i = abs(i) % p
    return p - i if i >= n else i


@njit(cache=True, inline="always")
def _bspline3(t, w):
    # cubic B-spline weights for taps floor(x)-1 .. floor(x)+2, t = x - floor(x)
    s = 1.0 - t
    w[0] = s * s * s / 6.0
    w[1] = (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0
    w[2] = (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0
    w[3] = t * t * t / 6.0


@njit(cache=True, nogil=True)
def bspline3_eval(coeffs, pts, out):
    """Evaluate prefiltered cubic B-spline ``coeffs (C, gx, gy, gz)`` at ``pts (3, N)``.

    Coefficient indices outside the grid are mirrored without repeating the edge.
    """
    nc, gx, gy, gz = coeffs.shape
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    ix = np.empty(4, np.int64)
    iy = np.empty(4, np.int64)
    iz = np.empty(4, np.int64)
    for n in range(pts.shape[1]):
        fx = np.floor(pts[0, n])
        fy = np.floor(pts[1, n])
        fz = np.floor(pts[2, n])
        _bspline3(pts[0, n] - fx, wx)
        _bspline3(pts[1, n] - fy, wy)
        _bspline3(pts[2, n] - fz, wz)
        for a in range(4):
            ix[a] = _mirror(int(fx) - 1 + a, gx)
            iy[a] = _mirror(int(fy) - 1 + a, gy)
            iz[a] = _mirror(int(fz) - 1 + a, gz)
        for c in range(nc):
            acc = 0.0
            for a in range(4):
                for b in range(4):
                    wab = wx[a] * wy[b]
                    for e in range(4):
                        acc += wab * wz[e] * coeffs[c, ix[a], iy[b], iz[e]]
            out[c, n] = acc
