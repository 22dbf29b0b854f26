"""Exact Euclidean distance transform with per-axis spacing.

Separable lower-envelope algorithm (Felzenszwalb & Huttenlocher): one 1D
squared-distance pass per axis, each exact, so the composition is exact.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import InvalidArgumentError


@njit(cache=True)
def _envelope_pass(f, spacing):
    # f: (lines, n) squared distances, updated in place; inf marks "no site"
    lines, n = f.shape
    v = np.empty(n, np.int64)
    z = np.empty(n + 1, np.float64)
    row = np.empty(n, np.float64)
    s2 = spacing * spacing
    for li in range(lines):
        k = -1
        for q in range(n):
            fq = f[li, q]
            if fq == np.inf:
                continue
            pq = q * spacing
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            while True:
                r = v[k]
                pr = r * spacing
                s = ((fq + pq * pq) - (f[li, r] + pr * pr)) / (2.0 * (pq - pr))
                if s <= z[k]:  # z[0] is -inf, so k never drops below 0
                    k -= 1
                    continue
                break
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        if k < 0:
            continue
        j = 0
        for q in range(n):
            pq = q * spacing
            while z[j + 1] < pq:
                j += 1
            d = q - v[j]
            row[q] = d * d * s2 + f[li, v[j]]
        for q in range(n):
            f[li, q] = row[q]


def squared_edt(sites: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Squared Euclidean distance from every voxel to the nearest ``True`` voxel.

    Voxels with no site at all (empty ``sites``) come out as ``inf``.
    """
    sites = np.asarray(sites, dtype=bool)
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != sites.ndim or any(s <= 0 for s in spacing):
        raise InvalidArgumentError(f"spacing must be {sites.ndim} positive values, got {spacing}")
    dist = np.where(sites, 0.0, np.inf)
    for axis, step in enumerate(spacing):
        moved = np.moveaxis(dist, axis, -1)
        lines = np.ascontiguousarray(moved).reshape(-1, moved.shape[-1])
        _envelope_pass(lines, step)
        dist = np.moveaxis(lines.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(dist)


def edt(sites: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    return np.sqrt(squared_edt(sites, spacing))
