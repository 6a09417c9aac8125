"""Pure-Python one-sided Jacobi rotation sweeps (fallback kernel).

``w`` holds the columns of the working matrix as rows (n x m), ``v``
accumulates the right rotations (n x n). A pair (p, q) is rotated when
``|<w_p, w_q>| > tol * |w_p| * |w_q|``; sweeps stop once a full sweep applies
no rotation. Both arrays are modified in place.
"""

from __future__ import annotations

import math

import numpy as np


def rotate(w: np.ndarray, v: np.ndarray, tol: float, max_sweeps: int) -> int:
    n = w.shape[0]
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            wp = w[p]
            for q in range(p + 1, n):
                wq = w[q]
                alpha = float(wp @ wp)
                beta = float(wq @ wq)
                gamma = float(wp @ wq)
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha) * math.sqrt(beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta
                elif zeta >= 0.0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                w[p], w[q] = c * wp - s * wq, s * wp + c * wq
                v[p], v[q] = c * v[p] - s * v[q], s * v[p] + c * v[q]
                rotated = True
        if not rotated:
            return sweep + 1
    return max_sweeps
