# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled one-sided Jacobi kernel.

Works on the row-major matrix ``g`` whose rows are the columns being
orthogonalised; ``j`` accumulates the same rotations and ends up holding
the right singular vectors as rows.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, copysign

cnp.import_array()


def jacobi_rotate(double[:, ::1] g, double[:, ::1] j, double tol, int max_sweeps):
    """Cyclic-by-row sweeps until every pair is orthogonal to ``tol``.

    Returns ``(sweeps, off)`` where ``off`` is the largest relative
    off-diagonal entry seen in the last sweep. ``sweeps == -1`` signals
    non-convergence.
    """
    cdef Py_ssize_t n = g.shape[0]
    cdef Py_ssize_t m = g.shape[1]
    cdef Py_ssize_t nj = j.shape[1]
    cdef Py_ssize_t p, q, k
    cdef double alpha, beta, gamma, rel, off, zeta, t, c, s, x, y
    cdef int sweep
    off = 0.0
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    x = g[p, k]
                    y = g[q, k]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if alpha == 0.0 or beta == 0.0:
                    continue
                rel = fabs(gamma) / (sqrt(alpha) * sqrt(beta))
                if rel > off:
                    off = rel
                if rel <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if fabs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = copysign(1.0, zeta) / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    x = g[p, k]
                    y = g[q, k]
                    g[p, k] = c * x - s * y
                    g[q, k] = s * x + c * y
                for k in range(nj):
                    x = j[p, k]
                    y = j[q, k]
                    j[p, k] = c * x - s * y
                    j[q, k] = s * x + c * y
        if off <= tol:
            return sweep + 1, off
    return -1, off
