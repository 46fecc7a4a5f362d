"""Pure-numpy fallback for the Jacobi kernel.

Uses round-robin (tournament) ordering so that each round rotates
``n // 2`` disjoint pairs at once with vectorised numpy calls.
"""

import numpy as np


def _rounds(n):
    idx = list(range(n)) + ([-1] if n % 2 else [])
    size = len(idx)
    rounds = []
    for _ in range(size - 1):
        pairs = [(idx[i], idx[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def jacobi_rotate(g, j, tol, max_sweeps):
    """Same contract as the compiled kernel; mutates ``g`` and ``j``."""
    rounds = _rounds(g.shape[0])
    off = 0.0
    for sweep in range(max_sweeps):
        off = 0.0
        for p, q in rounds:
            gp, gq = g[p], g[q]
            alpha = np.einsum("ij,ij->i", gp, gp)
            beta = np.einsum("ij,ij->i", gq, gq)
            gamma = np.einsum("ij,ij->i", gp, gq)
            denom = np.sqrt(alpha) * np.sqrt(beta)
            live = denom > 0.0
            rel = np.zeros_like(gamma)
            rel[live] = np.abs(gamma[live]) / denom[live]
            if rel.size:
                off = max(off, float(rel.max()))
            rot = rel > tol
            if not rot.any():
                continue
            p, q = p[rot], q[rot]
            zeta = (beta[rot] - alpha[rot]) / (2.0 * gamma[rot])
            big = np.abs(zeta) > 1e150
            safe = np.where(big, 1.0, zeta)
            t = np.where(
                big,
                0.5 / np.where(big, zeta, 1.0),
                np.copysign(1.0, safe) / (np.abs(safe) + np.sqrt(1.0 + safe * safe)),
            )
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = (c * t)[:, None]
            c = c[:, None]
            gp, gq = g[p], g[q]
            g[p] = c * gp - s * gq
            g[q] = s * gp + c * gq
            jp, jq = j[p], j[q]
            j[p] = c * jp - s * jq
            j[q] = s * jp + c * jq
        if off <= tol:
            return sweep + 1, off
    return -1, off
