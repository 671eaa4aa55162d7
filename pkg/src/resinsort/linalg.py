"""Symmetric eigendecomposition by Jacobi rotations.

Rotations are applied in round-robin order: each round annihilates n/2
disjoint off-diagonal pairs at once, so a round is a handful of vectorized
row/column updates. The result is deterministic for a given input.
"""
from __future__ import annotations

import numpy as np

OFF_TOL = 1e-12
MAX_SWEEPS = 100


def _round_robin(n):
    """n-1 rounds of n/2 disjoint (p, q) pairs covering every pair once (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        top, bot = players[:half], players[half:][::-1]
        p = np.array([min(a, b) for a, b in zip(top, bot)])
        q = np.array([max(a, b) for a, b in zip(top, bot)])
        rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def off_norm(a):
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def jacobi_eigh(a, tol=OFF_TOL, max_sweeps=MAX_SWEEPS):
    """Eigenvalues (descending) and eigenvectors (columns) of a symmetric matrix.

    Iterates until the off-diagonal Frobenius norm is at most ``tol`` times
    the matrix norm. Each eigenvector is signed so its largest-magnitude
    component is positive.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(a).max(initial=0.0))):
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    m = n + (n % 2)
    if m != n:
        # pad with an isolated zero row/column so every round has full pairs
        a = np.pad(a, ((0, 1), (0, 1)))
    v = np.eye(m)
    scale = np.linalg.norm(a)
    rounds = _round_robin(m) if m > 1 else []
    for _ in range(max_sweeps):
        if scale == 0.0 or off_norm(a) <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not active.any():
                continue
            app, aqq = a[p, p], a[q, q]
            safe = np.where(active, apq, 1.0)
            with np.errstate(over="ignore"):
                tau = (aqq - app) / (2.0 * safe)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # columns: A <- A J
            ap, aq = a[:, p].copy(), a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            # rows: A <- J^T A
            ap, aq = a[p, :].copy(), a[q, :]
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    else:
        raise np.linalg.LinAlgError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    # the padding row/column has zero coupling, so it is never rotated
    values = np.diag(a)[:n]
    vectors = v[:n, :n]
    order = np.argsort(-values, kind="stable")
    values, vectors = values[order], vectors[:, order]
    return values, sign_normalize(vectors)


def sign_normalize(vectors):
    """Flip each column so its largest-magnitude entry is positive."""
    vectors = np.array(vectors, dtype=np.float64)
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs
