"""Cyclic Jacobi eigendecomposition for symmetric matrices.

Deterministic and dependency-free. Rotations follow a fixed round-robin
schedule; each round's pair set is index-disjoint, so the rotations of a
round commute and can be applied with vectorized batch updates while
remaining exactly equal to the sequential cyclic method (a rotation for pair
(p, q) never touches the 2x2 subproblem of a disjoint pair). Batches of
matrices share the schedule, which keeps per-trial calibration cheap.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

_MAX_SWEEPS = 60


def _round_robin_rounds(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # classic tournament schedule: n-1 rounds of floor(n/2) disjoint pairs
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a != -1 and b != -1:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = _MAX_SWEEPS):
    """Eigendecomposition of symmetric matrices via cyclic Jacobi rotations.

    Args:
        a: (d, d) symmetric matrix, or a (batch, d, d) stack; d <= 256.
        tol: convergence threshold on max |off-diagonal| relative to the
            largest input magnitude.
        max_sweeps: hard cap on full round-robin sweeps.

    Returns:
        (w, v): eigenvalues sorted descending (stable order under ties) and
        eigenvectors as matching columns of v. Batched inputs return batched
        outputs. Signs are not canonicalized here.

    Raises:
        ShapeError: non-square input or d > 256.
    """
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 2
    if single:
        a = a[None, :, :]
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ShapeError(f"expected square matrices, got {a.shape}")
    d = a.shape[1]
    if d > 256:
        raise ShapeError(f"dim={d} exceeds the supported bound of 256")
    batch = a.shape[0]
    a = a.copy()
    v = np.broadcast_to(np.eye(d), (batch, d, d)).copy()
    scale = np.abs(a).max() if a.size else 0.0
    thresh = tol * max(scale, 1e-300)

    if d > 1:
        rounds = _round_robin_rounds(d)
        off_mask = ~np.eye(d, dtype=bool)
        for _ in range(max_sweeps):
            if np.abs(a[:, off_mask]).max(initial=0.0) <= thresh:
                break
            for p, q in rounds:
                apq = a[:, p, q]
                rot = apq != 0.0
                if not rot.any():
                    continue
                app = a[:, p, p]
                aqq = a[:, q, q]
                # stable Jacobi angle: t = sign(tau) / (|tau| + sqrt(1 + tau^2))
                with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                    tau = (aqq - app) / (2.0 * apq)
                    t = np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
                    t = np.where(tau == 0.0, 1.0, t)  # tau=0: 45-degree rotation
                    t = np.where(np.isfinite(t), t, 0.0)
                t = np.where(rot, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                cb = c[:, :, None]
                sb = s[:, :, None]
                rp = a[:, p, :].copy()
                rq = a[:, q, :].copy()
                a[:, p, :] = cb * rp - sb * rq
                a[:, q, :] = sb * rp + cb * rq
                cp = a[:, :, p].copy()
                cq = a[:, :, q].copy()
                cc = c[:, None, :]
                ss = s[:, None, :]
                a[:, :, p] = cc * cp - ss * cq
                a[:, :, q] = ss * cp + cc * cq
                vp = v[:, :, p].copy()
                vq = v[:, :, q].copy()
                v[:, :, p] = cc * vp - ss * vq
                v[:, :, q] = ss * vp + cc * vq

    w = np.einsum("bii->bi", a).copy()
    order = np.argsort(-w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    if single:
        return w[0], v[0]
    return w, v
