"""Singular value decomposition via one-sided Jacobi rotations.

No LAPACK: the decomposition is built from plane rotations that
orthogonalize matrix columns in place (Hestenes' method).  For an m×n
input we always rotate on the narrow side, so a sweep costs
O(min(m,n)² · max(m,n)).  Rotations within a sweep follow a round-robin
schedule of disjoint column pairs, which lets each round be applied as
one vectorized update.

Determinism: fixed sweep schedule, descending stable sort of singular
values, sign canonicalization (largest-magnitude entry of each left
singular vector made positive), and canonical-basis completion for
singular values clamped to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Stopping/clamping constants. Off-diagonal Gram entries are driven below
# OFFDIAG_TOL relative to the participating column norms, or we give up
# after MAX_SWEEPS (never observed at desk scale).
OFFDIAG_TOL = 1e-12
MAX_SWEEPS = 60
CLAMP_REL = 1e-12


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD: u (m×p), sigma (p, descending ≥ 0), v (n×p), p = min(m,n)."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(self.sigma))

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def _round_robin_schedule(n: int):
    """All unordered column pairs, grouped into rounds of disjoint pairs.

    Circle method: one slot fixed, the rest rotate. n-1 rounds for even n
    (n rounds for odd, via a bye slot), ⌊n/2⌋ pairs per round.
    """
    slots = list(range(n))
    if n % 2:
        slots.append(-1)  # bye
    m = len(slots)
    rounds = []
    for _ in range(m - 1):
        pairs = [
            (min(a, b), max(a, b))
            for a, b in ((slots[i], slots[m - 1 - i]) for i in range(m // 2))
            if a != -1 and b != -1
        ]
        rounds.append(np.array(pairs, dtype=np.intp))
        slots = [slots[0], slots[-1]] + slots[1:-1]
    return rounds


def _jacobi_orthogonalize(w: np.ndarray):
    """Rotate columns of w (in place) until mutually orthogonal.

    Returns the accumulated rotation v (orthogonal, n×n) with
    w_final = w_original @ v.
    """
    n = w.shape[1]
    v = np.eye(n)
    if n == 1:
        return w, v
    schedule = _round_robin_schedule(n)
    for _ in range(MAX_SWEEPS):
        rotated = False
        # Columns whose norm has collapsed to the clamp floor carry only
        # rounding noise; their pairwise angles never settle relative to
        # their own (vanishing) norms, so leave them out of the schedule
        # or rank-deficient inputs spin for the full sweep budget.
        dead2 = CLAMP_REL**2 * np.einsum("ij,ij->j", w, w).max()
        for pairs in schedule:
            p, q = pairs[:, 0], pairs[:, 1]
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = (
                (np.abs(gamma) > OFFDIAG_TOL * np.sqrt(alpha * beta))
                & (alpha > dead2)
                & (beta > dead2)
            )
            if not active.any():
                continue
            rotated = True
            theta = 0.5 * np.arctan2(2.0 * gamma, alpha - beta)
            c = np.where(active, np.cos(theta), 1.0)
            s = np.where(active, np.sin(theta), 0.0)
            w[:, p], w[:, q] = c * wp + s * wq, c * wq - s * wp
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp + s * vq, c * vq - s * vp
        if not rotated:
            break
    return w, v


def _complete_basis(u: np.ndarray, filled: int) -> np.ndarray:
    """Fill columns u[:, filled:] so u has orthonormal columns.

    Greedy and deterministic: repeatedly take the canonical basis vector
    with the largest residual after projecting out all columns so far
    (ties fall to the lowest index).
    """
    m, p = u.shape
    resid = np.eye(m) - u[:, :filled] @ u[:, :filled].T
    for col in range(filled, p):
        pick = int(np.argmax(np.einsum("ij,ij->j", resid, resid)))
        newcol = resid[:, pick]
        newcol = newcol / np.linalg.norm(newcol)
        u[:, col] = newcol
        resid -= np.outer(newcol, newcol @ resid)
    return u


def _svd_tall(m: np.ndarray) -> SvdResult:
    # m has rows ≥ cols; rotate its columns directly.  Fortran order keeps
    # the per-round column gathers contiguous.
    w, v = _jacobi_orthogonalize(np.array(m, dtype=np.float64, order="F", copy=True))
    norms = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order]
    w = w[:, order]
    v = v[:, order]

    u = np.zeros_like(w)
    cutoff = CLAMP_REL * sigma[0] if sigma[0] > 0 else 0.0
    keep = sigma > cutoff if cutoff > 0 else sigma > 0
    sigma = np.where(keep, sigma, 0.0)
    u[:, keep] = w[:, keep] / sigma[keep]
    if not keep.all():
        # clamped directions: vectors are arbitrary, pick a canonical set
        first_zero = int(np.argmin(keep))
        u = _complete_basis(u, first_zero)
    return SvdResult(u=u, sigma=sigma, v=v)


def svd(m) -> SvdResult:
    """Thin SVD with descending singular values; see SvdResult.

    Deterministic across runs: each left singular vector is flipped so its
    largest-magnitude entry is positive (right vector flipped along).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"svd expects a non-empty matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("svd: input has non-finite entries")

    if m.shape[0] >= m.shape[1]:
        res = _svd_tall(m)
        u, sigma, v = res.u, res.sigma, res.v
    else:
        res = _svd_tall(m.T)
        u, sigma, v = res.v, res.sigma, res.u

    flip = np.where(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return SvdResult(u=u * flip, sigma=sigma, v=v * flip)


def truncated_approx(m, k: int) -> np.ndarray:
    """Best rank-k approximation: keep the top-k singular triples."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"truncated_approx expects a matrix, got shape {m.shape}")
    k = int(k)
    p = min(m.shape)
    if not 1 <= k <= p:
        raise ValueError(f"k={k} out of range [1, {p}]")
    res = svd(m)
    return (res.u[:, :k] * res.sigma[:k]) @ res.v[:, :k].T
