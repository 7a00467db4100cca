"""Dense SVD, hard-threshold truncation and factor merging for static weights.

Matrices are plain 2-D ``float64`` numpy arrays. A factorization keeps the
left vectors ``u`` (M x k), the singular values ``sigma`` (k,) and the right
vectors ``v`` (N x k) so that ``w ~= u @ diag(sigma) @ v.T``.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, InvalidRank


def as_dense(w, name="matrix"):
    """Validate and return ``w`` as a finite 2-D float64 array."""
    a = np.asarray(w, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} contains non-finite values")
    return a


@dataclass(frozen=True)
class SvdFactor:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        k = len(self.sigma)
        if self.u.ndim != 2 or self.v.ndim != 2:
            raise InvalidInput("u and v must be 2-D")
        if self.u.shape[1] != k or self.v.shape[1] != k:
            raise InvalidInput(
                f"factor shapes disagree: u {self.u.shape}, sigma ({k},), v {self.v.shape}")

    @property
    def rank(self):
        return len(self.sigma)

    @property
    def shape(self):
        return self.u.shape[0], self.v.shape[0]

    def dense(self):
        return (self.u * self.sigma) @ self.v.T


def _fix_signs(u, v):
    # first nonzero entry of every u column made non-negative; v follows
    u = u.copy()
    v = v.copy()
    for r in range(u.shape[1]):
        nz = np.flatnonzero(u[:, r])
        if nz.size and u[nz[0], r] < 0:
            u[:, r] = -u[:, r]
            v[:, r] = -v[:, r]
    return u, v


def svd_decompose(w, tol=1e-8):
    """Full-rank thin SVD of ``w`` with a deterministic sign convention.

    Singular values come back non-increasing; equal values keep the order the
    solver produced them in. Raises ``InvalidInput`` for non-finite input or
    if the reconstruction misses ``tol`` (relative Frobenius).
    """
    w = as_dense(w, "w")
    if min(w.shape) < 1:
        raise InvalidInput(f"empty matrix of shape {w.shape}")
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    order = np.argsort(-s, kind="stable")
    u, s, v = u[:, order], s[order], vt[order].T
    u, v = _fix_signs(u, v)
    f = SvdFactor(u, s, v)
    norm = np.linalg.norm(w)
    err = np.linalg.norm(f.dense() - w)
    if err > tol * max(norm, np.finfo(float).tiny):
        raise InvalidInput(f"SVD reconstruction error {err:.3e} exceeds tolerance")
    return f


def hard_threshold_rank(d1, d2):
    """Largest rank whose two factors hold no more MACs than the d1 x d2 matrix.

    >>> hard_threshold_rank(768, 3072)
    614
    """
    if d1 < 1 or d2 < 1:
        raise InvalidInput("dimensions must be positive")
    return (d1 * d2) // (d1 + d2)


def truncate(f, k):
    """Keep the leading ``k`` ranks of ``f``."""
    if not 1 <= k <= f.rank:
        raise InvalidRank(f"rank {k} outside [1, {f.rank}]")
    return SvdFactor(f.u[:, :k].copy(), f.sigma[:k].copy(), f.v[:, :k].copy())


def truncate_to_threshold(f, min_rank=1):
    """Truncate to the hard-threshold rank of the factored matrix shape.

    The threshold is 0 for 1 x n matrices, so the result is clamped to
    ``min_rank`` (and never beyond the available rank).
    """
    k = hard_threshold_rank(*f.shape)
    return truncate(f, min(max(k, min_rank), f.rank))


def truncation_error(f, k):
    """Frobenius error of keeping ``k`` ranks, from the discarded tail."""
    if not 0 <= k <= f.rank:
        raise InvalidRank(f"rank {k} outside [0, {f.rank}]")
    return float(np.sqrt(np.sum(f.sigma[k:] ** 2)))


def merge_sigma_vt(f):
    """Fold the singular values into the right factor.

    Returns ``(b, u)`` with ``b = diag(sigma) @ v.T`` of shape k x N. Row r of
    ``b`` and column r of ``u`` belong to rank r.
    """
    b = f.sigma[:, None] * f.v.T
    return b, f.u.copy()
