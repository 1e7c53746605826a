"""Hard and differentiable (soft) ranks, and Spearman correlations built on them.

Soft ranks are the Euclidean projection of ``values / strength`` onto the
permutahedron spanned by ``(1, ..., n)``.  After sorting, the projection
reduces to a non-increasing isotonic regression that pool-adjacent-violators
solves exactly, and whose Jacobian is block-averaging over the pooled runs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class DegenerateCorrelationWarning(RuntimeWarning):
    """A correlation was requested for a vector with zero variance."""


@dataclass(frozen=True)
class SoftRankConfig:
    regularization_strength: float = 0.1
    standardize: bool = True

    def __post_init__(self):
        if not self.regularization_strength > 0:
            raise ValueError(
                f"regularization_strength must be positive, got {self.regularization_strength}")


def pav_decreasing(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares fit of ``y`` under ``v[0] >= v[1] >= ...``.

    Returns the fitted vector and the size of each pooled block, left to right.
    """
    sums: list[float] = []
    counts: list[int] = []
    for value in y:
        s, c = float(value), 1
        while sums and sums[-1] * c < s * counts[-1]:
            s += sums.pop()
            c += counts.pop()
        sums.append(s)
        counts.append(c)
    sizes = np.array(counts, dtype=np.int64)
    fitted = np.repeat(np.array(sums) / sizes, sizes)
    return fitted, sizes


def _block_mean(g: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    return np.repeat(np.add.reduceat(g, starts) / sizes, sizes)


def _project_permutahedron(z: Tensor) -> Tensor:
    n = z.shape[0]
    perm = np.argsort(-z.data, kind="stable")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(n)
    s = z.data[perm]
    w = np.arange(n, 0, -1, dtype=np.float64)
    fitted, sizes = pav_decreasing(s - w)
    out = (s - fitted)[inv]

    def vjp(g):
        return (g - _block_mean(g[perm], sizes)[inv],)

    return ad._make(out, (z,), vjp)


def _standardize(v: Tensor) -> Tensor:
    centred = v - v.mean()
    spread = np.sqrt((centred.data ** 2).mean())
    if spread == 0.0:
        return centred
    std = ad.l2norm(ad.reshape(centred, (1, -1))) * (1.0 / np.sqrt(v.shape[0]))
    return centred / ad.reshape(std, (1,))


def soft_ranks(values, cfg: SoftRankConfig = SoftRankConfig()) -> Tensor:
    """Differentiable ascending ranks (1 = smallest) of a 1-D tensor.

    With ``cfg.standardize`` the values are z-scored first so the smoothing
    strength does not depend on their scale.
    """
    v = ad.as_tensor(values)
    if v.ndim != 1 or v.shape[0] < 2:
        raise ad.ShapeError(f"soft_ranks: expected a vector of length >= 2, got shape {v.shape}")
    if cfg.standardize:
        v = _standardize(v)
    return _project_permutahedron(v * (1.0 / cfg.regularization_strength))


def hard_ranks(values) -> np.ndarray:
    """Ascending ranks starting at 1; tied values share their average rank."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    order = np.argsort(v, kind="stable")
    sorted_v = v[order]
    boundaries = np.flatnonzero(np.diff(sorted_v)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [v.size]))
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(v.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    cx, cy = x - x.mean(), y - y.mean()
    den = np.sqrt((cx @ cx) * (cy @ cy))
    if den == 0.0:
        warnings.warn("zero variance in rank vector; correlation set to 0",
                      DegenerateCorrelationWarning, stacklevel=3)
        return 0.0
    return float(np.clip(cx @ cy / den, -1.0, 1.0))


def hard_spearman(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"hard_spearman: length mismatch {a.shape} vs {b.shape}")
    return _pearson(hard_ranks(a), hard_ranks(b))


def soft_spearman(a, b, cfg: SoftRankConfig = SoftRankConfig()) -> Tensor:
    """Pearson correlation of the soft ranks of ``a`` and ``b`` (differentiable)."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] < 3:
        raise ad.ShapeError(f"soft_spearman: need equal vectors of length >= 3, got {a.shape} and {b.shape}")
    ca = soft_ranks(a, cfg)
    cb = soft_ranks(b, cfg)
    ca = ca - ca.mean()
    cb = cb - cb.mean()
    na = ad.l2norm(ad.reshape(ca, (1, -1)))
    nb = ad.l2norm(ad.reshape(cb, (1, -1)))
    den = (na * nb).data.item()
    if den == 0.0:
        warnings.warn("zero variance in soft-rank vector; correlation set to 0",
                      DegenerateCorrelationWarning, stacklevel=2)
        return Tensor(0.0)
    return ad.reshape((ca * cb).sum() / ad.reshape(na * nb, ()), ())
