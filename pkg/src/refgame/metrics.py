"""Evaluation metrics: accuracy, RSA, topographic similarity, run correlations."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
from scipy import stats

from .agents import truncate
from .diffrank import DegenerateCorrelationWarning, hard_spearman

CSV_FIELDS = ("epoch", "split", "accuracy", "rsa_sl", "rsa_si", "rsa_li",
              "topsim", "unique_messages", "ce", "l_rsa")


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    accuracy: float
    rsa_sl: float
    rsa_si: float
    rsa_li: float
    topsim: float
    unique_messages: int
    ce: float
    l_rsa: float

    def as_row(self) -> dict:
        return asdict(self)

    @classmethod
    def from_row(cls, row: dict) -> "MetricsRecord":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for name in CSV_FIELDS:
            value = row[name]
            out[name] = value if kinds[name] == "str" else (
                int(value) if kinds[name] == "int" else float(value))
        return cls(**out)


def upper_triangle(matrix: np.ndarray) -> np.ndarray:
    i, j = np.triu_indices(matrix.shape[0], k=1)
    return matrix[i, j]


def cosine_similarity_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    unit = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    return unit @ unit.T


def pairwise_cosine(X) -> np.ndarray:
    """Upper-triangle cosine similarities, pair order (0,1), (0,2), ..., (n-2,n-1)."""
    return upper_triangle(cosine_similarity_matrix(X))


def rsa(X, Y) -> float:
    """Spearman correlation between the pairwise cosine similarities of two sets.

    Rows of ``X`` and ``Y`` must describe the same ``n >= 3`` items; the
    feature dimensions may differ.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"rsa: item counts differ ({X.shape[0]} vs {Y.shape[0]})")
    if X.shape[0] < 3:
        raise ValueError("rsa: need at least 3 items")
    return hard_spearman(pairwise_cosine(X), pairwise_cosine(Y))


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _pairwise_levenshtein(seqs: list[tuple[int, ...]]) -> np.ndarray:
    """Edit distances for all pairs (upper-triangle order), vectorised over pairs."""
    n = len(seqs)
    i_idx, j_idx = np.triu_indices(n, k=1)
    width = max((len(s) for s in seqs), default=0)
    padded = np.full((n, width), -1, dtype=np.int64)
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    for row, s in enumerate(seqs):
        padded[row, :len(s)] = s
    a, b = padded[i_idx], padded[j_idx]
    la, lb = lengths[i_idx], lengths[j_idx]
    pairs = len(i_idx)
    # dp[p, j] holds the distance between a[p, :i] and b[p, :j]
    dp = np.tile(np.arange(width + 1), (pairs, 1))
    at_la = np.where(la == 0, dp[np.arange(pairs), lb], 0)
    for i in range(1, width + 1):
        new = np.empty_like(dp)
        new[:, 0] = i
        for j in range(1, width + 1):
            cost = (a[:, i - 1] != b[:, j - 1]).astype(np.int64)
            new[:, j] = np.minimum(np.minimum(dp[:, j] + 1, new[:, j - 1] + 1), dp[:, j - 1] + cost)
        dp = new
        hit = la == i
        at_la[hit] = dp[hit, lb[hit]]
    return at_la


def message_distances(messages) -> np.ndarray:
    """Pairwise edit distances between EOS-truncated messages."""
    seqs = [truncate(m) for m in messages]
    uniq = sorted(set(seqs))
    if len(uniq) < 2:
        return np.zeros(len(seqs) * (len(seqs) - 1) // 2)
    pos = {s: k for k, s in enumerate(uniq)}
    table = np.zeros((len(uniq), len(uniq)))
    table[np.triu_indices(len(uniq), k=1)] = _pairwise_levenshtein(uniq)
    table = table + table.T
    ids = np.array([pos[s] for s in seqs])
    return upper_triangle(table[np.ix_(ids, ids)])


def input_distances(inputs, metric: str = "cosine") -> np.ndarray:
    X = np.asarray(inputs, dtype=np.float64)
    if metric == "cosine":
        return 1.0 - pairwise_cosine(X)
    if metric == "euclidean":
        diff = X[:, None, :] - X[None, :, :]
        return upper_triangle(np.sqrt((diff ** 2).sum(-1)))
    raise ValueError(f"unknown input distance {metric!r}")


def topsim(inputs, messages, metric: str = "cosine") -> float:
    """Spearman correlation of input distances with message edit distances."""
    if len(messages) != len(inputs):
        raise ValueError(f"topsim: {len(inputs)} inputs but {len(messages)} messages")
    if len(messages) < 3:
        raise ValueError("topsim: need at least 3 items")
    return hard_spearman(input_distances(inputs, metric), message_distances(messages))


def accuracy(distributions, target_indices) -> float:
    """Fraction of rows whose argmax (lowest index on ties) is the target."""
    probs = np.asarray(distributions)
    targets = np.asarray(target_indices)
    if probs.shape[0] == 0:
        return 0.0
    return float(np.mean(probs.argmax(axis=1) == targets))


def unique_messages(messages) -> int:
    return len({truncate(m) for m in messages})


@dataclass
class Correlation:
    x: str
    y: str
    n: int
    r: float
    p: float

    @property
    def defined(self) -> bool:
        return not math.isnan(self.r)


def pearson_with_p(x, y) -> tuple[float, float]:
    """Pearson r with a two-tailed p-value from Student's t on n - 2 dof."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    cx, cy = x - x.mean(), y - y.mean()
    den = math.sqrt(float(cx @ cx) * float(cy @ cy))
    if den == 0.0:
        warnings.warn("zero variance; correlation undefined", DegenerateCorrelationWarning, stacklevel=2)
        return float("nan"), float("nan")
    r = float(np.clip(cx @ cy / den, -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), n - 2))


def correlation_report(runs: Sequence[dict]) -> list[Correlation]:
    """Correlate final topsim with rsa_sl and with validation accuracy across runs.

    Each run is a mapping with ``topsim``, ``rsa_sl`` and ``val_accuracy``.
    """
    if len(runs) < 3:
        raise ValueError(f"correlation_report: need at least 3 runs, got {len(runs)}")
    topsims = [r["topsim"] for r in runs]
    out = []
    for other in ("rsa_sl", "val_accuracy"):
        r, p = pearson_with_p(topsims, [run[other] for run in runs])
        out.append(Correlation("topsim", other, len(runs), r, p))
    return out


def format_correlations(rows: Sequence[Correlation]) -> str:
    lines = ["x,y,n,r,p"]
    for c in rows:
        r = "undefined" if not c.defined else f"{c.r:.6f}"
        p = "undefined" if not c.defined else f"{c.p:.6g}"
        lines.append(f"{c.x},{c.y},{c.n},{r},{p}")
    return "\n".join(lines) + "\n"
