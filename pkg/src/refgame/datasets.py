"""Input data: embedding files, synthetic attribute data, and fixed evaluation pairs.

Embedding file layout (little-endian)::

    b"EMB1" | u32 n | u32 d | n*d float32, row-major

Labels live in a CSV with header ``index,category`` and rows 0..n-1 in order.
"""

from __future__ import annotations

import csv
import itertools
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"EMB1"
TRAIN, VALIDATION = "train", "validation"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_attributes: int = 4
    n_values: int = 4
    items_per_category: int = 300
    dim: int = 64
    noise: float = 0.05
    projection_seed: int = 0

    def __post_init__(self):
        if self.n_attributes < 2 or self.n_values < 2:
            raise ValueError("synthetic data needs at least 2 attributes with 2 values each")
        if self.items_per_category < 2:
            raise ValueError("items_per_category must be at least 2")

    def projection(self) -> np.ndarray:
        """Fixed map from concatenated one-hot attributes to embeddings."""
        rng = np.random.default_rng(self.projection_seed)
        width = self.n_attributes * self.n_values
        return rng.normal(size=(width, self.dim)) / np.sqrt(self.n_attributes)

    def embed(self, attributes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        attributes = np.atleast_2d(attributes)
        onehot = np.zeros((attributes.shape[0], self.n_attributes * self.n_values))
        cols = attributes + self.n_values * np.arange(self.n_attributes)
        np.put_along_axis(onehot, cols, 1.0, axis=1)
        clean = onehot @ self.projection()
        if self.noise == 0:
            return clean
        return clean + rng.normal(scale=self.noise, size=clean.shape)


@dataclass
class EmbeddingDataset:
    embeddings: np.ndarray
    categories: np.ndarray
    split: np.ndarray
    category_names: list[str] = field(default_factory=list)
    attributes: np.ndarray | None = None
    spec: SyntheticSpec | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.categories = np.asarray(self.categories, dtype=np.int64)
        self.split = np.asarray(self.split)
        if len(self.categories) != len(self.embeddings) or len(self.split) != len(self.embeddings):
            raise DatasetError("embeddings, categories and split must have the same length")

    def __len__(self) -> int:
        return len(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def indices(self, split: str) -> np.ndarray:
        if split not in (TRAIN, VALIDATION):
            raise DatasetError(f"unknown split {split!r}")
        return np.flatnonzero(self.split == split)


def stratified_split(categories: np.ndarray, rng: np.random.Generator,
                     train_fraction: float = 0.8) -> np.ndarray:
    """Tag each item train/validation, taking ``train_fraction`` of every category."""
    categories = np.asarray(categories)
    split = np.full(len(categories), VALIDATION, dtype=object)
    for cat in np.unique(categories):
        members = rng.permutation(np.flatnonzero(categories == cat))
        n_train = int(round(train_fraction * len(members)))
        split[members[:n_train]] = TRAIN
    split = split.astype(str)
    for cat in np.unique(categories):
        if np.sum((categories == cat) & (split == TRAIN)) < 2:
            raise DatasetError(f"category {cat!r} has fewer than 2 training items")
    return split


# embedding files


def save_embeddings(path: str | os.PathLike, embeddings: np.ndarray) -> None:
    arr = np.ascontiguousarray(embeddings, dtype="<f4")
    if arr.ndim != 2:
        raise DatasetError(f"embeddings must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(arr.tobytes())


def read_embeddings(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DatasetError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise DatasetError(f"{path}: truncated header")
    n, d = struct.unpack("<II", blob[4:12])
    if len(blob) - 12 != 4 * n * d:
        raise DatasetError(f"{path}: header says {n}x{d} floats but payload has {len(blob) - 12} bytes")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(n, d).astype(np.float32)


def save_labels(path: str | os.PathLike, categories: Sequence) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "category"])
        for i, cat in enumerate(categories):
            writer.writerow([i, cat])


def read_labels(path: str | os.PathLike) -> list[str]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:2] != ["index", "category"]:
            raise DatasetError(f"{path}: header must start with 'index,category'")
        labels = []
        for expected, row in enumerate(reader):
            if int(row["index"]) != expected:
                raise DatasetError(f"{path}: row {expected} has index {row['index']}")
            labels.append(row["category"])
    return labels


def load_embeddings(path, labels_path, seed: int = 0, train_fraction: float = 0.8) -> EmbeddingDataset:
    """Load an EMB1 file plus its labels and split it 80/20 per category."""
    X = read_embeddings(path)
    labels = read_labels(labels_path)
    if len(labels) != len(X):
        raise DatasetError(f"{len(labels)} labels for {len(X)} embeddings")
    names = sorted(set(labels))
    lookup = {name: k for k, name in enumerate(names)}
    categories = np.array([lookup[c] for c in labels], dtype=np.int64)
    split = stratified_split(categories, np.random.default_rng(seed), train_fraction)
    return EmbeddingDataset(X.astype(np.float64), categories, split, names)


def select_subset(categories: Sequence[str], groups: Sequence[str], min_count: int = 100,
                  per_group: int = 100, seed: int = 0) -> np.ndarray:
    """Subset recipe for labelled image collections.

    Keeps categories with more than ``min_count`` items, then samples up to
    ``per_group`` items from each group (e.g. supercategory) of what remains.
    Returns sorted indices into the original collection.
    """
    categories = np.asarray(categories)
    groups = np.asarray(groups)
    names, counts = np.unique(categories, return_counts=True)
    keep = np.isin(categories, names[counts > min_count])
    rng = np.random.default_rng(seed)
    chosen = []
    for group in np.unique(groups[keep]):
        members = np.flatnonzero(keep & (groups == group))
        take = min(per_group, len(members))
        chosen.extend(rng.choice(members, size=take, replace=False))
    return np.sort(np.array(chosen, dtype=np.int64))


# synthetic data


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator) -> EmbeddingDataset:
    """Attribute tuples embedded by the SyntheticSpec's fixed projection, plus noise.

    Attribute 0 is the category.  Within a category the remaining attribute
    combinations are distinct whenever there are enough of them.
    """
    k, v = spec.n_attributes, spec.n_values
    combos = np.array(list(itertools.product(range(v), repeat=k - 1)), dtype=np.int64)
    rows = []
    for cat in range(v):
        replace = spec.items_per_category > len(combos)
        picks = rng.choice(len(combos), size=spec.items_per_category, replace=replace)
        block = np.column_stack([np.full(len(picks), cat), combos[picks]])
        rows.append(block)
    attributes = np.vstack(rows)
    embeddings = spec.embed(attributes, rng)
    categories = attributes[:, 0].copy()
    split = stratified_split(categories, rng)
    return EmbeddingDataset(embeddings, categories, split, [str(c) for c in range(v)],
                            attributes=attributes, spec=spec)


# round sampling


@dataclass
class RoundInputs:
    target_ids: np.ndarray          # [batch]
    candidate_ids: np.ndarray       # [batch x n_candidates]
    target_index: np.ndarray        # [batch]
    target_embeddings: np.ndarray   # [batch x d]
    candidate_embeddings: np.ndarray  # [batch x n_candidates x d]

    @property
    def batch_size(self) -> int:
        return len(self.target_index)


def sample_round_batch(ds: EmbeddingDataset, target_ids: np.ndarray, split: str,
                       n_candidates: int, rng: np.random.Generator) -> RoundInputs:
    """Pair each target with same-category distractors from ``split`` and shuffle."""
    pool = ds.indices(split)
    by_cat = {c: pool[ds.categories[pool] == c] for c in np.unique(ds.categories[pool])}
    candidates = np.empty((len(target_ids), n_candidates), dtype=np.int64)
    target_index = np.empty(len(target_ids), dtype=np.int64)
    for row, t in enumerate(target_ids):
        others = by_cat.get(ds.categories[t], np.array([], dtype=np.int64))
        others = others[others != t]
        if len(others) < n_candidates - 1:
            raise DatasetError(
                f"category {ds.categories[t]} has {len(others)} distractors in {split}, "
                f"need {n_candidates - 1}")
        distractors = rng.choice(others, size=n_candidates - 1, replace=False)
        order = rng.permutation(n_candidates)
        row_ids = np.concatenate(([t], distractors))[order]
        candidates[row] = row_ids
        target_index[row] = int(np.flatnonzero(order == 0)[0])
    target_ids = np.asarray(target_ids, dtype=np.int64)
    return RoundInputs(target_ids, candidates, target_index,
                       ds.embeddings[target_ids], ds.embeddings[candidates])


def epoch_batches(ds: EmbeddingDataset, split: str, batch_size: int, n_candidates: int,
                  rng: np.random.Generator, shuffle: bool = True,
                  min_batch: int = 3) -> Iterator[RoundInputs]:
    """Targets without replacement over the split; distractors drawn per batch.

    A trailing batch smaller than ``min_batch`` is dropped.
    """
    ids = ds.indices(split)
    if len(ids) == 0:
        raise DatasetError(f"split {split!r} is empty")
    if shuffle:
        ids = rng.permutation(ids)
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        if len(chunk) < min_batch:
            continue
        yield sample_round_batch(ds, chunk, split, n_candidates, rng)


# fixed pairs


@dataclass
class FixedPairSet:
    first: np.ndarray    # [n_pairs x d]
    second: np.ndarray   # [n_pairs x d]
    name: str = "pairs"
    first_attributes: np.ndarray | None = None
    second_attributes: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.first)

    def items(self) -> np.ndarray:
        return np.vstack([self.first, self.second])

    def rounds(self, both_directions: bool = True) -> RoundInputs:
        """Candidates are always (first, second); the target alternates."""
        n = len(self.first)
        cands = np.stack([self.first, self.second], axis=1)
        pair_ids = np.stack([np.arange(n), n + np.arange(n)], axis=1)
        if both_directions:
            cands = np.concatenate([cands, cands])
            pair_ids = np.concatenate([pair_ids, pair_ids])
            target_index = np.concatenate([np.zeros(n, np.int64), np.ones(n, np.int64)])
        else:
            target_index = np.zeros(n, np.int64)
        rows = np.arange(len(target_index))
        return RoundInputs(pair_ids[rows, target_index], pair_ids, target_index,
                           cands[rows, target_index], cands)


def noise_pairs(n: int, dim: int, rng: np.random.Generator) -> FixedPairSet:
    return FixedPairSet(rng.normal(size=(n, dim)), rng.normal(size=(n, dim)), name="noise")


def winoground_analog(spec: SyntheticSpec, n_pairs: int, rng: np.random.Generator) -> FixedPairSet:
    """Pairs with the same attribute values in a different arrangement.

    The second item swaps the values of two attribute positions that hold
    different values in the first, so both share one value multiset.
    """
    if spec.n_values < 2 or spec.n_attributes < 2:
        raise DatasetError("need at least 2 attributes and 2 values to form a swap")
    k = spec.n_attributes
    first = np.empty((n_pairs, k), dtype=np.int64)
    second = np.empty((n_pairs, k), dtype=np.int64)
    for p in range(n_pairs):
        while True:
            tup = rng.integers(spec.n_values, size=k)
            if len(set(tup.tolist())) > 1:
                break
        while True:
            i, j = rng.choice(k, size=2, replace=False)
            if tup[i] != tup[j]:
                break
        swapped = tup.copy()
        swapped[i], swapped[j] = tup[j], tup[i]
        first[p], second[p] = tup, swapped
    return FixedPairSet(spec.embed(first, rng), spec.embed(second, rng), name="winoground",
                        first_attributes=first, second_attributes=second)
