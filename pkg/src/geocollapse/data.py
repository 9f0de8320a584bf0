"""Balanced labeled datasets: synthetic Gaussian mixtures, IDX files, splits,
and few-shot episode sampling.

Every constructor returns a balanced dataset (equal per-class counts); the
propositions checked downstream all assume balance, so it is enforced here
rather than at each call site.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class ContractError(ValueError):
    """A call violates an operation's precondition."""


class IdxFormatError(ValueError):
    """Malformed IDX file (bad magic, truncated payload, count mismatch)."""


@dataclass
class LabeledDataset:
    """Input matrix X (m x d), integer labels y in [0, k), class count k."""

    X: np.ndarray
    y: np.ndarray
    k: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.ndim != 1 or self.X.shape[0] != self.y.shape[0]:
            raise ContractError("X must be (m, d) with one label per row")
        if not np.isfinite(self.X).all():
            raise ContractError("non-finite entries in X")
        if self.y.size == 0:
            raise ContractError("empty dataset")
        if self.y.min() < 0 or self.y.max() >= self.k:
            raise ContractError(f"labels must lie in [0, {self.k})")
        counts = np.bincount(self.y, minlength=self.k)
        if counts.min() != counts.max():
            raise ContractError(f"unbalanced classes: counts {counts.tolist()}")

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def per_class(self) -> int:
        return self.m // self.k


@dataclass(frozen=True)
class EpisodeSpec:
    """Few-shot episode layout: n_way classes, n_shot support and n_query query
    examples per class, n_episodes draws."""

    n_way: int
    n_shot: int
    n_query: int
    n_episodes: int

    def __post_init__(self):
        for name in ("n_way", "n_shot", "n_query", "n_episodes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint source/target class id sets."""

    source_classes: tuple[int, ...]
    target_classes: tuple[int, ...]

    def __post_init__(self):
        src = tuple(int(c) for c in self.source_classes)
        tgt = tuple(int(c) for c in self.target_classes)
        object.__setattr__(self, "source_classes", src)
        object.__setattr__(self, "target_classes", tgt)
        if not src or not tgt:
            raise ContractError("source and target class lists must be nonempty")
        if set(src) & set(tgt):
            raise ContractError("source and target classes overlap")
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise ContractError("duplicate class ids in split")


def gen_gaussian_mixture(
    k: int,
    d: int,
    mean_scale: float,
    sigma: float,
    m_per_class: int,
    seed: int,
) -> LabeledDataset:
    """Isotropic Gaussian mixture with class means uniform on the sphere of
    radius mean_scale.  Deterministic given seed; rows are grouped by class."""
    if k < 1 or d < 1 or m_per_class < 1:
        raise ContractError("k, d, m_per_class must be >= 1")
    if sigma <= 0:
        raise ContractError("sigma must be positive")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(k, d))
    means = mean_scale * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    X = np.empty((k * m_per_class, d))
    y = np.repeat(np.arange(k), m_per_class)
    for c in range(k):
        X[c * m_per_class:(c + 1) * m_per_class] = means[c] + sigma * rng.normal(
            size=(m_per_class, d)
        )
    return LabeledDataset(X, y, k)


def _read_idx_header(data: bytes, path, magic_expected: int, n_dims: int):
    header = 4 * (1 + n_dims)
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated header")
    fields = struct.unpack(f">{1 + n_dims}i", data[:header])
    if fields[0] != magic_expected:
        raise IdxFormatError(
            f"{path}: bad magic 0x{fields[0]:08x}, expected 0x{magic_expected:08x}"
        )
    return fields[1:], data[header:]


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Parse a big-endian IDX image/label file pair.

    Pixels are scaled to [0, 1] by dividing by 255 and flattened row-major.
    Imbalanced label sets are trimmed to the minimum class count, keeping the
    earliest file occurrences of each class; distinct label values are
    re-indexed densely in sorted order.
    """
    with open(images_path, "rb") as fh:
        img_data = fh.read()
    with open(labels_path, "rb") as fh:
        lbl_data = fh.read()

    (n_img, rows, cols), pixels = _read_idx_header(
        img_data, images_path, IDX_IMAGE_MAGIC, 3
    )
    (n_lbl,), raw_labels = _read_idx_header(lbl_data, labels_path, IDX_LABEL_MAGIC, 1)
    if n_img != n_lbl:
        raise IdxFormatError(
            f"image count {n_img} does not match label count {n_lbl}"
        )
    if len(pixels) != n_img * rows * cols:
        raise IdxFormatError(f"{images_path}: payload size mismatch")
    if len(raw_labels) != n_lbl:
        raise IdxFormatError(f"{labels_path}: payload size mismatch")

    X = np.frombuffer(pixels, dtype=np.uint8).reshape(n_img, rows * cols) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)

    values, dense = np.unique(labels, return_inverse=True)
    counts = np.bincount(dense)
    keep_n = int(counts.min())
    if counts.min() != counts.max():
        keep = np.zeros(n_img, dtype=bool)
        for c in range(len(values)):
            idx = np.flatnonzero(dense == c)
            keep[idx[:keep_n]] = True
        log.warning(
            "imbalanced IDX classes %s trimmed to %d examples each",
            counts.tolist(), keep_n,
        )
        X, dense = X[keep], dense[keep]
    return LabeledDataset(X, dense, len(values))


def split_classes(ds: LabeledDataset, split: ClassSplit) -> tuple[LabeledDataset, LabeledDataset]:
    """Partition a dataset into source/target class pools, each re-indexed
    densely from 0 (sorted original id order).  Row order is preserved."""
    all_ids = set(split.source_classes) | set(split.target_classes)
    if not all_ids <= set(range(ds.k)):
        raise ContractError(f"split ids must lie in [0, {ds.k})")

    def take(ids):
        ids = sorted(ids)
        remap = {c: i for i, c in enumerate(ids)}
        mask = np.isin(ds.y, ids)
        labels = np.array([remap[c] for c in ds.y[mask]], dtype=np.int64)
        return LabeledDataset(ds.X[mask], labels, len(ids))

    return take(split.source_classes), take(split.target_classes)


def stratified_split(
    ds: LabeledDataset, test_fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Per-class train/test split with identical per-class counts."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractError("test_fraction must lie in (0, 1)")
    n_test = int(round(test_fraction * ds.per_class))
    if n_test < 1:
        raise ContractError(
            f"test_fraction {test_fraction} yields zero test examples per class"
        )
    if n_test >= ds.per_class:
        raise ContractError(
            f"test_fraction {test_fraction} leaves no train examples per class"
        )
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.k):
        idx = np.flatnonzero(ds.y == c)
        perm = rng.permutation(idx)
        test_idx.append(np.sort(perm[:n_test]))
        train_idx.append(np.sort(perm[n_test:]))
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    return (
        LabeledDataset(ds.X[train_idx], ds.y[train_idx], ds.k),
        LabeledDataset(ds.X[test_idx], ds.y[test_idx], ds.k),
    )


def sample_episode(
    target: LabeledDataset, spec: EpisodeSpec, rng: np.random.Generator
) -> tuple[LabeledDataset, LabeledDataset]:
    """Draw one few-shot episode: n_way classes without replacement, then
    n_shot support and n_query query rows per class without replacement.
    Episode labels are re-indexed 0..n_way-1 in draw order."""
    if spec.n_way > target.k:
        raise ContractError(f"n_way {spec.n_way} exceeds class count {target.k}")
    need = spec.n_shot + spec.n_query
    if need > target.per_class:
        raise ContractError(
            f"need {need} examples per class, only {target.per_class} available"
        )
    classes = rng.choice(target.k, size=spec.n_way, replace=False)
    sup_rows, qry_rows, sup_y, qry_y = [], [], [], []
    for pos, c in enumerate(classes):
        idx = np.flatnonzero(target.y == c)
        sel = rng.choice(idx, size=need, replace=False)
        sup_rows.append(target.X[sel[: spec.n_shot]])
        qry_rows.append(target.X[sel[spec.n_shot:]])
        sup_y.append(np.full(spec.n_shot, pos, dtype=np.int64))
        qry_y.append(np.full(spec.n_query, pos, dtype=np.int64))
    support = LabeledDataset(np.concatenate(sup_rows), np.concatenate(sup_y), spec.n_way)
    query = LabeledDataset(np.concatenate(qry_rows), np.concatenate(qry_y), spec.n_way)
    return support, query
