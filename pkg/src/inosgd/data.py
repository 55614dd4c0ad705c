"""Datasets, owner partitions, Poisson sampling and UPE dataset construction."""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .accounting import MechanismParams

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class ConfigurationError(ValueError):
    pass


class IdxHeaderError(ValueError):
    """Bad magic number or malformed IDX header."""


class IdxTruncatedError(ValueError):
    """IDX payload shorter than its header promises."""


class IdxCountMismatch(ValueError):
    """Image and label files disagree on the record count."""


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2:
            raise ValueError("features must be a 2-D array (records x dimension)")
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError("features and labels must have the same length")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class OwnerPartition:
    """Owner and group of every datum; owners are disjoint by construction."""

    owner_of: np.ndarray
    group_of: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.owner_of, dtype=np.int64)
        g = np.asarray(self.group_of, dtype=np.int64)
        if o.ndim != 1 or o.shape != g.shape:
            raise ValueError("owner_of and group_of must be 1-D and equally long")
        object.__setattr__(self, "owner_of", o)
        object.__setattr__(self, "group_of", g)

    @classmethod
    def by_owner(cls, owner_of) -> "OwnerPartition":
        o = np.asarray(owner_of, dtype=np.int64)
        return cls(o, o.copy())

    def __len__(self):
        return len(self.owner_of)

    def owners(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unique(self.owner_of))

    def groups(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unique(self.group_of))

    def sizes(self) -> dict[int, int]:
        ids, counts = np.unique(self.owner_of, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def members(self, owner_id: int) -> np.ndarray:
        return np.flatnonzero(self.owner_of == owner_id)


def owner_partition_from_manifest(labels, manifest: Mapping[int, Sequence[int]]) -> OwnerPartition:
    """Assign owners by class label; ``manifest`` maps owner id to its labels.

    Groups equal owners. Every label must belong to exactly one owner.
    """
    labels = np.asarray(labels, dtype=np.int64)
    lookup: dict[int, int] = {}
    for owner, classes in manifest.items():
        for c in classes:
            if int(c) in lookup:
                raise ConfigurationError(f"label {c} assigned to owners {lookup[int(c)]} and {owner}")
            lookup[int(c)] = int(owner)
    missing = sorted(set(np.unique(labels).tolist()) - set(lookup))
    if missing:
        raise ConfigurationError(f"labels {missing} have no owner in the manifest")
    owner_of = np.vectorize(lookup.__getitem__, otypes=[np.int64])(labels) if len(labels) else labels
    return OwnerPartition.by_owner(owner_of)


def load_owner_manifest(path: str | os.PathLike) -> dict[int, list[int]]:
    with open(path) as fh:
        raw = json.load(fh)
    return {int(k): [int(c) for c in v] for k, v in raw.items()}


# -- sampling ---------------------------------------------------------------------


@dataclass(frozen=True)
class SampledBatch:
    indices: np.ndarray
    owners: np.ndarray

    def __len__(self):
        return len(self.indices)


def _rates(partition: OwnerPartition, params: MechanismParams) -> np.ndarray:
    q_of = {}
    for n in partition.owners():
        try:
            q_of[n] = params.owner(n).q
        except KeyError:
            raise ConfigurationError(f"owner {n} has no sampling rate") from None
    return np.vectorize(q_of.__getitem__, otypes=[float])(partition.owner_of)


def poisson_sample(partition: OwnerPartition, params: MechanismParams, rng: np.random.Generator) -> SampledBatch:
    """Include each datum independently with its owner's rate; keeps dataset order."""
    q = _rates(partition, params)
    keep = np.flatnonzero(rng.random(len(q)) < q)
    return SampledBatch(keep, partition.owner_of[keep])


def build_upe_dataset(
    D: LabeledDataset,
    partition: OwnerPartition,
    params: MechanismParams,
    script_T: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Union of ``script_T`` Poisson batches, with repetition.

    Returns the index multiset (datum indices repeated by multiplicity, in
    batch order) and the uniform rate ``1 / script_T``. Use
    ``D.subset(indices)`` to materialize features.
    """
    if script_T < 1:
        raise ValueError("script_T must be at least 1")
    if len(D) != len(partition):
        raise ValueError("dataset and partition sizes differ")
    parts = [poisson_sample(partition, params, rng).indices for _ in range(script_T)]
    return np.concatenate(parts) if parts else np.zeros(0, np.int64), 1.0 / script_T


# -- synthetic data ---------------------------------------------------------------


def gen_two_group_synthetic(
    n_per_group: int,
    dimension: int = 2,
    separation: float = 2.0,
    rng: np.random.Generator | None = None,
    owner_ids: tuple[int, int] = (1, 2),
) -> tuple[LabeledDataset, OwnerPartition]:
    """Two unit-covariance Gaussian blobs at +-separation/2 on the first axis.

    Class 0 is owned by ``owner_ids[0]`` and class 1 by ``owner_ids[1]``;
    groups equal owners. Records alternate between the classes.
    """
    if n_per_group < 1:
        raise ValueError("n_per_group must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    X = rng.standard_normal((2 * n_per_group, dimension))
    y = np.tile([0, 1], n_per_group)
    X[:, 0] += np.where(y == 1, separation / 2, -separation / 2)
    owners = np.where(y == 0, owner_ids[0], owner_ids[1])
    return LabeledDataset(X, y), OwnerPartition.by_owner(owners)


# -- IDX files ----------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(blob: bytes, magic: int, ndim: int, what: str) -> tuple[tuple[int, ...], memoryview]:
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise IdxHeaderError(f"{what}: file too short for an IDX header")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise IdxHeaderError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, blob[4:head])
    need = int(np.prod(dims, dtype=np.int64))
    payload = memoryview(blob)[head:]
    if len(payload) < need:
        raise IdxTruncatedError(f"{what}: payload has {len(payload)} bytes, header promises {need}")
    return dims, payload


def load_idx_images(images_path, labels_path, limit: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1], images flattened."""
    if limit is not None and limit < 0:
        raise ValueError("limit must be non-negative")
    (n_img, rows, cols), pix = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, "images")
    (n_lab,), lab = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, "labels")
    if n_img != n_lab:
        raise IdxCountMismatch(f"{n_img} images but {n_lab} labels")
    n = n_img if limit is None else min(limit, n_img)
    X = np.frombuffer(pix, dtype=np.uint8, count=n * rows * cols).reshape(n, rows * cols) / 255.0
    y = np.frombuffer(lab, dtype=np.uint8, count=n).astype(np.int64)
    if np.any(y > 9):
        raise IdxHeaderError("labels outside 0-9")
    return LabeledDataset(X, y)
