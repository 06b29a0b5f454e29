"""Embedding store, contrastive loss and appearance costs."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)


def _as_vector(v) -> np.ndarray:
    return np.asarray(v, dtype=float).ravel()


def _check_dims(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"embedding dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def contrastive_loss(v_i, v_j, same_label: bool, margin: float) -> float:
    """Pairwise contrastive loss on two embeddings.

    Similar pairs pay their squared distance. Dissimilar pairs pay
    ``max(0, margin - d**2) ** 2``, with the hinge squared as a whole; this
    differs from the Hadsell et al. form where the distance (not its square)
    enters the hinge.
    """
    a, b = _as_vector(v_i), _as_vector(v_j)
    _check_dims(a, b)
    if margin <= 0:
        raise ValueError("margin must be positive")
    sq = float(np.sum((a - b) ** 2))
    if same_label:
        return sq
    return max(0.0, margin - sq) ** 2


def appearance_cost(v_i, v_j) -> float:
    """Euclidean distance between embeddings, in [0, 2] for unit vectors."""
    a, b = _as_vector(v_i), _as_vector(v_j)
    _check_dims(a, b)
    return float(np.linalg.norm(a - b))


def mean_embedding(vectors: Sequence) -> np.ndarray:
    """Arithmetic mean re-normalized to unit length.

    A zero mean cannot be normalized; the first vector is returned instead.
    """
    if len(vectors) == 0:
        raise ValueError("mean of an empty embedding list")
    arr = np.array([_as_vector(v) for v in vectors])
    if arr.ndim != 2:
        raise ValueError("embeddings have differing dimensions")
    mean = arr.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        log.warning("zero-norm mean embedding; falling back to first member")
        return arr[0].copy()
    return mean / norm


class EmbeddingStore(Mapping):
    """Read-only map from detection id to embedding vector.

    Vectors are unit-normalized on construction unless ``normalize`` is False.
    """

    def __init__(self, vectors: Mapping[str, Sequence[float]], normalize: bool = True, dim: int | None = None):
        data = {}
        for key, vec in vectors.items():
            arr = _as_vector(vec)
            if dim is None:
                dim = arr.shape[0]
            if arr.shape[0] != dim:
                raise ValueError(f"embedding {key!r} has dimension {arr.shape[0]}, expected {dim}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"embedding {key!r} has non-finite entries")
            if normalize:
                norm = np.linalg.norm(arr)
                if norm == 0:
                    raise ValueError(f"embedding {key!r} is the zero vector")
                arr = arr / norm
            arr.flags.writeable = False
            data[str(key)] = arr
        self._data = data
        self.dim = dim
        self.normalized = normalize

    def __getitem__(self, key: str) -> np.ndarray:
        return self._data[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)
