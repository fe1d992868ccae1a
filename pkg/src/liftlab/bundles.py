"""Euclidean bundles over finite index sets, sections, and pullbacks.

A bundle assigns a nonnegative dimension to every index of some finite set
(vertices or edges of a graph, indexed ``0..n-1``). A section picks one flat
float64 vector of the right length per index. Pulling back along an index map
``m: U -> V`` re-indexes: the pulled-back object at ``u`` is a copy of the
original at ``m(u)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .graphs import VertexMap

__all__ = [
    "Bundle",
    "Section",
    "IndexMismatch",
    "pullback_bundle",
    "pullback_section",
]


class IndexMismatch(ValueError):
    """A section or map was applied over the wrong index set."""


@dataclass(frozen=True)
class Bundle:
    """Dimension per index. Index set is implicitly ``range(len(dims))``."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if any(d < 0 for d in dims):
            raise ValueError("bundle dimensions must be nonnegative")
        object.__setattr__(self, "dims", dims)

    def __len__(self) -> int:
        return len(self.dims)

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    def offsets(self) -> np.ndarray:
        """Start offset of each index's block in the packed flat vector."""
        return np.concatenate(([0], np.cumsum(self.dims))).astype(np.intp)


class Section:
    """One flat float64 vector per index of a bundle."""

    __slots__ = ("bundle", "values")

    def __init__(self, bundle: Bundle, values: Sequence[np.ndarray]):
        if len(values) != len(bundle):
            raise IndexMismatch(
                f"section has {len(values)} values for {len(bundle)} indices"
            )
        converted = []
        for i, v in enumerate(values):
            arr = np.asarray(v, dtype=np.float64).reshape(-1)
            if arr.shape[0] != bundle.dims[i]:
                raise IndexMismatch(
                    f"value at index {i} has length {arr.shape[0]}, "
                    f"bundle expects {bundle.dims[i]}"
                )
            converted.append(arr)
        self.bundle = bundle
        self.values = tuple(converted)

    @classmethod
    def zeros(cls, bundle: Bundle) -> "Section":
        return cls(bundle, [np.zeros(d) for d in bundle.dims])

    @classmethod
    def from_flat(cls, bundle: Bundle, flat: np.ndarray) -> "Section":
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if flat.shape[0] != bundle.total_dim:
            raise IndexMismatch(
                f"flat vector of length {flat.shape[0]} cannot fill a bundle "
                f"of total dimension {bundle.total_dim}"
            )
        off = bundle.offsets()
        return cls(bundle, [flat[off[i] : off[i + 1]].copy() for i in range(len(bundle))])

    def to_flat(self) -> np.ndarray:
        if not self.values:
            return np.zeros(0)
        return np.concatenate(self.values) if self.bundle.total_dim else np.zeros(0)

    def copy(self) -> "Section":
        return Section(self.bundle, [v.copy() for v in self.values])

    def __getitem__(self, i: int) -> np.ndarray:
        return self.values[i]

    def __len__(self) -> int:
        return len(self.values)

    def allclose(self, other: "Section", atol: float = 0.0) -> bool:
        return self.bundle == other.bundle and all(
            np.allclose(a, b, rtol=0.0, atol=atol)
            for a, b in zip(self.values, other.values)
        )


IndexMapLike = Union[VertexMap, Sequence[int]]


def _as_index_map(m: IndexMapLike) -> tuple[tuple[int, ...], int | None]:
    """Return (assignment, target size if known)."""
    if isinstance(m, VertexMap):
        return m.assignment, m.target.n_vertices
    return tuple(int(i) for i in m), None


def pullback_bundle(m: IndexMapLike, bundle: Bundle) -> Bundle:
    """Bundle over the map's source with dims(u) = dims(m(u))."""
    assignment, target_size = _as_index_map(m)
    if target_size is not None and target_size != len(bundle):
        raise IndexMismatch(
            f"bundle has {len(bundle)} indices, map targets {target_size}"
        )
    for u, i in enumerate(assignment):
        if not (0 <= i < len(bundle)):
            raise IndexMismatch(f"index {u} maps to {i}, outside the bundle")
    return Bundle(tuple(bundle.dims[i] for i in assignment))


def pullback_section(m: IndexMapLike, s: Section) -> Section:
    """Section over the map's source with value(u) a copy of value(m(u)).

    ``m`` may be a :class:`VertexMap` (indices are vertices) or any sequence
    of target indices (used for edge bundles, where callers supply the induced
    edge-index map).
    """
    pulled = pullback_bundle(m, s.bundle)
    assignment, _ = _as_index_map(m)
    return Section(pulled, [s.values[i].copy() for i in assignment])
