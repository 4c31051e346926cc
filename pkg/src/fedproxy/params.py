"""Flat parameter vectors, their named-segment layouts, and vector algebra."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when two parameter vectors (or a vector and a mask) disagree on layout."""


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.stop)


@dataclass(frozen=True)
class ParamLayout:
    """Ordered, contiguous map from segment names to index ranges of a flat vector."""

    segments: tuple[Segment, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        expected = 0
        names = {}
        for i, seg in enumerate(self.segments):
            if seg.offset != expected:
                raise ValueError(f"segment {seg.name!r} starts at {seg.offset}, expected {expected}")
            if seg.length < 0:
                raise ValueError(f"segment {seg.name!r} has negative length")
            if seg.name in names:
                raise ValueError(f"duplicate segment name {seg.name!r}")
            names[seg.name] = i
            expected = seg.stop
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "_index", names)

    @classmethod
    def from_lengths(cls, items: Iterable[tuple[str, int]]) -> "ParamLayout":
        segs = []
        offset = 0
        for name, length in items:
            segs.append(Segment(name, offset, int(length)))
            offset += int(length)
        return cls(tuple(segs))

    @property
    def total_dim(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> Segment:
        try:
            return self.segments[self._index[name]]
        except KeyError:
            raise KeyError(f"no segment named {name!r}") from None

    def __len__(self) -> int:
        return len(self.segments)


@dataclass(frozen=True, eq=False)
class FlatParams:
    """A model's parameters as one contiguous float64 vector plus its layout.

    The stored array is marked read-only; build a new instance to change values.
    """

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if v.shape[0] != self.layout.total_dim:
            raise DimensionError(
                f"values have length {v.shape[0]} but layout total_dim is {self.layout.total_dim}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter vector contains non-finite entries")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, layout: ParamLayout) -> "FlatParams":
        return cls(np.zeros(layout.total_dim), layout)

    def segment(self, name: str) -> np.ndarray:
        return self.values[self.layout[name].slice]

    def replace(self, values: np.ndarray) -> "FlatParams":
        return FlatParams(values, self.layout)

    def copy(self) -> "FlatParams":
        return FlatParams(self.values, self.layout)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __add__(self, other: "FlatParams") -> "FlatParams":
        check_same_layout(self, other)
        return FlatParams(self.values + other.values, self.layout)

    def __sub__(self, other: "FlatParams") -> "FlatParams":
        check_same_layout(self, other)
        return FlatParams(self.values - other.values, self.layout)

    def scale(self, factor: float) -> "FlatParams":
        return FlatParams(self.values * factor, self.layout)

    def norm(self) -> float:
        return math.sqrt(dot(self.values, self.values))

    def equals(self, other: "FlatParams") -> bool:
        """Bitwise equality of values and layouts."""
        return self.layout == other.layout and self.values.tobytes() == other.values.tobytes()


@dataclass(frozen=True, eq=False)
class TaskVector:
    delta: FlatParams
    client_id: int
    round: int

    @property
    def values(self) -> np.ndarray:
        return self.delta.values

    @property
    def layout(self) -> ParamLayout:
        return self.delta.layout


@dataclass(frozen=True, eq=False)
class SubspaceMask:
    keep: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        keep = np.array(self.keep, dtype=bool, copy=True).reshape(-1)
        if keep.shape[0] != self.layout.total_dim:
            raise DimensionError(
                f"mask has length {keep.shape[0]} but layout total_dim is {self.layout.total_dim}"
            )
        keep.flags.writeable = False
        object.__setattr__(self, "keep", keep)

    @classmethod
    def from_indices(cls, layout: ParamLayout, indices: Sequence[int]) -> "SubspaceMask":
        keep = np.zeros(layout.total_dim, dtype=bool)
        keep[np.asarray(indices, dtype=np.int64)] = True
        return cls(keep, layout)

    @property
    def count(self) -> int:
        return int(self.keep.sum())

    def complement(self) -> "SubspaceMask":
        return SubspaceMask(~self.keep, self.layout)


def flat_layout(dim: int, name: str = "w") -> ParamLayout:
    """Single-segment layout, handy for plain vectors."""
    return ParamLayout.from_lengths([(name, dim)])


def as_params(values, layout: ParamLayout | None = None) -> FlatParams:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    return FlatParams(values, layout or flat_layout(values.shape[0]))


def check_same_layout(a, b) -> None:
    if a.layout != b.layout:
        raise DimensionError("layout mismatch")


def dot(a: np.ndarray, b: np.ndarray) -> float:
    # ufunc reduction instead of BLAS so the summation order never depends on threading.
    return float(np.add.reduce(np.multiply(a, b)))


def cosine_similarity(a: FlatParams, b: FlatParams) -> float:
    """Cosine of the angle between two parameter vectors; 0 when either is zero."""
    check_same_layout(a, b)
    sa = float(np.max(np.abs(a.values), initial=0.0))
    sb = float(np.max(np.abs(b.values), initial=0.0))
    if sa == 0.0 or sb == 0.0:
        return 0.0
    # rescale so tiny or huge magnitudes neither underflow nor overflow
    x, y = a.values / sa, b.values / sb
    c = dot(x, y) / (math.sqrt(dot(x, x)) * math.sqrt(dot(y, y)))
    return min(1.0, max(-1.0, c))


def masked_project(p: FlatParams, m: SubspaceMask, keep_inside: bool = True) -> FlatParams:
    check_same_layout(p, m)
    sel = m.keep if keep_inside else ~m.keep
    return FlatParams(np.where(sel, p.values, 0.0), p.layout)


def signs(p: FlatParams | np.ndarray) -> np.ndarray:
    v = p.values if isinstance(p, FlatParams) else np.asarray(p, dtype=np.float64)
    return ((v > 0).astype(np.int8) - (v < 0).astype(np.int8)).astype(np.int64)
