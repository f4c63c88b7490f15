"""Gridded field containers, normalization and region masks.

The native grid is the 2D side plane of a thin wall: rows run bottom-up
(row 0 is the bottom of the substrate band), columns run along the wall.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

CHANNELS = ("T", "Uz", "Uy", "active")
PHYSICAL_CHANNELS = ("T", "Uz", "Uy")


class FieldError(ValueError):
    """Raised on malformed grids, sequences or normalization stats."""


@dataclass(frozen=True)
class GridGeometry:
    n_rows: int = 48
    n_cols: int = 50
    dx: float = 0.002
    dt: float = 1.0

    def __post_init__(self):
        if self.n_rows < 2 or self.n_cols < 2:
            raise FieldError(f"grid must be at least 2x2, got {self.n_rows}x{self.n_cols}")
        if not (self.dx > 0 and self.dt > 0):
            raise FieldError(f"dx and dt must be positive, got dx={self.dx}, dt={self.dt}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def to_dict(self) -> dict:
        return {"n_rows": self.n_rows, "n_cols": self.n_cols, "dx": self.dx, "dt": self.dt}

    @classmethod
    def from_dict(cls, d: dict) -> "GridGeometry":
        return cls(int(d["n_rows"]), int(d["n_cols"]), float(d["dx"]), float(d["dt"]))


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FieldFrame:
    temperature: np.ndarray
    dist_z: np.ndarray
    dist_y: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "temperature", _frozen(self.temperature))
        object.__setattr__(self, "dist_z", _frozen(self.dist_z))
        object.__setattr__(self, "dist_y", _frozen(self.dist_y))
        object.__setattr__(self, "active", _frozen(self.active, dtype=bool))
        shapes = {a.shape for a in (self.temperature, self.dist_z, self.dist_y, self.active)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise FieldError(f"frame grids must share one 2D shape, got {shapes}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.temperature.shape

    def channel(self, name: str) -> np.ndarray:
        return {"T": self.temperature, "Uz": self.dist_z, "Uy": self.dist_y,
                "active": self.active}[name]

    def stack(self) -> np.ndarray:
        """[4, rows, cols] array in channel order (T, Uz, Uy, active)."""
        return np.stack([self.temperature, self.dist_z, self.dist_y,
                         self.active.astype(np.float64)])

    def check_fill_rule(self, t_ambient: float) -> bool:
        off = ~self.active
        return bool(np.all(self.temperature[off] == t_ambient)
                    and np.all(self.dist_z[off] == 0.0)
                    and np.all(self.dist_y[off] == 0.0))


Center = Optional[tuple[float, float]]


@dataclass(frozen=True)
class FieldSequence:
    geometry: GridGeometry
    frames: tuple[FieldFrame, ...]
    source_track: tuple[Center, ...]
    layer_index: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "source_track", tuple(
            None if c is None else (float(c[0]), float(c[1])) for c in self.source_track))
        object.__setattr__(self, "layer_index", tuple(int(x) for x in self.layer_index))
        if not self.frames:
            raise FieldError("sequence needs at least one frame")
        if len(self.source_track) != len(self.frames):
            raise FieldError("source_track length must equal frame count")
        if len(self.layer_index) != len(self.frames):
            raise FieldError("layer_index length must equal frame count")
        if any(b < a for a, b in zip(self.layer_index, self.layer_index[1:])):
            raise FieldError("layer_index must be non-decreasing")
        for f in self.frames:
            if f.shape != self.geometry.shape:
                raise FieldError(f"frame shape {f.shape} != geometry {self.geometry.shape}")

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[FieldFrame]:
        return iter(self.frames)

    def stack(self) -> np.ndarray:
        """[steps, 4, rows, cols] array."""
        return np.stack([f.stack() for f in self.frames])

    @classmethod
    def from_stack(cls, geometry: GridGeometry, data: np.ndarray,
                   source_track: Sequence[Center], layer_index: Sequence[int]) -> "FieldSequence":
        frames = [FieldFrame(d[0], d[1], d[2], d[3] > 0.5) for d in data]
        return cls(geometry, tuple(frames), tuple(source_track), tuple(layer_index))

    def active_is_monotone(self) -> bool:
        return all(np.all(b.active >= a.active) for a, b in zip(self.frames, self.frames[1:]))


@dataclass(frozen=True)
class NormStats:
    """Per-channel [min, max] in physical units."""

    mins: dict
    maxs: dict

    def __post_init__(self):
        for ch in PHYSICAL_CHANNELS:
            if ch not in self.mins or ch not in self.maxs:
                raise FieldError(f"norm stats missing channel {ch!r}")

    def is_constant(self, ch: str) -> bool:
        return not self.maxs[ch] > self.mins[ch]

    def span(self, ch: str) -> float:
        return self.maxs[ch] - self.mins[ch]

    @classmethod
    def from_sequences(cls, seqs: Sequence[FieldSequence]) -> "NormStats":
        mins, maxs = {}, {}
        for ch in PHYSICAL_CHANNELS:
            lo = min(float(np.min([f.channel(ch) for f in s.frames])) for s in seqs)
            hi = max(float(np.max([f.channel(ch) for f in s.frames])) for s in seqs)
            mins[ch], maxs[ch] = lo, hi
        return cls(mins, maxs)

    def to_dict(self) -> dict:
        return {ch: {"min": self.mins[ch], "max": self.maxs[ch]} for ch in PHYSICAL_CHANNELS}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls({k: float(v["min"]) for k, v in d.items()},
                   {k: float(v["max"]) for k, v in d.items()})


def normalize_array(x, stats: NormStats, ch: str):
    """Map physical values of one channel to [0, 1]; constant channels map to 0."""
    if stats.is_constant(ch):
        return np.zeros_like(np.asarray(x, dtype=np.float64))
    return np.clip((np.asarray(x, dtype=np.float64) - stats.mins[ch]) / stats.span(ch), 0.0, 1.0)


def denormalize_array(x, stats: NormStats, ch: str):
    if stats.is_constant(ch):
        return np.full_like(np.asarray(x, dtype=np.float64), stats.mins[ch])
    return stats.mins[ch] + np.asarray(x, dtype=np.float64) * stats.span(ch)


def _map_sequence(seq: FieldSequence, fn) -> FieldSequence:
    frames = []
    for f in seq.frames:
        if f.shape != seq.geometry.shape:
            raise FieldError("dimension mismatch")
        frames.append(FieldFrame(fn(f.temperature, "T"), fn(f.dist_z, "Uz"),
                                 fn(f.dist_y, "Uy"), f.active))
    return replace(seq, frames=tuple(frames))


def normalize(seq: FieldSequence, stats: NormStats) -> FieldSequence:
    return _map_sequence(seq, lambda a, ch: normalize_array(a, stats, ch))


def denormalize(seq: FieldSequence, stats: NormStats) -> FieldSequence:
    return _map_sequence(seq, lambda a, ch: denormalize_array(a, stats, ch))


@dataclass(frozen=True)
class RegionConfig:
    melt_threshold: float = 1750.0
    pool_radius: float = 2.0
    turn_cols: int = 3
    substrate_rows: int = 5
    # number of columns spanned by the wall, counted from column 0; None = all
    wall_cols: Optional[int] = None


@dataclass(frozen=True)
class RegionMasks:
    molten: np.ndarray
    deposited: np.ndarray
    roi: np.ndarray
    overall: np.ndarray

    def as_dict(self) -> dict:
        return {"overall": self.overall, "molten": self.molten,
                "deposited": self.deposited, "roi": self.roi}


def build_region_masks(frame: FieldFrame, source: Center = None,
                       cfg: RegionConfig = RegionConfig()) -> RegionMasks:
    n_rows, n_cols = frame.shape
    active = frame.active
    molten = active & (frame.temperature >= cfg.melt_threshold)
    if source is not None:
        rr, cc = np.mgrid[0:n_rows, 0:n_cols]
        near = np.hypot(rr - source[0], cc - source[1]) <= cfg.pool_radius
        molten = molten | (active & near)
    deposited = active & ~molten
    wall_cols = n_cols if cfg.wall_cols is None else cfg.wall_cols
    roi = np.zeros(frame.shape, dtype=bool)
    roi[cfg.substrate_rows:, max(0, wall_cols - cfg.turn_cols):wall_cols] = True
    overall = np.ones(frame.shape, dtype=bool)
    return RegionMasks(molten, deposited, roi, overall)
