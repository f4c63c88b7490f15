"""On-disk dataset format and history/horizon sample windows.

Layout of a dataset directory::

    manifest.json
    cases/<case_id>/fields.bin   # little-endian float32 [step][channel][row][col]

Channels are (T, Uz, Uy, active) in kelvin, metres, metres and {0, 1}.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .fields import (CHANNELS, FieldSequence, GridGeometry, NormStats, RegionConfig,
                     normalize_array)
from .synthgen import (MaterialProps, ProcessCase, ProxyParams, SourceParams, source_fields)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TARGETS = {"z": "Uz", "y": "Uy", "Uz": "Uz", "Uy": "Uy"}


class DatasetError(ValueError):
    pass


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


@dataclass
class GeneratedCase:
    sequence: FieldSequence
    process: ProcessCase
    source: SourceParams
    split: str = "train"


@dataclass
class DatasetManifest:
    geometry: GridGeometry
    norm_stats: NormStats
    material: MaterialProps
    proxy: ProxyParams
    substrate_rows: int
    wall_span: int
    cases: list            # list of dicts, see write_dataset
    channels: tuple = CHANNELS
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "geometry": self.geometry.to_dict(),
            "channels": list(self.channels),
            "norm_stats": self.norm_stats.to_dict(),
            "material": vars(self.material).copy(),
            "proxy": vars(self.proxy).copy(),
            "substrate_rows": self.substrate_rows,
            "wall_span": self.wall_span,
            "cases": self.cases,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DatasetError(f"unsupported manifest schema {d.get('schema_version')}")
        if tuple(d["channels"]) != CHANNELS:
            raise DatasetError(f"channel order must be {CHANNELS}, got {d['channels']}")
        return cls(GridGeometry.from_dict(d["geometry"]), NormStats.from_dict(d["norm_stats"]),
                   MaterialProps(**d["material"]), ProxyParams(**d["proxy"]),
                   int(d["substrate_rows"]), int(d["wall_span"]), list(d["cases"]))

    def case_ids(self, split: Optional[str] = None) -> list[str]:
        return [c["case_id"] for c in self.cases if split is None or c["split"] == split]

    def case(self, case_id: str) -> dict:
        for c in self.cases:
            if c["case_id"] == case_id:
                return c
        raise DatasetError(f"no case {case_id!r}")

    def region_config(self, **kw) -> RegionConfig:
        return RegionConfig(substrate_rows=self.substrate_rows, wall_cols=self.wall_span, **kw)


def encode_fields(seq_or_array) -> bytes:
    arr = seq_or_array.stack() if isinstance(seq_or_array, FieldSequence) else seq_or_array
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_fields(raw: bytes, n_frames: int, geom: GridGeometry) -> np.ndarray:
    shape = (n_frames, len(CHANNELS), geom.n_rows, geom.n_cols)
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise DatasetError(f"fields.bin holds {arr.size} floats, expected {shape}")
    return arr.reshape(shape).astype(np.float32)


def write_dataset(cases: Sequence[GeneratedCase], directory, material: MaterialProps,
                  proxy: ProxyParams, substrate_rows: int, wall_span: int) -> DatasetManifest:
    """Write every case and a manifest; norm stats come from the train split only."""
    if not cases:
        raise DatasetError("no cases to write")
    geom = cases[0].sequence.geometry
    for c in cases:
        if c.sequence.geometry != geom:
            raise DatasetError(f"case {c.process.case_id} geometry {c.sequence.geometry} != {geom}")
        if c.split not in ("train", "test"):
            raise DatasetError(f"split must be train or test, got {c.split!r}")
    train = [c.sequence for c in cases if c.split == "train"]
    if not train:
        raise DatasetError("at least one case must be in the train split")
    # stats over the float32 values actually stored
    stats = NormStats.from_sequences([_roundtrip32(s) for s in train])
    root = Path(directory)
    entries = []
    for c in cases:
        rel = f"cases/{c.process.case_id}/fields.bin"
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        raw = encode_fields(c.sequence)
        path.write_bytes(raw)
        entries.append({
            "case_id": c.process.case_id,
            "split": c.split,
            "process": c.process.to_dict(),
            "source": vars(c.source).copy(),
            "n_frames": len(c.sequence),
            "layer_index": list(c.sequence.layer_index),
            "source_track": [None if t is None else [t[0], t[1]] for t in c.sequence.source_track],
            "file": rel,
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
    manifest = DatasetManifest(geom, stats, material, proxy, substrate_rows, wall_span, entries)
    (root / "manifest.json").write_text(_dump_json(manifest.to_dict()))
    return manifest


def _roundtrip32(seq: FieldSequence) -> FieldSequence:
    arr = seq.stack().astype(np.float32).astype(np.float64)
    return FieldSequence.from_stack(seq.geometry, arr, seq.source_track, seq.layer_index)


@dataclass
class CaseArrays:
    """One case in memory: physical stack [N, 4, H, W] plus its torch schedule."""

    case_id: str
    data: np.ndarray
    source_track: list
    layer_index: list
    process: Optional[ProcessCase] = None
    source: Optional[SourceParams] = None

    def __len__(self):
        return self.data.shape[0]

    def to_sequence(self, geom: GridGeometry) -> FieldSequence:
        return FieldSequence.from_stack(geom, self.data.astype(np.float64),
                                        [None if t is None else tuple(t) for t in self.source_track],
                                        self.layer_index)

    @classmethod
    def from_sequence(cls, case_id: str, seq: FieldSequence, **kw) -> "CaseArrays":
        return cls(case_id, seq.stack().astype(np.float32), list(seq.source_track),
                   list(seq.layer_index), **kw)


@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest
    cases: dict = field(default_factory=dict)   # case_id -> CaseArrays

    @property
    def geometry(self) -> GridGeometry:
        return self.manifest.geometry

    @property
    def stats(self) -> NormStats:
        return self.manifest.norm_stats

    def split(self, name: str) -> list[CaseArrays]:
        return [self.cases[c] for c in self.manifest.case_ids(name)]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update((self.root / "manifest.json").read_bytes())
        for c in self.manifest.cases:
            h.update(c["sha256"].encode())
        return h.hexdigest()


def read_dataset(directory) -> Dataset:
    root = Path(directory)
    try:
        manifest = DatasetManifest.from_dict(json.loads((root / "manifest.json").read_text()))
    except FileNotFoundError as e:
        raise DatasetError(f"no manifest.json in {root}") from e
    ds = Dataset(root, manifest)
    for c in manifest.cases:
        raw = (root / c["file"]).read_bytes()
        data = decode_fields(raw, c["n_frames"], manifest.geometry)
        track = [None if t is None else (float(t[0]), float(t[1])) for t in c["source_track"]]
        ds.cases[c["case_id"]] = CaseArrays(c["case_id"], data, track, list(c["layer_index"]),
                                            ProcessCase(**c["process"]), SourceParams(**c["source"]))
    return ds


def rewrite_dataset(ds: Dataset, directory) -> None:
    """Write a loaded dataset back out unchanged."""
    root = Path(directory)
    for c in ds.manifest.cases:
        path = root / c["file"]
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_fields(ds.cases[c["case_id"]].data))
    (root / "manifest.json").write_text(_dump_json(ds.manifest.to_dict()))


# --- samples --------------------------------------------------------------

@dataclass
class PreparedCase:
    """Normalized channels and future source density for fast window slicing."""

    case_id: str
    norm: np.ndarray      # [N, 4, H, W] float32, channel 3 is the active mask
    phys: np.ndarray      # [N, 4, H, W] float32, physical units
    q: np.ndarray         # [N, H, W] float32, W/m^3
    track: list
    layers: list

    def __len__(self):
        return self.norm.shape[0]


def prepare_case(case: CaseArrays, stats: NormStats, geom: GridGeometry) -> PreparedCase:
    norm = np.empty_like(case.data)
    for k, ch in enumerate(("T", "Uz", "Uy")):
        norm[:, k] = normalize_array(case.data[:, k], stats, ch)
    norm[:, 3] = case.data[:, 3]
    src = case.source if case.source is not None else SourceParams()
    thickness = case.process.thickness if case.process is not None else 0.005
    q = source_fields(geom, case.source_track, case.layer_index, src, thickness).astype(np.float32)
    return PreparedCase(case.case_id, norm, case.data, q, list(case.source_track),
                        list(case.layer_index))


@dataclass(frozen=True)
class Sample:
    case: PreparedCase
    anchor: int
    window: int
    horizon: int
    target: str = "Uz"

    @property
    def case_id(self) -> str:
        return self.case.case_id

    @property
    def hist_idx(self) -> np.ndarray:
        return np.maximum(np.arange(self.anchor - self.window + 1, self.anchor + 1), 0)

    @property
    def fut_idx(self) -> np.ndarray:
        return np.arange(self.anchor + 1, self.anchor + 1 + self.horizon)

    @property
    def _uch(self) -> int:
        return 1 if self.target == "Uz" else 2

    @property
    def T_hist(self) -> np.ndarray:
        return self.case.norm[self.hist_idx, 0]

    @property
    def U_hist(self) -> np.ndarray:
        return self.case.norm[self.hist_idx, self._uch]

    @property
    def T_future(self) -> np.ndarray:
        return self.case.norm[self.fut_idx, 0]

    @property
    def U_future(self) -> np.ndarray:
        return self.case.norm[self.fut_idx, self._uch]

    @property
    def active_future(self) -> np.ndarray:
        return self.case.norm[self.fut_idx, 3] > 0.5

    @property
    def q_future(self) -> np.ndarray:
        return self.case.q[self.fut_idx]

    @property
    def track_future(self) -> list:
        return [self.case.track[j] for j in self.fut_idx]


def make_samples(case, i: int, m: int, stride: int = 1, target: str = "Uz",
                 stats: Optional[NormStats] = None,
                 geom: Optional[GridGeometry] = None) -> list[Sample]:
    """Anchors 0, stride, 2*stride, ... with a full m-step future available.

    ``case`` is a PreparedCase, or a FieldSequence plus ``stats``.
    """
    if min(i, m, stride) < 1:
        raise ValueError("i, m and stride must be >= 1")
    if isinstance(case, FieldSequence):
        if stats is None:
            raise ValueError("normalization stats are needed to window a FieldSequence")
        case = prepare_case(CaseArrays.from_sequence("seq", case), stats, case.geometry)
    target = TARGETS[target]
    n = len(case)
    if n <= m:
        log.warning("case %s has %d frames, not enough for a %d-step horizon",
                    case.case_id, n, m)
        return []
    return [Sample(case, t, i, m, target) for t in range(0, n - m, stride)]


def collate(samples: Sequence[Sample], dtype=torch.float32) -> dict:
    def t(x):
        return torch.from_numpy(np.stack(x)).to(dtype)

    return {
        "t_hist": t([s.T_hist for s in samples]),
        "u_hist": t([s.U_hist for s in samples]),
        "t_fut": t([s.T_future for s in samples]),
        "u_fut": t([s.U_future for s in samples]),
        "active_fut": torch.from_numpy(np.stack([s.active_future for s in samples])),
        "q_fut": t([s.q_future for s in samples]),
    }
