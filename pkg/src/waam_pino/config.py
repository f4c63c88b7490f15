"""JSON run/generation configs, validated against ``config.schema.json``."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from .fields import GridGeometry
from .models import ModelSpec
from .synthgen import MaterialProps, ProxyParams


def config_schema() -> dict:
    return json.loads(resources.files("waam_pino").joinpath("config.schema.json").read_text())


def _validate(doc: dict, definition: str) -> None:
    schema = config_schema()
    jsonschema.validate(doc, {**schema, "$ref": f"#/$defs/{definition}"})


@dataclass
class GenConfig:
    """Which cases to simulate and how to split them."""

    geometry: GridGeometry = field(default_factory=GridGeometry)
    train_cases: list = field(default_factory=lambda: [1, 2, 4, 5, 8, 9])
    test_cases: list = field(default_factory=lambda: [12, 20])
    n_layers: int = 6
    dwell: float = 60.0
    wall_span: Optional[int] = None
    substrate_rows: int = 5
    watts_per_wfs: float = 200.0
    material: MaterialProps = field(default_factory=MaterialProps)
    proxy: ProxyParams = field(default_factory=ProxyParams)
    workers: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"] = self.geometry.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        _validate(d, "gen")
        d = dict(d)
        if "geometry" in d:
            d["geometry"] = GridGeometry.from_dict({**GridGeometry().to_dict(), **d["geometry"]})
        if "material" in d:
            d["material"] = MaterialProps(**d["material"])
        if "proxy" in d:
            d["proxy"] = ProxyParams(**d["proxy"])
        return cls(**d)


@dataclass
class RunConfig:
    dataset: str = "data"
    model: ModelSpec = field(default_factory=ModelSpec)
    target: str = "z"
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 300
    seed: int = 0
    out: str = "runs/default"
    deterministic: bool = True
    train_stride: int = 1
    eval_stride: int = 5
    sign_q: float = -1.0
    kinds: list = field(default_factory=lambda: ["cnn", "st_convlstm", "deeponet_rnn",
                                                 "pideeponet_rnn"])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _validate(d, "run")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelSpec.from_dict(d["model"])
        return cls(**d)

    def with_kind(self, kind: str) -> "RunConfig":
        spec = ModelSpec.from_dict({**self.model.to_dict(), "kind": kind, "beta": None,
                                    "lam": None})
        return replace(self, model=spec)


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())
