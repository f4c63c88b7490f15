"""Evaluation metrics and the horizon-segmented report."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Optional, Sequence

import jsonschema
import numpy as np
from scipy.ndimage import correlate
from scipy.special import kl_div

REGIONS = ("overall", "molten", "deposited", "roi")
KL_EPS = 1e-8


class MetricError(ValueError):
    pass


def mae_and_max(u_hat, u_true, mask=None) -> tuple[float, float]:
    """Mean and max absolute error over ``mask``, in the units of the inputs."""
    u_hat, u_true = np.asarray(u_hat, dtype=np.float64), np.asarray(u_true, dtype=np.float64)
    if u_hat.shape != u_true.shape:
        raise MetricError(f"shape mismatch {u_hat.shape} vs {u_true.shape}")
    mask = np.ones(u_hat.shape, dtype=bool) if mask is None else np.broadcast_to(mask, u_hat.shape)
    if not mask.any():
        raise MetricError("empty mask")
    err = np.abs(u_hat - u_true)[mask]
    return float(err.mean()), float(err.max())


def kl_divergence(u_true, u_hat, eps: float = KL_EPS) -> float:
    """KL(P || Q) in nats between two non-negative fields normalized to sum 1."""
    p = np.asarray(u_true, dtype=np.float64).ravel() + eps
    q = np.asarray(u_hat, dtype=np.float64).ravel() + eps
    p, q = p / p.sum(), q / q.sum()
    # kl_div(p, q) = p log(p/q) - p + q >= 0 termwise; the extra terms sum to 0
    return float(kl_div(p, q).sum())


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0, win: int = 7, sigma: float = 1.5) -> float:
    """Mean single-scale SSIM with a Gaussian window over valid positions.

    Frames smaller than the window fall back to one global window.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    if min(a.shape) < win:
        mu_a, mu_b = a.mean(), b.mean()
        va, vb = ((a - mu_a) ** 2).mean(), ((b - mu_b) ** 2).mean()
        cov = ((a - mu_a) * (b - mu_b)).mean()
    else:
        w = gaussian_window(win, sigma)
        r = win // 2

        def filt(x):
            return correlate(x, w, mode="constant")[r:-r, r:-r]

        mu_a, mu_b = filt(a), filt(b)
        va = filt(a * a) - mu_a * mu_a
        vb = filt(b * b) - mu_b * mu_b
        cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
    return float(np.clip(np.mean(s), -1.0, 1.0))


def error_gradient_norm(u_hat, u_true, region) -> float:
    """Mean |grad |u_hat - u_true|| over ``region``, grid-index units."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise MetricError("empty region")
    e = np.abs(np.asarray(u_hat, dtype=np.float64) - np.asarray(u_true, dtype=np.float64))
    gy, gx = np.gradient(e)
    return float(np.hypot(gx, gy)[region].mean())


def default_segments(m: int) -> list[tuple[int, int]]:
    """1-based inclusive step ranges; 1-5/6-10/11-15 for m=15."""
    if m <= 0:
        raise MetricError("horizon must be positive")
    parts = [p for p in np.array_split(np.arange(1, m + 1), min(3, m)) if len(p)]
    return [(int(p[0]), int(p[-1])) for p in parts]


def _check_segments(segments, m):
    steps = [s for lo, hi in segments for s in range(lo, hi + 1)]
    if sorted(steps) != list(range(1, m + 1)) or len(steps) != m:
        raise MetricError(f"segments {segments} do not partition 1..{m}")


@dataclass
class EvalReport:
    segments: list            # [[lo, hi], ...]
    mae: list                 # per segment, mm
    max_abs: list             # per segment, mm
    gradient_norm: dict       # region -> per segment
    gradient_count: dict      # region -> per segment, number of frames contributing
    mse_curve: list           # per step, normalized units
    kl_curve: list
    ssim_curve: list
    metadata: dict = field(default_factory=dict)
    residual: Optional[dict] = None

    def summary(self) -> dict:
        return {"mse_mean": float(np.mean(self.mse_curve)),
                "kl_mean": float(np.mean(self.kl_curve)),
                "ssim_mean": float(np.mean(self.ssim_curve)),
                "mae_mean": float(np.mean(self.mae))}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = self.summary()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "segment", "region", "value"])
        for (lo, hi), mae, mx in zip(self.segments, self.mae, self.max_abs):
            seg = f"{lo}-{hi}"
            w.writerow(["mae_mm", seg, "overall", repr(mae)])
            w.writerow(["max_abs_mm", seg, "overall", repr(mx)])
            for r in REGIONS:
                w.writerow(["gradient_norm", seg, r,
                            repr(self.gradient_norm[r][self.segments.index([lo, hi])])])
        for name, curve in (("mse", self.mse_curve), ("kl", self.kl_curve),
                            ("ssim", self.ssim_curve)):
            for s, v in enumerate(curve, start=1):
                w.writerow([name, str(s), "overall", repr(v)])
        return buf.getvalue()


def report_schema() -> dict:
    return json.loads(resources.files("waam_pino").joinpath("report.schema.json").read_text())


def validate_report(doc: dict) -> None:
    """Schema check plus the cross-field length rules JSON Schema cannot express."""
    jsonschema.validate(doc, report_schema())
    k = len(doc["segments"])
    for key in ("mae", "max_abs"):
        if len(doc[key]) != k:
            raise MetricError(f"{key} has {len(doc[key])} entries for {k} segments")
    for key in ("gradient_norm", "gradient_count"):
        for r in REGIONS:
            if len(doc[key][r]) != k:
                raise MetricError(f"{key}[{r}] has {len(doc[key][r])} entries for {k} segments")
    m = doc["segments"][-1][1]
    _check_segments([tuple(s) for s in doc["segments"]], m)
    for key in ("mse_curve", "kl_curve", "ssim_curve"):
        if len(doc[key]) != m:
            raise MetricError(f"{key} has {len(doc[key])} steps, horizon is {m}")


def build_report(predictions, truths, masks, segments=None, *, scale_to_mm: float = 1.0,
                 predictions_norm=None, truths_norm=None, metadata=None) -> EvalReport:
    """Aggregate metrics over samples.

    predictions/truths: [n_samples, m, H, W] in physical units (multiplied by
    ``scale_to_mm`` for MAE/max-abs). masks: per sample, per step, a dict of
    region -> boolean grid. Curves use the normalized fields when given
    (they must lie in [0, 1]), else the physical ones.
    """
    pred, true = np.asarray(predictions, np.float64), np.asarray(truths, np.float64)
    if pred.shape != true.shape or pred.ndim != 4:
        raise MetricError(f"expected matching [n, m, H, W] stacks, got {pred.shape}, {true.shape}")
    n, m = pred.shape[:2]
    if len(masks) != n or any(len(ms) != m for ms in masks):
        raise MetricError("masks must be given per sample and per step")
    segments = default_segments(m) if segments is None else [tuple(s) for s in segments]
    _check_segments(segments, m)
    pn = pred if predictions_norm is None else np.asarray(predictions_norm, np.float64)
    tn = true if truths_norm is None else np.asarray(truths_norm, np.float64)

    mae, mx = [], []
    gnorm = {r: [] for r in REGIONS}
    gcount = {r: [] for r in REGIONS}
    for lo, hi in segments:
        sl = slice(lo - 1, hi)
        err = np.abs(pred[:, sl] - true[:, sl]) * scale_to_mm
        mae.append(float(err.mean()))
        mx.append(float(err.max()))
        for r in REGIONS:
            vals = [error_gradient_norm(pred[i, s] * scale_to_mm, true[i, s] * scale_to_mm,
                                        masks[i][s][r])
                    for i in range(n) for s in range(lo - 1, hi) if masks[i][s][r].any()]
            gnorm[r].append(float(np.mean(vals)) if vals else 0.0)
            gcount[r].append(len(vals))
    mse_curve = [float(np.mean((pn[:, s] - tn[:, s]) ** 2)) for s in range(m)]
    kl_curve = [float(np.mean([kl_divergence(tn[i, s], pn[i, s]) for i in range(n)]))
                for s in range(m)]
    ssim_curve = [float(np.mean([ssim(tn[i, s], pn[i, s]) for i in range(n)]))
                  for s in range(m)]
    return EvalReport([list(s) for s in segments], mae, mx, gnorm, gcount,
                      mse_curve, kl_curve, ssim_curve, dict(metadata or {}))
