"""Generation, training, evaluation, ablation and single-shot prediction."""
from __future__ import annotations

import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import GenConfig, RunConfig
from .data import (TARGETS, Dataset, GeneratedCase, PreparedCase, Sample, collate,
                   make_samples, prepare_case, read_dataset, write_dataset)
from .fields import (GridGeometry, NormStats, build_region_masks, denormalize_array,
                     normalize_array)
from .layers import ParamStore, adam_step, load_tensors, save_tensors
from .metrics import EvalReport, build_report
from .models import ModelSpec, Surrogate, build_model
from .physics import heat_residual, mse, pde_loss, residual_scale, total_loss
from .synthgen import MaterialProps, SourceParams, run_case, table_case

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# --- generation -------------------------------------------------------------

def _gen_one(args):
    number, split, cfg = args
    pc = table_case(number, cfg.n_layers, cfg.dwell)
    sp = SourceParams.for_case(pc, cfg.watts_per_wfs)
    seq = run_case(pc, cfg.material, sp, cfg.proxy, cfg.geometry, cfg.wall_span,
                   cfg.substrate_rows)
    return GeneratedCase(seq, pc, sp, split)


def generate(cfg: GenConfig) -> list[GeneratedCase]:
    jobs = [(n, "train", cfg) for n in cfg.train_cases] + [(n, "test", cfg) for n in cfg.test_cases]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            return list(pool.map(_gen_one, jobs))
    return [_gen_one(j) for j in jobs]


def generate_dataset(cfg: GenConfig, out) -> Dataset:
    cases = generate(cfg)
    wall_span = cfg.geometry.n_cols if cfg.wall_span is None else cfg.wall_span
    write_dataset(cases, out, cfg.material, cfg.proxy, cfg.substrate_rows, wall_span)
    return read_dataset(out)


# --- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    spec: ModelSpec
    target: str
    stats: NormStats
    material: MaterialProps
    geometry: GridGeometry
    state: dict
    meta: dict = field(default_factory=dict)

    def model(self, dtype=torch.float32) -> Surrogate:
        net = build_model(self.spec, 0, dtype)
        net.load_state_dict({k: v.to(dtype) for k, v in self.state.items()})
        net.eval()
        return net

    def save(self, path) -> None:
        meta = {"model_spec": self.spec.to_dict(), "target": self.target,
                "norm_stats": self.stats.to_dict(), "material": vars(self.material).copy(),
                "geometry": self.geometry.to_dict(), **self.meta}
        save_tensors(path, self.state, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        state, meta = load_tensors(path)
        meta = dict(meta)
        return cls(ModelSpec.from_dict(meta.pop("model_spec")), meta.pop("target"),
                   NormStats.from_dict(meta.pop("norm_stats")),
                   MaterialProps(**meta.pop("material")),
                   GridGeometry.from_dict(meta.pop("geometry")), state, meta)


# --- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list          # per epoch: {"total", "data", "trunk", "pde"}
    train_seconds: float
    n_samples: int


def _prepared(ds: Dataset, split: str) -> list[PreparedCase]:
    return [prepare_case(c, ds.stats, ds.geometry) for c in ds.split(split)]


def split_samples(ds: Dataset, split: str, spec: ModelSpec, target: str,
                  stride: int) -> list[Sample]:
    out = []
    for pc in _prepared(ds, split):
        out.extend(make_samples(pc, spec.window_i, spec.horizon_m, stride, target))
    return out


def fill_inactive(x, active, value: float):
    """Birth-death fill rule on predicted frames: cells not yet deposited take
    the ambient / zero-distortion value. ``active`` is the planned schedule."""
    if isinstance(x, torch.Tensor):
        return torch.where(active, x, torch.full_like(x, value))
    return np.where(active, x, value)


def fill_values(stats: NormStats, target: str) -> tuple[float, float]:
    """Normalized (ambient temperature, zero distortion) for ``target``."""
    return (float(normalize_array(stats.mins["T"], stats, "T")),
            float(normalize_array(0.0, stats, target)))


def batch_losses(model: Surrogate, batch: dict, spec: ModelSpec, mat: MaterialProps,
                 geom: GridGeometry, stats: NormStats, target: str = "Uz",
                 sign_q: float = -1.0, need_pde: Optional[bool] = None) -> dict:
    out = model(batch["t_hist"], batch["u_hist"])
    t_fill, u_fill = fill_values(stats, target)
    active = batch["active_fut"]
    u_hat = fill_inactive(out.u_hat, active, u_fill)
    t_hat = None if out.t_hat is None else fill_inactive(out.t_hat, active, t_fill)
    terms = {"data": mse(u_hat, batch["u_fut"])}
    zero = out.u_hat.sum() * 0.0
    terms["trunk"] = mse(t_hat, batch["t_fut"]) if t_hat is not None else zero
    need_pde = spec.lam > 0 if need_pde is None else need_pde
    if t_hat is not None and need_pde and spec.horizon_m >= 2:
        t_phys = stats.mins["T"] + t_hat * stats.span("T")
        res = heat_residual(t_phys, batch["q_fut"], mat, geom, batch["active_fut"], sign_q)
        terms["pde"] = pde_loss(res, residual_scale(mat, stats, geom))
    else:
        terms["pde"] = zero
    terms["total"] = total_loss(terms["data"], terms["trunk"], terms["pde"],
                                spec.alpha, spec.beta, spec.lam)
    return terms


def train(cfg: RunConfig, ds: Optional[Dataset] = None,
          on_epoch: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    set_determinism(cfg.seed, cfg.deterministic)
    ds = read_dataset(cfg.dataset) if ds is None else ds
    spec, target = cfg.model, TARGETS[cfg.target]
    samples = split_samples(ds, "train", spec, target, cfg.train_stride)
    if not samples:
        raise ValueError("no training samples: cases are shorter than the horizon")
    model = build_model(spec, cfg.seed)
    model.train()
    store = ParamStore.from_module(model)
    rng = np.random.default_rng(cfg.seed)
    mat, geom, stats = ds.manifest.material, ds.geometry, ds.stats
    trace = []
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(samples))
        sums = {"total": 0.0, "data": 0.0, "trunk": 0.0, "pde": 0.0}
        n_batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = collate([samples[j] for j in order[start:start + cfg.batch_size]])
            terms = batch_losses(model, batch, spec, mat, geom, stats, target, cfg.sign_q)
            values = {k: float(v.detach()) for k, v in terms.items()}
            if not np.isfinite(values["total"]):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}: {values}")
            for p in store.params.values():
                p.grad = None
            terms["total"].backward()
            adam_step(store, store.grads(), lr=cfg.lr)
            for k in sums:
                sums[k] += values[k]
            n_batches += 1
        row = {k: v / n_batches for k, v in sums.items()}
        trace.append(row)
        if on_epoch is not None:
            on_epoch(epoch, row)
    elapsed = time.perf_counter() - t0
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    ckpt = Checkpoint(spec, target, stats, mat, geom, state,
                      {"seed": cfg.seed, "epochs": cfg.epochs, "dataset_hash": ds.content_hash()})
    return TrainResult(ckpt, trace, elapsed, len(samples))


# --- evaluation --------------------------------------------------------------

Predictor = Callable[[dict, list], dict]


def model_predictor(ckpt: Checkpoint) -> Predictor:
    net = ckpt.model()
    t_fill, u_fill = fill_values(ckpt.stats, ckpt.target)

    def predict(batch, samples):
        with torch.no_grad():
            out = net(batch["t_hist"], batch["u_hist"])
        active = batch["active_fut"]
        res = {"u_hat": fill_inactive(out.u_hat, active, u_fill).numpy()}
        if out.t_hat is not None:
            res["t_hat"] = fill_inactive(out.t_hat, active, t_fill)
        return res

    return predict


def persistence_predictor(batch, samples) -> dict:
    """Repeat the last observed distortion frame over the whole horizon."""
    last = batch["u_hist"][:, -1:].numpy()
    return {"u_hat": np.repeat(last, batch["u_fut"].shape[1], axis=1)}


def evaluate_with(predict: Predictor, ds: Dataset, spec: ModelSpec, target: str,
                  stride: int = 5, split: str = "test", sign_q: float = -1.0,
                  metadata: Optional[dict] = None, batch_size: int = 16) -> EvalReport:
    target = TARGETS[target]
    samples = split_samples(ds, split, spec, target, stride)
    if not samples:
        raise ValueError(f"no {split} samples to evaluate")
    stats, geom, mat = ds.stats, ds.geometry, ds.manifest.material
    region_cfg = ds.manifest.region_config()
    preds, truths, masks = [], [], []
    residuals, pde_terms, n_valid = [], [], 0
    scale = residual_scale(mat, stats, geom)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = collate(chunk)
        out = predict(batch, chunk)
        preds.append(np.asarray(out["u_hat"], dtype=np.float64))
        truths.append(batch["u_fut"].numpy().astype(np.float64))
        for s in chunk:
            phys = s.case.phys[s.fut_idx]
            masks.append([build_region_masks(_frame(phys[k]), s.track_future[k], region_cfg)
                          .as_dict() for k in range(len(s.fut_idx))])
        if out.get("t_hat") is not None and spec.horizon_m >= 2:
            t_phys = stats.mins["T"] + out["t_hat"].double() * stats.span("T")
            res = heat_residual(t_phys, batch["q_fut"].double(), mat, geom,
                                batch["active_fut"], sign_q)
            if res.n_valid:
                residuals.append((res.valid_values() / scale).abs().numpy())
                pde_terms.append(float(pde_loss(res, scale)) * res.n_valid)
                n_valid += res.n_valid
    pn, tn = np.concatenate(preds), np.concatenate(truths)
    pp = denormalize_array(pn, stats, target)
    tp = denormalize_array(tn, stats, target)
    meta = {"target": target, "n_samples": len(samples), "split": split,
            "case_ids": sorted({s.case_id for s in samples}), "stride": stride}
    meta.update(metadata or {})
    report = build_report(pp, tp, masks, scale_to_mm=1000.0, predictions_norm=pn,
                          truths_norm=tn, metadata=meta)
    if residuals:
        r = np.concatenate(residuals)
        report.residual = {"mean_abs_scaled": float(r.mean()), "max_abs_scaled": float(r.max()),
                           "pde_loss": sum(pde_terms) / n_valid, "n_valid": int(n_valid)}
    return report


def _frame(stack4):
    from .fields import FieldFrame
    return FieldFrame(stack4[0], stack4[1], stack4[2], stack4[3] > 0.5)


def evaluate(ckpt: Checkpoint, ds: Dataset, stride: int = 5, split: str = "test",
             sign_q: float = -1.0) -> EvalReport:
    if ckpt.geometry != ds.geometry:
        raise ValueError(f"checkpoint geometry {ckpt.geometry} != dataset {ds.geometry}")
    meta = {"model_kind": ckpt.spec.kind, "seed": ckpt.meta.get("seed")}
    return evaluate_with(model_predictor(ckpt), ds, ckpt.spec, ckpt.target, stride, split,
                         sign_q, meta)


def evaluate_persistence(ds: Dataset, spec: ModelSpec, target: str, stride: int = 5,
                         split: str = "test") -> EvalReport:
    return evaluate_with(persistence_predictor, ds, spec, target, stride, split,
                         metadata={"model_kind": "persistence"})


# --- prediction --------------------------------------------------------------

@dataclass
class Prediction:
    u_hat: np.ndarray            # [m, H, W] metres
    t_hat: Optional[np.ndarray]  # [m, H, W] kelvin
    latency_ms: float


def predict(ckpt: Checkpoint, history: np.ndarray, repeats: int = 20,
            future_active: Optional[np.ndarray] = None) -> Prediction:
    """One forward pass from physical history frames [L, 4, H, W].

    Histories shorter than the model window are front-padded by repeating
    the first frame; longer ones are truncated to the most recent frames.
    ``future_active`` ([m, H, W], from the planned deposition path) applies
    the fill rule to cells that are not yet deposited. Latency is the median
    of ``repeats`` warm forward passes.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 4 or history.shape[1] != 4 or history.shape[2:] != ckpt.geometry.shape:
        raise ValueError(f"history must be [L, 4, {ckpt.geometry.n_rows}, "
                         f"{ckpt.geometry.n_cols}], got {history.shape}")
    if not np.all(np.isfinite(history)):
        raise ValueError("history contains non-finite values")
    i = ckpt.spec.window_i
    idx = np.maximum(np.arange(len(history) - i, len(history)), 0)
    h = history[idx]
    uch = 1 if ckpt.target == "Uz" else 2
    t = torch.from_numpy(np.clip((h[:, 0] - ckpt.stats.mins["T"]) / max(ckpt.stats.span("T"), 1e-300),
                                 0, 1)).float()[None]
    span_u = ckpt.stats.span(ckpt.target)
    u_norm = (np.zeros_like(h[:, uch]) if span_u <= 0
              else np.clip((h[:, uch] - ckpt.stats.mins[ckpt.target]) / span_u, 0, 1))
    u = torch.from_numpy(u_norm).float()[None]
    net = ckpt.model()
    times = []
    with torch.no_grad():
        out = net(t, u)
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = net(t, u)
            times.append(time.perf_counter() - t0)
    u_norm, t_norm = out.u_hat[0].numpy(), None if out.t_hat is None else out.t_hat[0].numpy()
    if future_active is not None:
        active = np.asarray(future_active, dtype=bool)
        if active.shape != u_norm.shape:
            raise ValueError(f"future_active must be {u_norm.shape}, got {active.shape}")
        t_fill, u_fill = fill_values(ckpt.stats, ckpt.target)
        u_norm = fill_inactive(u_norm, active, u_fill)
        t_norm = None if t_norm is None else fill_inactive(t_norm, active, t_fill)
    u_hat = denormalize_array(u_norm, ckpt.stats, ckpt.target)
    t_hat = None if t_norm is None else denormalize_array(t_norm, ckpt.stats, "T")
    return Prediction(u_hat, t_hat, 1000.0 * statistics.median(times) if times else float("nan"))


def prediction_frames(pred: Prediction, last_frame: np.ndarray, target: str) -> np.ndarray:
    """Pack a prediction into the dataset frame layout [m, 4, H, W].

    Channels the model does not predict carry the last observed frame.
    """
    m = pred.u_hat.shape[0]
    out = np.repeat(np.asarray(last_frame, dtype=np.float64)[None], m, axis=0)
    out[:, 1 if target == "Uz" else 2] = pred.u_hat
    if pred.t_hat is not None:
        out[:, 0] = pred.t_hat
    return out


# --- ablation ----------------------------------------------------------------

def ablate(cfg: RunConfig, ds: Optional[Dataset] = None, out_dir=None,
           latency_repeats: int = 20) -> dict:
    """Train and evaluate every kind in ``cfg.kinds`` on identical data and seed."""
    ds = read_dataset(cfg.dataset) if ds is None else ds
    rows, curves, traces = [], {}, {}
    out_dir = None if out_dir is None else Path(out_dir)
    base = evaluate_persistence(ds, cfg.model, cfg.target, cfg.eval_stride)
    for kind in cfg.kinds:
        kcfg = cfg.with_kind(kind)
        res = train(kcfg, ds)
        report = evaluate(res.checkpoint, ds, cfg.eval_stride, sign_q=cfg.sign_q)
        sample = split_samples(ds, "test", kcfg.model, TARGETS[cfg.target], 10**9)[0]
        lat = predict(res.checkpoint, sample.case.phys[sample.hist_idx], latency_repeats,
                      sample.active_future).latency_ms
        rows.append({
            "kind": kind, "seed": cfg.seed, "dataset_hash": ds.content_hash(),
            "segments": report.segments, "mae_mm": report.mae, "max_abs_mm": report.max_abs,
            "gradient_norm": report.gradient_norm, **report.summary(),
            "pde_residual": report.residual,
            "train_time_s": res.train_seconds, "predict_latency_ms": lat,
            "final_train_loss": res.trace[-1]["total"] if res.trace else None,
        })
        curves[kind] = {"mse": report.mse_curve, "kl": report.kl_curve, "ssim": report.ssim_curve}
        traces[kind] = [r["total"] for r in res.trace]
        if out_dir is not None:
            kdir = out_dir / kind
            kdir.mkdir(parents=True, exist_ok=True)
            res.checkpoint.save(kdir / "checkpoint.bin")
            (kdir / "report.json").write_text(report.to_json())
            (kdir / "report.csv").write_text(report.to_csv())
    table = {"rows": rows, "curves": curves, "loss_traces": traces,
             "persistence": {"mae_mm": base.mae, "max_abs_mm": base.max_abs, **base.summary()}}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True))
        (out_dir / "ablation.csv").write_text(ablation_csv(table))
    return table


def ablation_csv(table: dict) -> str:
    lines = ["kind,segment,mae_mm,max_abs_mm,mse_mean,kl_mean,ssim_mean,train_time_s,"
             "predict_latency_ms"]
    for r in table["rows"]:
        for (lo, hi), mae, mx in zip(r["segments"], r["mae_mm"], r["max_abs_mm"]):
            lines.append(f"{r['kind']},{lo}-{hi},{mae!r},{mx!r},{r['mse_mean']!r},"
                         f"{r['kl_mean']!r},{r['ssim_mean']!r},{r['train_time_s']:.3f},"
                         f"{r['predict_latency_ms']:.3f}")
    return "\n".join(lines) + "\n"
