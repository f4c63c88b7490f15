"""Command-line entry point: gen, train, eval, ablate, predict, report.

Every subcommand prints a one-line JSON result on stdout. Failures print
``{"error": ..., "type": ..., "command": ...}`` on stderr and exit nonzero
(2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import GenConfig, RunConfig, load_json
from .data import TARGETS, encode_fields, make_samples, prepare_case, read_dataset
from .metrics import EvalReport, validate_report

log = logging.getLogger("waam_pino")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_dict(load_json(args.config)) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if getattr(args, "dataset", None):
        cfg = replace(cfg, dataset=args.dataset)
    return cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen(args) -> dict:
    from .pipeline import generate_dataset
    cfg = GenConfig.from_dict(load_json(args.config)) if args.config else GenConfig()
    if args.out is None:
        raise UsageError("gen needs --out")
    ds = generate_dataset(cfg, args.out)
    # the generator has no random state; --seed is accepted for a uniform interface
    return {"dataset": str(args.out), "cases": ds.manifest.case_ids(),
            "frames": {c: len(a) for c, a in ds.cases.items()}, "hash": ds.content_hash()}


def cmd_train(args) -> dict:
    from .pipeline import set_determinism, train
    cfg = _run_config(args)
    set_determinism(cfg.seed, cfg.deterministic)
    out = Path(cfg.out)

    def on_epoch(epoch, row):
        log.info("epoch %d total %.6g", epoch, row["total"])

    res = train(cfg, on_epoch=on_epoch)
    out.mkdir(parents=True, exist_ok=True)
    res.checkpoint.save(out / "checkpoint.bin")
    _write_json(out / "trace.json", res.trace)
    _write_json(out / "config.json", cfg.to_dict())
    return {"checkpoint": str(out / "checkpoint.bin"), "epochs": cfg.epochs,
            "samples": res.n_samples, "train_seconds": round(res.train_seconds, 3),
            "final_loss": res.trace[-1]["total"] if res.trace else None}


def _write_report(report: EvalReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    validate_report(doc)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())


def cmd_eval(args) -> dict:
    from .pipeline import Checkpoint, evaluate, evaluate_persistence, set_determinism
    cfg = _run_config(args)
    set_determinism(cfg.seed, cfg.deterministic)
    ds = read_dataset(cfg.dataset)
    if args.baseline:
        report = evaluate_persistence(ds, cfg.model, cfg.target, cfg.eval_stride, args.split)
    else:
        ckpt_path = Path(args.checkpoint or Path(cfg.out) / "checkpoint.bin")
        report = evaluate(Checkpoint.load(ckpt_path), ds, cfg.eval_stride, args.split, cfg.sign_q)
    out = Path(cfg.out)
    _write_report(report, out)
    return {"report": str(out / "report.json"), **report.summary()}


def cmd_ablate(args) -> dict:
    from .pipeline import ablate, set_determinism
    cfg = _run_config(args)
    set_determinism(cfg.seed, cfg.deterministic)
    table = ablate(cfg, out_dir=cfg.out)
    return {"table": str(Path(cfg.out) / "ablation.json"),
            "kinds": [r["kind"] for r in table["rows"]],
            "mae_mean": {r["kind"]: r["mae_mean"] for r in table["rows"]}}


def cmd_predict(args) -> dict:
    from .pipeline import Checkpoint, predict, prediction_frames, set_determinism
    cfg = _run_config(args)
    set_determinism(cfg.seed, cfg.deterministic)
    ckpt = Checkpoint.load(args.checkpoint or Path(cfg.out) / "checkpoint.bin")
    ds = read_dataset(cfg.dataset)
    case_id = args.case or ds.manifest.case_ids("test")[0]
    if case_id not in ds.cases:
        raise UsageError(f"unknown case {case_id!r}")
    prepared = prepare_case(ds.cases[case_id], ds.stats, ds.geometry)
    spec = ckpt.spec
    samples = make_samples(prepared, spec.window_i, spec.horizon_m, 1, TARGETS[ckpt.target])
    anchors = {s.anchor: s for s in samples}
    if args.anchor not in anchors:
        raise UsageError(f"anchor {args.anchor} outside 0..{len(samples) - 1} for {case_id}")
    sample = anchors[args.anchor]
    hist = prepared.phys[sample.hist_idx]
    pred = predict(ckpt, hist, args.repeats, sample.active_future)
    frames = prediction_frames(pred, hist[-1], ckpt.target)
    frames[:, 3] = sample.active_future
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "prediction.bin").write_bytes(encode_fields(frames))
    info = {"case_id": case_id, "anchor": args.anchor, "frames": int(frames.shape[0]),
            "shape": list(frames.shape), "latency_ms": pred.latency_ms,
            "layout": "little-endian float32 [step][channel][row][col], channels T,Uz,Uy,active"}
    _write_json(out / "prediction.json", info)
    return {"prediction": str(out / "prediction.bin"), **info}


def _render_markdown(doc: dict) -> str:
    lines = ["| segment | MAE (mm) | max abs (mm) | grad overall | grad molten | "
             "grad deposited | grad roi |", "|---|---|---|---|---|---|---|"]
    g = doc["gradient_norm"]
    for k, (lo, hi) in enumerate(doc["segments"]):
        lines.append(f"| {lo}-{hi} | {doc['mae'][k]:.5g} | {doc['max_abs'][k]:.5g} | "
                     + " | ".join(f"{g[r][k]:.5g}" for r in ("overall", "molten", "deposited",
                                                             "roi")) + " |")
    s = doc["summary"]
    lines.append("")
    lines.append(f"mean MSE {s['mse_mean']:.5g}, mean KL {s['kl_mean']:.5g}, "
                 f"mean SSIM {s['ssim_mean']:.5g}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> dict:
    """Validate an existing report.json and render it as a markdown table."""
    src = Path(args.input) if args.input else None
    if src is None and args.config:
        src = Path(_run_config(args).out)
    if src is None:
        raise UsageError("report needs --input (a report.json or a directory holding one)")
    if src.is_dir():
        src = src / "report.json"
    doc = json.loads(src.read_text())
    validate_report(doc)
    out = Path(args.out) if args.out else src.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(_render_markdown(doc))
    return {"valid": True, "report": str(src), "markdown": str(out / "report.md"),
            **doc["summary"]}


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "predict": cmd_predict, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="waam-pino", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config (gen or run schema)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if name in ("train", "eval", "ablate", "predict"):
            sp.add_argument("--dataset", help="override the dataset path in the config")
        if name in ("eval", "predict"):
            sp.add_argument("--checkpoint", help="defaults to <out>/checkpoint.bin")
        if name == "eval":
            sp.add_argument("--split", default="test", choices=("train", "test"))
            sp.add_argument("--baseline", action="store_true",
                            help="evaluate the persistence baseline instead of a checkpoint")
        if name == "predict":
            sp.add_argument("--case", help="case id (default: first test case)")
            sp.add_argument("--anchor", type=int, default=0)
            sp.add_argument("--repeats", type=int, default=20)
        if name == "report":
            sp.add_argument("--input", help="report.json or a directory containing one")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = COMMANDS[command](args)
        print(json.dumps(result, sort_keys=True, default=str))
        return 0
    except UsageError as e:
        _fail(command, e, 2)
        return 2
    except Exception as e:  # noqa: BLE001 - every failure becomes a JSON error
        log.debug("failure", exc_info=True)
        _fail(command, e, 1)
        return 1


def _fail(command, exc, code) -> None:
    print(json.dumps({"error": str(exc), "type": type(exc).__name__, "command": command,
                      "exit_code": code}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
