"""Train and evaluate all four kinds on one dataset and print the comparison table."""
import argparse
from dataclasses import replace
from pathlib import Path

from waam_pino.config import RunConfig, load_json
from waam_pino.pipeline import ablate

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=ROOT / "configs" / "desk_run.json")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    cfg = RunConfig.from_dict(load_json(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    table = ablate(cfg, out_dir=args.out)
    print(f"{'kind':16s} {'mae_mm':>10s} {'ssim':>8s} {'train_s':>9s} {'pred_ms':>9s}")
    for r in table["rows"]:
        print(f"{r['kind']:16s} {r['mae_mean']:10.5f} {r['ssim_mean']:8.4f} "
              f"{r['train_time_s']:9.1f} {r['predict_latency_ms']:9.1f}")
    p = table["persistence"]
    print(f"{'persistence':16s} {p['mae_mean']:10.5f} {p['ssim_mean']:8.4f}")
