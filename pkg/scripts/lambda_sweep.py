"""Held-out trunk PDE residual with and without the physics term, over several seeds."""
import argparse
from dataclasses import replace
from pathlib import Path

from waam_pino.config import RunConfig, load_json
from waam_pino.data import read_dataset
from waam_pino.models import ModelSpec
from waam_pino.pipeline import evaluate, train

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=ROOT / "configs" / "smoke_run.json")
    ap.add_argument("--dataset", help="override the dataset path in the config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--lams", type=float, nargs="+", default=[0.0, 0.1])
    args = ap.parse_args()
    cfg = RunConfig.from_dict(load_json(args.config))
    if args.dataset:
        cfg = replace(cfg, dataset=args.dataset)
    ds = read_dataset(cfg.dataset)
    for seed in args.seeds:
        for lam in args.lams:
            spec = ModelSpec.from_dict({**cfg.model.to_dict(), "kind": "pideeponet_rnn",
                                        "lam": lam})
            res = train(replace(cfg, model=spec, seed=seed), ds)
            rep = evaluate(res.checkpoint, ds, stride=cfg.eval_stride)
            print(f"seed {seed} lam {lam:g}: final loss {res.trace[-1]['total']:.5f}, "
                  f"mean |R|/scale {rep.residual['mean_abs_scaled']:.5f}, "
                  f"mae {sum(rep.mae) / len(rep.mae):.5f} mm", flush=True)
