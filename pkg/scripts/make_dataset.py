"""Generate a dataset from a gen config (default: the 8-case 48x50 desk set)."""
import argparse
import json
from pathlib import Path

from waam_pino.config import GenConfig, load_json
from waam_pino.pipeline import generate_dataset

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=ROOT / "configs" / "desk_gen.json")
    ap.add_argument("--out", default="data/desk")
    args = ap.parse_args()
    ds = generate_dataset(GenConfig.from_dict(load_json(args.config)), args.out)
    print(json.dumps({"out": str(args.out), "hash": ds.content_hash(),
                      "frames": {c: len(a) for c, a in ds.cases.items()}}, indent=2))
