"""Train and evaluate the two-stage cascade on phantoms.

    python scripts/run_desk_experiment.py [--config configs/desk.yaml] [--out runs/acceptance]

Resumable: rerunning with the same config continues from the last
checkpoints. Results land in ``<out>/eval`` (``results.json``, per-case and
summary CSVs, the r-sweep).
"""

import argparse
import json
import logging
import time
from pathlib import Path

from cascade3d.config import load_config
from cascade3d.experiment import run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "desk.yaml")
    ap.add_argument("--out", default=ROOT / "runs" / "acceptance")
    ap.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    t = time.perf_counter()
    res = run_experiment(cfg, args.out, resume=not args.fresh)
    print(res.stage1.table())
    print(res.stage2.table())
    print(res.stage2_overlap.table())
    print(json.dumps({k: v for k, v in res.summary().items() if k != "sweep"}, indent=1))
    print(f"wall time {(time.perf_counter() - t) / 60:.1f} min")


if __name__ == "__main__":
    main()
