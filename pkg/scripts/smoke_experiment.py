"""Desk-scale smoke experiment (baseline-clean vs d2v-denoising, KWT-tiny, synthetic data).

    python3 scripts/smoke_experiment.py --out runs/smoke
"""
import argparse
import json
import time
from pathlib import Path

from noisykws.experiment import run_smoke

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "runs" / f"smoke-{time.strftime('%Y%m%d-%H%M%S')}"))
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.toml"))
    ap.add_argument("--seed", type=int, help="override the pinned seed (KWS_SEED also works)")
    args = ap.parse_args()
    summary = run_smoke(args.out, args.config, args.seed)
    print(json.dumps(summary.to_dict(), indent=2))
    Path(args.out, "summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n")


if __name__ == "__main__":
    main()
