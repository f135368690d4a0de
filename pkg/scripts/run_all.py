"""Run every config in ``configs/`` (or a selection) and print the fitted rates."""
import argparse
import time
from pathlib import Path

from spdhg import harness as H

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("names", nargs="*", help="config stems, e.g. scalar_toy tv_denoise_pa (default: all)")
    ap.add_argument("--out", default="results")
    ap.add_argument("--seeds", type=int, help="override the number of seeds")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    paths = sorted((ROOT / "configs").glob("*.toml"))
    if args.names:
        paths = [p for p in paths if p.stem in args.names]
    for path in paths:
        cfg = H.load_config(path, out=args.out, seeds=args.seeds, workers=args.workers)
        t0 = time.perf_counter()
        summary = H.run_experiment(cfg)
        fits = ", ".join(f"{k} {v:.4g}" for k, v in sorted(summary["fits"].items()))
        print(f"{cfg.name:32s} {time.perf_counter() - t0:7.1f}s  {fits}")


if __name__ == "__main__":
    main()
