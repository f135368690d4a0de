"""Collect ``*.summary.json`` files from an output directory into a markdown table.

Power-law fits are log-log slopes; the ``lyapunov`` column is a per-iteration
contraction factor.
"""
import argparse
import json
from pathlib import Path

COLUMNS = ("ergodic_gap", "x_dist_sq", "y_Y0", "y_dist_sq", "lyapunov", "rel_objective")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", nargs="?", default="results")
    args = ap.parse_args()

    files = sorted(Path(args.out).glob("*.summary.json"))
    if not files:
        raise SystemExit(f"no summaries in {args.out}")
    print("| run | seeds | window | " + " | ".join(COLUMNS) + " |")
    print("|" + "---|" * (len(COLUMNS) + 3))
    for f in files:
        s = json.loads(f.read_text())
        cells = [f"{s['fits'][c]:.4g}" if c in s["fits"] else "" for c in COLUMNS]
        window = "-".join(str(w) for w in s["fit_window"]) if s["fit_window"] else "all"
        print(f"| {s['name']} | {s['seeds']} | {window} | " + " | ".join(cells) + " |")


if __name__ == "__main__":
    main()
