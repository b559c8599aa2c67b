"""Bar chart of per-joint MPJPE from one or more report CSVs (needs the ``plot`` extra).

    python3 scripts/plot_per_joint.py results/branches.csv results/pseudo.csv --out per_joint.png
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from fusionpose.model import JOINT_NAMES  # noqa: E402


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("reports", type=Path, nargs="+")
    ap.add_argument("--out", type=Path, default=Path("per_joint.png"))
    a = ap.parse_args()
    rows = [r for p in a.reports for r in read_rows(p)]
    x = np.arange(len(JOINT_NAMES))
    width = 0.8 / len(rows)
    fig, ax = plt.subplots(figsize=(12, 4.5))
    for i, r in enumerate(rows):
        vals = [float(r[f"{n}_cm"]) for n in JOINT_NAMES]
        ax.bar(x + (i - (len(rows) - 1) / 2) * width, vals, width,
               label=f"{r['variant']} ({float(r['overall_mpjpe_cm']):.2f} cm)")
    ax.set_xticks(x, JOINT_NAMES, rotation=40, ha="right")
    ax.set_ylabel("MPJPE [cm]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(a.out, dpi=150)
    print(f"wrote {a.out}")


if __name__ == "__main__":
    main()
