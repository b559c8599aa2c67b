"""Train lifting-only, point-only and fusion models on one nominal split and print the comparison.

    python3 scripts/branch_comparison.py --out results/branches.csv
"""

import argparse
import sys
from pathlib import Path

from fusionpose import evaluation, experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-test", type=int, default=400)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--profile", default="nominal")
    ap.add_argument("--out", type=Path, help="CSV report (one row per variant)")
    a = ap.parse_args()
    res = experiments.run_branch_comparison(a.n_train, a.n_test, a.epochs, a.seed, a.profile,
                                            log=lambda s: print(s, file=sys.stderr, flush=True))
    reports = [res.reports[v] for v in ("lifting", "point", "fusion")]
    print(evaluation.format_table(reports, per_joint=True))
    print(f"\nfusion vs best single branch: {100 * res.fusion_gain():+.1f}%")
    print("train+eval seconds: " + ", ".join(f"{v} {s:.0f}" for v, s in res.seconds.items()))
    if a.out:
        a.out.parent.mkdir(parents=True, exist_ok=True)
        evaluation.write_report_csv(reports, a.out)


if __name__ == "__main__":
    main()
