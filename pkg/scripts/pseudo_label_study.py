"""Score 3D and 2D pseudo-label weighting, then train a weak fusion model on the 3D labels.

    python3 scripts/pseudo_label_study.py --out results/pseudo.csv
    python3 scripts/pseudo_label_study.py --sweep-thresholds 0.5 0.7 0.8 0.9 --no-train
"""

import argparse
import sys
from pathlib import Path

from fusionpose import evaluation, experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-test", type=int, default=400)
    ap.add_argument("--epochs", type=int, default=25)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--profile", default="outlier-heavy")
    ap.add_argument("--threshold", type=float, default=0.8)
    ap.add_argument("--sweep-thresholds", type=float, nargs="+", help="repeat the label scoring per threshold")
    ap.add_argument("--no-train", action="store_true", help="only score the pseudo-labels")
    ap.add_argument("--out", type=Path, help="CSV report")
    a = ap.parse_args()
    log = lambda s: print(s, file=sys.stderr, flush=True)  # noqa: E731

    for t in a.sweep_thresholds or []:
        r = experiments.run_pseudo_label_study(a.n_train, a.n_test, a.epochs, a.seed, a.profile, t,
                                               train_weak=False)
        print(f"t={t:g}: 3d {r.pseudo['three_d'].overall_mpjpe_cm:.2f} cm, "
              f"2d {r.pseudo['two_d_baseline'].overall_mpjpe_cm:.2f} cm, "
              f"joints scored {r.pseudo['three_d'].n_valid_joints}")
    if a.sweep_thresholds and a.no_train:
        return

    res = experiments.run_pseudo_label_study(a.n_train, a.n_test, a.epochs, a.seed, a.profile, a.threshold,
                                             train_weak=not a.no_train, log=log)
    reports = [res.pseudo["three_d"], res.pseudo["two_d_baseline"]] + ([res.weak] if res.weak else [])
    print(evaluation.format_table(reports, per_joint=True))
    print(f"\n3d vs 2d weighting: {100 * res.weighting_gain():+.1f}%")
    if res.weak:
        print(f"weak model on pseudo-labeled joints only: {res.weak_on_labeled.overall_mpjpe_cm:.2f} cm; "
              f"training label coverage {100 * res.coverage:.1f}%")
    if a.out:
        a.out.parent.mkdir(parents=True, exist_ok=True)
        evaluation.write_report_csv(reports, a.out)


if __name__ == "__main__":
    main()
