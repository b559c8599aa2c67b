"""Mean per-joint position error, per-joint breakdowns and report output.

Errors are raw Euclidean distances in the box-centered frame (no Procrustes
alignment). Only joints valid in the ground truth are scored. Sums use
``math.fsum`` so a report does not depend on sample order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fusionpose import nn, train
from fusionpose.model import JOINT_NAMES, N_JOINTS, Pose3D, Sample
from fusionpose.pseudolabel import PseudoLabelConfig, make_pseudo_labels

VARIANT_LABELS = {"lifting": "lifting-only", "point": "point-only", "fusion": "fusion"}
PSEUDO_LABELS = {"three_d": "pseudo_3d", "two_d_baseline": "pseudo_2d"}
REPORT_LABELS = tuple(VARIANT_LABELS.values()) + tuple(PSEUDO_LABELS.values())
INVARIANT_TOL = 1e-9


class NoValidJointsError(ValueError):
    pass


class EmptyTestSetError(ValueError):
    pass


def mpjpe(pred: Pose3D, gt: Pose3D) -> float:
    """Mean joint distance in meters over the joints valid in ``gt``."""
    if gt.n_valid == 0:
        raise NoValidJointsError("ground truth has no valid joint")
    err = np.linalg.norm(pred.joints[gt.valid] - gt.joints[gt.valid], axis=1)
    return math.fsum(err) / len(err)


@dataclass(frozen=True, eq=False)
class SampleRecord:
    id: str
    per_joint_cm: np.ndarray  # NaN where the joint was not scored


@dataclass(frozen=True, eq=False)
class EvalReport:
    variant: str
    overall_mpjpe_cm: float
    per_joint_mpjpe_cm: np.ndarray  # (13,), NaN for joints never scored
    joint_counts: np.ndarray  # (13,) scored occurrences per joint
    n_samples: int
    n_valid_joints: int
    records: tuple[SampleRecord, ...] = ()

    def __post_init__(self):
        if self.variant not in REPORT_LABELS:
            raise ValueError(f"unknown report label {self.variant!r}")
        if int(self.joint_counts.sum()) != self.n_valid_joints:
            raise ValueError("joint counts do not add up to n_valid_joints")
        if self.n_valid_joints and abs(self.weighted_per_joint_mean() - self.overall_mpjpe_cm) > INVARIANT_TOL:
            raise ValueError("overall MPJPE disagrees with the per-joint breakdown")

    def weighted_per_joint_mean(self) -> float:
        m = self.joint_counts > 0
        return math.fsum(self.per_joint_mpjpe_cm[m] * self.joint_counts[m]) / self.joint_counts.sum()


def report_from_errors(label: str, ids: Sequence[str], err_m: np.ndarray, scored: np.ndarray) -> EvalReport:
    """Build a report from per-joint errors in meters; ``scored`` selects the joints that count.

    Means are taken in meters and then scaled, so every centimeter figure
    is exactly its meter value times 100.
    """
    err_m = np.asarray(err_m, dtype=float)
    scored = np.asarray(scored, dtype=bool)
    counts = scored.sum(axis=0)
    per_joint = np.full(N_JOINTS, np.nan)
    for j in range(N_JOINTS):
        if counts[j]:
            per_joint[j] = math.fsum(err_m[scored[:, j], j]) / counts[j] * 100.0
    n = int(counts.sum())
    overall = math.fsum(err_m[scored]) / n * 100.0 if n else float("nan")
    err_cm = np.where(scored, err_m * 100.0, np.nan)
    records = tuple(SampleRecord(i, row) for i, row in zip(ids, err_cm))
    return EvalReport(label, overall, per_joint, counts, len(ids), n, records)


def _require_gt(test: Sequence[Sample]) -> None:
    if len(test) == 0:
        raise EmptyTestSetError("empty test set")
    missing = [s.id for s in test if s.gt3d is None]
    if missing:
        raise train.MissingTargetsError(f"evaluation needs gt3d; {len(missing)} sample(s) lack it, e.g. {missing[0]}")


def evaluate_predictions(test: Sequence[Sample], pred_box: np.ndarray, label: str) -> EvalReport:
    """Score box-frame predictions ``(n, 13, 3)`` against each sample's ground truth."""
    _require_gt(test)
    pred_box = np.asarray(pred_box, dtype=float)
    gt = np.stack([train.box_frame_pose(s, s.gt3d) for s in test])
    valid = np.stack([s.gt3d.valid for s in test])
    err = np.linalg.norm(pred_box - gt, axis=-1)
    return report_from_errors(label, [s.id for s in test], err, valid)


def evaluate(params: nn.ModelParams, test: Sequence[Sample], variant: nn.Variant = "fusion",
             seed: int = 42, dtype=np.float64) -> EvalReport:
    """Eval-mode (dropout off) MPJPE of a trained model on ``test``."""
    _require_gt(test)
    arrays = train.prepare_arrays(test, "supervised")
    pred = train.predict(params, arrays, variant, seed, dtype=dtype)
    return evaluate_predictions(test, pred, VARIANT_LABELS[variant])


def evaluate_pseudo_labels(test: Sequence[Sample], cfg: PseudoLabelConfig = PseudoLabelConfig()) -> EvalReport:
    """Score freshly built pseudo-labels on joints that are both labeled and gt-valid."""
    _require_gt(test)
    preds, scored = [], []
    for s in test:
        p = make_pseudo_labels(s, cfg, frame="box")
        preds.append(p.joints)
        scored.append(p.valid & s.gt3d.valid)
    gt = np.stack([train.box_frame_pose(s, s.gt3d) for s in test])
    err = np.linalg.norm(np.stack(preds) - gt, axis=-1)
    return report_from_errors(PSEUDO_LABELS[cfg.weighting], [s.id for s in test], err, np.stack(scored))


# --- output -------------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def report_rows(reports: Sequence[EvalReport]) -> list[list[str]]:
    head = ["variant", "overall_mpjpe_cm", "n_samples", "n_valid_joints"] + [f"{n}_cm" for n in JOINT_NAMES]
    rows = [head]
    for r in reports:
        rows.append([r.variant, _fmt(r.overall_mpjpe_cm), str(r.n_samples), str(r.n_valid_joints)]
                    + [_fmt(v) for v in r.per_joint_mpjpe_cm])
    return rows


def write_report_csv(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(report_rows(reports))


def format_table(reports: Sequence[EvalReport], per_joint: bool = False) -> str:
    """Plain-text table, one row per report."""
    lines = [f"{'variant':<14}{'MPJPE [cm]':>12}{'samples':>10}{'joints':>10}"]
    for r in reports:
        lines.append(f"{r.variant:<14}{r.overall_mpjpe_cm:>12.2f}{r.n_samples:>10d}{r.n_valid_joints:>10d}")
    if per_joint:
        lines.append("")
        lines.append(f"{'joint':<16}" + "".join(f"{r.variant:>14}" for r in reports))
        for j, name in enumerate(JOINT_NAMES):
            lines.append(f"{name:<16}" + "".join(f"{r.per_joint_mpjpe_cm[j]:>14.2f}" for r in reports))
    return "\n".join(lines)


def write_per_sample(report: EvalReport, path) -> None:
    """One JSON record per sample: id and per-joint errors in cm (null if unscored)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in report.records:
            errs = [None if math.isnan(v) else float(f"{v:.9g}") for v in rec.per_joint_cm]
            fh.write(json.dumps({"id": rec.id, "variant": report.variant, "per_joint_cm": errs},
                                separators=(",", ":")) + "\n")
