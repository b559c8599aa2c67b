"""Desk-scale experiments shared by the acceptance tests and ``scripts/``.

``run_branch_comparison`` trains the three model variants on one supervised
synthetic split. ``run_pseudo_label_study`` scores both pseudo-label
weightings directly and trains a weakly supervised model on the 3D ones.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from fusionpose import dataio, evaluation, nn, synth, train
from fusionpose.evaluation import EvalReport
from fusionpose.pseudolabel import PseudoLabelConfig, label_dataset


def make_split(n_train: int, n_test: int, seed: int, profile: str):
    """Generate ``n_train + n_test`` samples and split them with the same seed."""
    data = synth.generate_dataset(synth.profile_config(profile, n_samples=n_train + n_test, rng_seed=seed))
    tr, te = dataio.split(data, n_train / (n_train + n_test), seed)
    if (len(tr), len(te)) != (n_train, n_test):
        raise RuntimeError(f"split produced {len(tr)}/{len(te)}, expected {n_train}/{n_test}")
    return tr, te


@dataclass
class BranchComparison:
    reports: dict[str, EvalReport] = field(default_factory=dict)
    initial_cm: dict[str, float] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    params: dict[str, nn.ModelParams] = field(default_factory=dict)

    def best_single(self) -> float:
        return min(self.reports["lifting"].overall_mpjpe_cm, self.reports["point"].overall_mpjpe_cm)

    def fusion_gain(self) -> float:
        """Relative improvement of fusion over the better single branch."""
        return 1.0 - self.reports["fusion"].overall_mpjpe_cm / self.best_single()


def run_branch_comparison(n_train: int = 2000, n_test: int = 400, epochs: int = 50, seed: int = 42,
                          profile: str = "nominal", variants=("lifting", "point", "fusion"),
                          log: Callable[[str], None] | None = None) -> BranchComparison:
    log = log or (lambda _: None)
    tr, te = make_split(n_train, n_test, seed, profile)
    out = BranchComparison()
    for v in variants:
        t0 = time.perf_counter()
        cfg = train.TrainConfig(mode="supervised", epochs=epochs, seed=seed, variant=v)
        out.initial_cm[v] = evaluation.evaluate(nn.init_params(seed, cfg.architecture), te, v, seed,
                                                dtype=np.float32).overall_mpjpe_cm
        res = train.train(tr, cfg, progress=lambda r, v=v: log(f"{v} epoch {r.epoch} loss {r.train_loss:.4f}"))
        out.params[v] = res.params
        out.reports[v] = evaluation.evaluate(res.params, te, v, seed, dtype=np.float32)
        out.seconds[v] = time.perf_counter() - t0
        log(f"{v}: {out.reports[v].overall_mpjpe_cm:.2f} cm ({out.seconds[v]:.0f}s)")
    return out


@dataclass
class PseudoLabelStudy:
    pseudo: dict[str, EvalReport] = field(default_factory=dict)  # keyed by weighting
    weak: EvalReport | None = None
    weak_on_labeled: EvalReport | None = None
    coverage: float = float("nan")
    seconds: float = 0.0

    def weighting_gain(self) -> float:
        """Relative improvement of 3D over 2D weighting."""
        return 1.0 - self.pseudo["three_d"].overall_mpjpe_cm / self.pseudo["two_d_baseline"].overall_mpjpe_cm


def run_pseudo_label_study(n_train: int = 2000, n_test: int = 400, epochs: int = 25, seed: int = 42,
                           profile: str = "outlier-heavy", threshold: float = 0.8, train_weak: bool = True,
                           log: Callable[[str], None] | None = None) -> PseudoLabelStudy:
    log = log or (lambda _: None)
    t0 = time.perf_counter()
    tr, te = make_split(n_train, n_test, seed, profile)
    out = PseudoLabelStudy()
    for w in ("three_d", "two_d_baseline"):
        out.pseudo[w] = evaluation.evaluate_pseudo_labels(te, PseudoLabelConfig(weighting=w,
                                                                                 confidence_threshold=threshold))
        log(f"pseudo {w}: {out.pseudo[w].overall_mpjpe_cm:.2f} cm")
    if train_weak:
        labeled, cov = label_dataset(tr, PseudoLabelConfig(confidence_threshold=threshold))
        out.coverage = cov.fraction
        cfg = train.TrainConfig(mode="weakly_supervised", epochs=epochs, seed=seed, confidence_threshold=threshold)
        res = train.train(labeled, cfg, progress=lambda r: log(f"weak epoch {r.epoch} loss {r.train_loss:.4f}"))
        out.weak = evaluation.evaluate(res.params, te, "fusion", seed, dtype=np.float32)
        # same joints as the 3D pseudo-labels, for a like-for-like reading
        scored = np.isfinite(np.stack([r.per_joint_cm for r in out.pseudo["three_d"].records]))
        err = np.stack([r.per_joint_cm for r in out.weak.records]) / 100.0
        out.weak_on_labeled = evaluation.report_from_errors("fusion", [s.id for s in te], err, scored)
        log(f"weak fusion: {out.weak.overall_mpjpe_cm:.2f} cm "
            f"({out.weak_on_labeled.overall_mpjpe_cm:.2f} cm on pseudo-labeled joints)")
    out.seconds = time.perf_counter() - t0
    return out
