"""Adam, learning-rate schedule and the supervised / weakly supervised loops."""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from fusionpose import geometry, nn
from fusionpose.losses import confidence_weights, weighted_mpjpe, weighted_mpjpe_loss  # noqa: F401
from fusionpose.model import N_JOINTS, Sample

Mode = Literal["supervised", "weakly_supervised"]
MODES = ("supervised", "weakly_supervised")
DEFAULT_EPOCHS = {"supervised": 250, "weakly_supervised": 25}


class MissingTargetsError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: Mode = "supervised"
    epochs: int | None = None  # None -> 250 supervised, 25 weakly supervised
    learning_rate: float = 5e-4
    lr_decay_per_epoch: float = 0.95
    batch_size: int = 64
    confidence_threshold: float = 0.8
    seed: int = 42
    branch_dropout_prob: float = 0.0
    variant: nn.Variant = "fusion"
    compute_dtype: str = "float32"
    architecture: nn.Architecture = field(default_factory=nn.Architecture)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.mode]
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must lie in (0, 1]")
        if not 0 <= self.confidence_threshold <= 1:
            raise ValueError("confidence_threshold must lie in [0, 1]")
        if self.variant not in nn.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              active: slice = slice(None)):
    """Bias-corrected Adam update, in place; returns (params, state).

    Uses the equivalent folded form ``lr_t * m / (sqrt(v) + eps_t)`` with
    ``lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t)``, ``eps_t = eps * sqrt(1 - b2^t)``.
    ``active`` restricts the update to a parameter range whose complement
    has zero gradient (an untouched coordinate would not move anyway).
    """
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c2 = math.sqrt(1 - b2**t)
    lr_t = lr * c2 / (1 - b1**t)
    eps_t = state.eps * c2
    g, m, v, p = grads[active], state.m[active], state.v[active], params[active]
    tmp = np.multiply(g, 1 - b1)
    m *= b1
    m += tmp
    np.multiply(g, g, out=tmp)
    tmp *= 1 - b2
    v *= b2
    v += tmp
    np.sqrt(v, out=tmp)
    tmp += eps_t
    np.divide(m, tmp, out=tmp)
    tmp *= lr_t
    p -= tmp
    return params, state


def active_slice(params: nn.ModelParams, variant: str) -> slice:
    """Contiguous parameter range trained by ``variant``."""
    if variant == "fusion":
        return slice(0, params.size)
    prefix = "lift." if variant == "lifting" else "point."
    spans = [(a, b) for name, (a, b, _) in params.slices.items() if name.startswith(prefix)]
    return slice(spans[0][0], spans[-1][1])


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Exponential decay per epoch in weakly supervised mode, constant otherwise."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if cfg.mode == "weakly_supervised":
        return cfg.learning_rate * cfg.lr_decay_per_epoch**epoch
    return cfg.learning_rate


# --- data preparation -------------------------------------------------------------------

@dataclass
class Arrays:
    """Model-ready tensors for a list of samples, all in the box-centered frame."""

    ids: list[str]
    x: np.ndarray  # (n, 26)
    clouds: list[np.ndarray]  # n x (N_i, 3)
    target: np.ndarray  # (n, 13, 3)
    valid: np.ndarray  # (n, 13)
    beta: np.ndarray  # (n, 13)

    def __len__(self):
        return len(self.ids)


def lifting_input(s: Sample) -> np.ndarray:
    try:
        return geometry.normalize_keypoints(s.keypoints2d).flat()
    except geometry.DegenerateBoxError:
        return np.zeros(2 * N_JOINTS)


def box_frame_cloud(s: Sample) -> np.ndarray:
    return geometry.to_camera_box_frame(s.cloud.points, s.bbox3d_center, s.camera.extrinsics)


def box_frame_pose(s: Sample, pose) -> np.ndarray:
    return geometry.to_camera_box_frame(pose.joints, s.bbox3d_center, s.camera.extrinsics)


def prepare_arrays(samples: Sequence[Sample], mode: str = "supervised", threshold: float = 0.8,
                   require_targets: bool = True) -> Arrays:
    """Inputs plus targets for ``mode``.

    Supervised: ground truth, unit weights. Weakly supervised: pseudo-labels
    on joints whose confidence exceeds ``threshold``, weighted by
    :func:`confidence_weights`; samples left without a target joint are
    dropped. With ``require_targets=False`` samples lacking targets keep an
    all-invalid mask (inference only).
    """
    ids, xs, clouds, targets, valids, betas = [], [], [], [], [], []
    for s in samples:
        conf = s.keypoints2d.confidence
        if mode == "supervised":
            pose = s.gt3d
            if pose is None and require_targets:
                raise MissingTargetsError(f"supervised mode requires gt3d on every sample ({s.id} has none)")
            valid = pose.valid.copy() if pose is not None else np.zeros(N_JOINTS, bool)
            beta = np.ones(N_JOINTS)
        elif mode == "weakly_supervised":
            pose = s.pseudo3d
            if pose is None and require_targets:
                raise MissingTargetsError(
                    f"weakly supervised mode requires pseudo3d on every sample ({s.id} has none); "
                    "run the pseudolabel step first")
            valid = (pose.valid & (conf > threshold)) if pose is not None else np.zeros(N_JOINTS, bool)
            beta = np.zeros(N_JOINTS)
            beta[valid] = confidence_weights(conf[valid])
            if require_targets and not valid.any():
                continue
        else:
            raise ValueError(f"unknown mode {mode!r}")
        ids.append(s.id)
        xs.append(lifting_input(s))
        clouds.append(box_frame_cloud(s))
        targets.append(box_frame_pose(s, pose) if pose is not None else np.zeros((N_JOINTS, 3)))
        valids.append(valid)
        betas.append(beta)
    n = len(ids)
    return Arrays(
        ids,
        np.array(xs).reshape(n, 2 * N_JOINTS),
        clouds,
        np.array(targets).reshape(n, N_JOINTS, 3),
        np.array(valids, dtype=bool).reshape(n, N_JOINTS),
        np.array(betas).reshape(n, N_JOINTS),
    )


def eval_rng(sample_id: str, seed: int) -> np.random.Generator:
    """Per-sample resampling stream, independent of test-set order."""
    return np.random.default_rng([zlib.crc32(sample_id.encode()), seed])


def predict(params: nn.ModelParams, arrays: Arrays, variant: nn.Variant = "fusion", seed: int = 42,
            batch_size: int = 128, dtype=np.float64) -> np.ndarray:
    """Eval-mode predictions (n, 13, 3) in the box-centered frame."""
    P = params.arch.n_points
    w = params.weights(dtype)
    out = np.empty((len(arrays), N_JOINTS, 3))
    for lo in range(0, len(arrays), batch_size):
        sl = slice(lo, lo + batch_size)
        cloud = counts = None
        if variant != "lifting":
            cloud = np.stack([nn.resample_cloud(c, P, eval_rng(i, seed))
                              for i, c in zip(arrays.ids[sl], arrays.clouds[sl])])
            counts = [nn.distinct_rows(len(c), P) for c in arrays.clouds[sl]]
        y, _ = nn.model_forward(params, arrays.x[sl], cloud, variant, train=False, weights=w, dtype=dtype,
                                counts=counts)
        out[sl] = y.reshape(-1, N_JOINTS, 3)
    return out


def mean_mpjpe(pred: np.ndarray, target: np.ndarray, valid: np.ndarray) -> float:
    """Valid-joint-weighted mean joint error in meters."""
    err = np.linalg.norm(pred - target, axis=-1)
    return math.fsum(err[valid]) / max(int(valid.sum()), 1)


# --- training -----------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_mpjpe_cm: float


@dataclass
class TrainResult:
    params: nn.ModelParams
    log: list[EpochLog]


def write_log_csv(log: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "val_mpjpe_cm"])
        for r in log:
            w.writerow([r.epoch, f"{r.lr:.9g}", f"{r.train_loss:.9g}", f"{r.val_mpjpe_cm:.9g}"])


def _branch_availability(n: int, p: float, rng: np.random.Generator):
    if p <= 0:
        return None
    av = np.ones((n, 2))
    drop = rng.random(n) < p
    which = rng.integers(0, 2, n)
    av[drop, which[drop]] = 0.0
    return av


def _eval_loss(params, arrays: Arrays, cfg: TrainConfig) -> float:
    pred = predict(params, arrays, cfg.variant, cfg.seed, dtype=np.dtype(cfg.compute_dtype))
    loss, _ = weighted_mpjpe(pred, arrays.target, arrays.valid, arrays.beta)
    return loss


def train(
    data: Sequence[Sample],
    cfg: TrainConfig = TrainConfig(),
    val: Sequence[Sample] | None = None,
    progress: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Train the configured variant end to end; fully determined by ``cfg``.

    The log starts with an epoch-0 row measured at initialization.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    mode = cfg.mode
    arrays = prepare_arrays(data, mode, cfg.confidence_threshold)
    if len(arrays) == 0:
        raise MissingTargetsError("no sample has a usable target joint")
    val_arrays = prepare_arrays(val, "supervised") if val else None
    arch = cfg.architecture
    dtype = np.dtype(cfg.compute_dtype)
    rng = np.random.default_rng(cfg.seed)
    params = nn.init_params(cfg.seed, arch)
    state = AdamState.zeros(params.size)
    active = active_slice(params, cfg.variant)

    def val_cm():
        if val_arrays is None:
            return float("nan")
        pred = predict(params, val_arrays, cfg.variant, cfg.seed, dtype=dtype)
        return 100.0 * mean_mpjpe(pred, val_arrays.target, val_arrays.valid)

    log = [EpochLog(0, lr_schedule(0, cfg), _eval_loss(params, arrays, cfg), val_cm())]
    if progress:
        progress(log[-1])
    n = len(arrays)
    P = arch.n_points
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(epoch - 1, cfg)
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            cloud = counts = None
            if cfg.variant != "lifting":
                cloud = np.stack([nn.resample_cloud(arrays.clouds[i], P, rng) for i in idx])
                counts = [nn.distinct_rows(len(arrays.clouds[i]), P) for i in idx]
            batch = nn.Batch(arrays.x[idx], cloud, arrays.target[idx], arrays.valid[idx], arrays.beta[idx], counts)
            avail = _branch_availability(len(idx), cfg.branch_dropout_prob, rng) if cfg.variant == "fusion" else None
            loss, dy, trace = nn.batch_loss(params, batch, cfg.variant, train=True, rng=rng,
                                            available=avail, weights=params.weights(dtype), dtype=dtype)
            grad = nn.backward(trace, dy)
            adam_step(params.flat, grad, state, lr, active)
            total += loss * len(idx)
        log.append(EpochLog(epoch, lr, total / n, val_cm()))
        if progress:
            progress(log[-1])
    return TrainResult(params, log)
