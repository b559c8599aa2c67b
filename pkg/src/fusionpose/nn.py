"""Two-branch pose regressor with hand-written forward and backward passes.

Lifting branch: residual MLP over the 26 normalized keypoint coordinates.
Point branch: shared per-point layers, global max-pool, three dense layers.
Fusion: one linear layer over the concatenated 39-d branch outputs.

Weights are ``x @ W + b`` with ``W`` of shape (fan_in, fan_out). All
parameters live in one float64 vector (:class:`ModelParams`); the forward
pass may run in float32 on a cast copy, gradients are returned as float64
in the same flat layout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.sparse as sp

from fusionpose.losses import weighted_mpjpe

Variant = Literal["fusion", "lifting", "point"]
VARIANTS = ("fusion", "lifting", "point")


@dataclass(frozen=True)
class Architecture:
    n_joints: int = 13
    lift_in: int = 26
    lift_width: int = 512
    lift_blocks: int = 4
    point_in: int = 3
    point_widths: tuple[int, ...] = (64, 64, 64, 128, 1024)
    head_widths: tuple[int, ...] = (512, 256)
    out_dim: int = 39
    lift_dropout: float = 0.1
    head_dropout: float = 0.4
    n_points: int = 512

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []

        def dense(name, i, o):
            out.append((f"{name}.W", (i, o)))
            out.append((f"{name}.b", (o,)))

        w = self.lift_width
        dense("lift.in", self.lift_in, w)
        for k in range(self.lift_blocks):
            dense(f"lift.block{k}.0", w, w)
            dense(f"lift.block{k}.1", w, w)
        dense("lift.out", w, self.out_dim)
        prev = self.point_in
        for k, c in enumerate(self.point_widths):
            dense(f"point.conv{k}", prev, c)
            prev = c
        dims = [prev, *self.head_widths, self.out_dim]
        for k in range(len(dims) - 1):
            dense(f"point.fc{k}", dims[k], dims[k + 1])
        dense("fuse", 2 * self.out_dim, self.out_dim)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        for k in ("point_widths", "head_widths"):
            d[k] = tuple(d[k])
        return cls(**d)


class ModelParams:
    """Every learnable array of the model, backed by one flat float64 vector."""

    def __init__(self, arch: Architecture = Architecture(), flat: np.ndarray | None = None):
        self.arch = arch
        self.shapes = arch.layer_shapes()
        self.slices: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        n = 0
        for name, shape in self.shapes:
            size = int(np.prod(shape))
            self.slices[name] = (n, n + size, shape)
            n += size
        self.size = n
        if flat is None:
            self.flat = np.zeros(n)
        else:
            flat = np.asarray(flat, dtype=np.float64)
            if flat.shape != (n,):
                raise ValueError(f"flat vector has shape {flat.shape}, expected ({n},)")
            self.flat = flat

    def names(self) -> list[str]:
        return [n for n, _ in self.shapes]

    def views(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        return {name: vec[a:b].reshape(shape) for name, (a, b, shape) in self.slices.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        a, b, shape = self.slices[name]
        return self.flat[a:b].reshape(shape)

    def weights(self, dtype=np.float64) -> dict[str, np.ndarray]:
        return self.views(self.flat.astype(dtype, copy=dtype != np.float64))

    def flatten(self) -> np.ndarray:
        return self.flat.copy()

    @classmethod
    def unflatten(cls, arch: Architecture, vec: np.ndarray) -> "ModelParams":
        return cls(arch, np.array(vec, dtype=np.float64))

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.flat.copy())

    def owner(self, index: int) -> str:
        for name, (a, b, _) in self.slices.items():
            if a <= index < b:
                return name
        raise IndexError(index)


def init_params(seed: int = 42, arch: Architecture = Architecture()) -> ModelParams:
    """He-normal weights for rectifier-fed layers, zero biases.

    Output layers use variance 1/fan_in; the fusion layer starts as the
    branch average ``[0.5 I | 0.5 I]``.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams(arch)
    n_fc = len(arch.head_widths) + 1
    linear_out = {"lift.out.W", f"point.fc{n_fc - 1}.W"}
    for name, shape in params.shapes:
        if not name.endswith(".W") or name == "fuse.W":
            continue
        gain = 1.0 if name in linear_out else 2.0
        params[name][...] = rng.normal(0.0, np.sqrt(gain / shape[0]), shape)
    o = arch.out_dim
    fw = params["fuse.W"]
    fw[:o] = 0.5 * np.eye(o)
    fw[o:] = 0.5 * np.eye(o)
    return params


# --- forward ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    variant: str
    weights: dict
    layout: ModelParams
    lift: dict = field(default_factory=dict)
    point: dict = field(default_factory=dict)
    fuse: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    gates: dict | None = None
    batch_size: int = 0


def _relu(z, key=None, gates=None):
    """Rectifier; with a ``gates`` dict the on/off pattern is recorded or, if present, reused."""
    if gates is None:
        return np.maximum(z, 0)
    g = gates.get(key)
    if g is None:
        g = gates[key] = z > 0
    return np.where(g, z, 0).astype(z.dtype, copy=False)


def _dropout(h, p, key, train, rng, masks):
    if not train or p == 0:
        return h, None
    m = masks.get(key)
    if m is None:
        m = ((rng.random(h.shape) >= p) / (1.0 - p)).astype(h.dtype)
        masks[key] = m
    elif m.shape != h.shape:
        raise ValueError(f"frozen mask {key} has shape {m.shape}, activations {h.shape}")
    return h * m, m


def _check_finite(y, where):
    if not np.isfinite(y).all():
        raise FloatingPointError(f"non-finite activations in {where}")


def lifting_forward(x, w, arch: Architecture, train: bool, rng, masks: dict, gates=None):
    """Residual MLP; returns (output (B, out_dim), cache)."""
    cache = {"x": x}
    a = _relu(x @ w["lift.in.W"] + w["lift.in.b"], "lift.in", gates)
    h, m = _dropout(a, arch.lift_dropout, "lift.in", train, rng, masks)
    cache["in"] = (a, m)
    blocks = []
    for k in range(arch.lift_blocks):
        inp = h
        a1 = _relu(inp @ w[f"lift.block{k}.0.W"] + w[f"lift.block{k}.0.b"], f"lift.block{k}.0", gates)
        d1, m1 = _dropout(a1, arch.lift_dropout, f"lift.block{k}.0", train, rng, masks)
        a2 = _relu(d1 @ w[f"lift.block{k}.1.W"] + w[f"lift.block{k}.1.b"], f"lift.block{k}.1", gates)
        d2, m2 = _dropout(a2, arch.lift_dropout, f"lift.block{k}.1", train, rng, masks)
        h = inp + d2
        blocks.append((inp, a1, m1, d1, a2, m2))
    cache["blocks"] = blocks
    cache["h"] = h
    y = h @ w["lift.out.W"] + w["lift.out.b"]
    _check_finite(y, "lifting branch")
    return y, cache


def lifting_backward(dy, cache, w, arch: Architecture, g):
    h = cache["h"]
    g["lift.out.W"] += h.T @ dy
    g["lift.out.b"] += dy.sum(0)
    dh = dy @ w["lift.out.W"].T
    for k in reversed(range(arch.lift_blocks)):
        inp, a1, m1, d1, a2, m2 = cache["blocks"][k]
        dz2 = (dh if m2 is None else dh * m2) * (a2 > 0)
        g[f"lift.block{k}.1.W"] += d1.T @ dz2
        g[f"lift.block{k}.1.b"] += dz2.sum(0)
        dd1 = dz2 @ w[f"lift.block{k}.1.W"].T
        dz1 = (dd1 if m1 is None else dd1 * m1) * (a1 > 0)
        g[f"lift.block{k}.0.W"] += inp.T @ dz1
        g[f"lift.block{k}.0.b"] += dz1.sum(0)
        dh = dh + dz1 @ w[f"lift.block{k}.0.W"].T
    a, m = cache["in"]
    dz = (dh if m is None else dh * m) * (a > 0)
    g["lift.in.W"] += cache["x"].T @ dz
    g["lift.in.b"] += dz.sum(0)


def point_forward(cloud, w, arch: Architecture, train: bool, rng, masks: dict, gates=None, counts=None):
    """Shared per-point layers + max-pool + dense head; cloud is (B, P, 3).

    ``counts[b]`` says that only the first ``counts[b]`` rows of sample b are
    distinct and the rest repeat them (as ``resample_cloud`` pads). Max-pooling
    ignores repeats, so those rows are skipped and the output is unchanged.
    """
    B, P, _ = cloud.shape
    n_conv = len(arch.point_widths)
    if counts is None:
        h = cloud.reshape(B * P, -1)
        offsets = np.arange(B + 1) * P
    else:
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (B,) or (counts < 1).any() or (counts > P).any():
            raise ValueError(f"counts must hold {B} values in [1, {P}]")
        h = np.concatenate([cloud[b, :counts[b]] for b in range(B)])
        offsets = np.r_[0, np.cumsum(counts)]
    cache = {"offsets": offsets}
    trunk = []
    for k in range(n_conv - 1):
        a = _relu(h @ w[f"point.conv{k}.W"] + w[f"point.conv{k}.b"], f"point.conv{k}", gates)
        trunk.append((h, a))
        h = a
    cache["trunk"] = trunk
    # last shared layer is pooled straight away; relu and max commute
    W_last = w[f"point.conv{n_conv - 1}.W"]
    WT = np.ascontiguousarray(W_last.T)
    C = W_last.shape[1]
    frozen_idx = None if gates is None else gates.get("point.pool")
    idx = np.empty((B, C), dtype=np.int64) if frozen_idx is None else frozen_idx
    zmax = np.empty((B, C), dtype=h.dtype)
    cols = np.arange(C)
    for b in range(B):
        zt = WT @ h[offsets[b]:offsets[b + 1]].T  # (C, points), contiguous along points
        if frozen_idx is None:
            idx[b] = zt.argmax(axis=1)
        zmax[b] = zt[cols, idx[b]]
    if gates is not None:
        gates["point.pool"] = idx
    pooled = _relu(zmax + w[f"point.conv{n_conv - 1}.b"], f"point.conv{n_conv - 1}", gates)
    cache["last"] = (h, idx, pooled)
    n_fc = len(arch.head_widths) + 1
    fc = []
    h = pooled
    for k in range(n_fc - 1):
        a = _relu(h @ w[f"point.fc{k}.W"] + w[f"point.fc{k}.b"], f"point.fc{k}", gates)
        fc.append((h, a))
        h = a
    hd, m = _dropout(h, arch.head_dropout, "point.head", train, rng, masks)
    cache["fc"] = fc
    cache["head"] = (hd, m)
    y = hd @ w[f"point.fc{n_fc - 1}.W"] + w[f"point.fc{n_fc - 1}.b"]
    _check_finite(y, "point branch")
    return y, cache


def point_backward(dy, cache, w, arch: Architecture, g):
    offsets = cache["offsets"]
    B = len(offsets) - 1
    n_conv = len(arch.point_widths)
    n_fc = len(arch.head_widths) + 1
    hd, m = cache["head"]
    last = f"point.fc{n_fc - 1}"
    g[f"{last}.W"] += hd.T @ dy
    g[f"{last}.b"] += dy.sum(0)
    dh = dy @ w[f"{last}.W"].T
    if m is not None:
        dh = dh * m
    for k in reversed(range(n_fc - 1)):
        inp, a = cache["fc"][k]
        dz = dh * (a > 0)
        g[f"point.fc{k}.W"] += inp.T @ dz
        g[f"point.fc{k}.b"] += dz.sum(0)
        dh = dz @ w[f"point.fc{k}.W"].T

    h_flat, idx, pooled = cache["last"]
    name = f"point.conv{n_conv - 1}"
    dmax = dh * (pooled > 0)  # (B, C)
    g[f"{name}.b"] += dmax.sum(0)
    C = idx.shape[1]
    rows = (offsets[:-1, None] + idx).reshape(-1)
    # gradient reaches only the points that won some channel of the max-pool
    used, inv = np.unique(rows, return_inverse=True)
    g[f"{name}.W"] += np.einsum("bci,bc->ic", h_flat[rows].reshape(B, C, -1), dmax)
    if n_conv == 1:
        return
    S = sp.csr_matrix(
        (dmax.reshape(-1), (inv.reshape(-1), np.tile(np.arange(C), B))), shape=(len(used), C)
    )
    dh = np.asarray(S @ w[f"{name}.W"].T)
    for k in reversed(range(n_conv - 1)):
        inp, a = cache["trunk"][k]
        dz = dh * (a[used] > 0)
        g[f"point.conv{k}.W"] += inp[used].T @ dz
        g[f"point.conv{k}.b"] += dz.sum(0)
        if k > 0:
            dh = dz @ w[f"point.conv{k}.W"].T


def fusion_forward(lift_out, point_out, w, available=None):
    """Linear fusion of the two 39-d branch outputs.

    ``available`` is an optional (B, 2) 0/1 array; an unavailable branch
    contributes a zero embedding.
    """
    if available is None:
        cat = np.concatenate([lift_out, point_out], axis=1)
    else:
        av = np.asarray(available, dtype=lift_out.dtype)
        cat = np.concatenate([lift_out * av[:, :1], point_out * av[:, 1:2]], axis=1)
    y = cat @ w["fuse.W"] + w["fuse.b"]
    return y, {"cat": cat, "available": available}


def fusion_backward(dy, cache, w, g, out_dim):
    g["fuse.W"] += cache["cat"].T @ dy
    g["fuse.b"] += dy.sum(0)
    dcat = dy @ w["fuse.W"].T
    dl, dp = dcat[:, :out_dim], dcat[:, out_dim:]
    av = cache["available"]
    if av is not None:
        av = np.asarray(av, dtype=dy.dtype)
        dl, dp = dl * av[:, :1], dp * av[:, 1:2]
    return dl, dp


def model_forward(
    params: ModelParams,
    x: np.ndarray | None,
    cloud: np.ndarray | None,
    variant: Variant = "fusion",
    train: bool = False,
    rng: np.random.Generator | None = None,
    masks: dict | None = None,
    available=None,
    weights: dict | None = None,
    dtype=np.float64,
    gates: dict | None = None,
    counts=None,
):
    """Run the selected variant; returns (prediction (B, out_dim), trace).

    ``masks`` freezes dropout masks (keys are layer names); when omitted in
    train mode fresh masks are drawn from ``rng`` and stored on the trace.
    ``gates`` does the same for rectifier patterns and max-pool winners:
    pass an empty dict to record them, a filled one to replay them.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if train and rng is None and masks is None:
        raise ValueError("train mode needs an rng or frozen masks")
    arch = params.arch
    w = weights if weights is not None else params.weights(dtype)
    masks = {} if masks is None else dict(masks)
    trace = ForwardTrace(variant, w, params, masks=masks, gates=gates)
    outs = {}
    if variant in ("fusion", "lifting"):
        x = np.asarray(x, dtype=dtype)
        outs["lift"], trace.lift = lifting_forward(x, w, arch, train, rng, masks, gates)
        trace.batch_size = len(x)
    if variant in ("fusion", "point"):
        cloud = np.asarray(cloud, dtype=dtype)
        outs["point"], trace.point = point_forward(cloud, w, arch, train, rng, masks, gates, counts)
        trace.batch_size = len(cloud)
    if variant == "fusion":
        y, trace.fuse = fusion_forward(outs["lift"], outs["point"], w, available)
    else:
        y = outs["lift" if variant == "lifting" else "point"]
    return y, trace


def backward(trace: ForwardTrace, dy: np.ndarray) -> np.ndarray:
    """Reverse pass; returns the float64 flat gradient in the params layout."""
    arch = trace.layout.arch
    dy = np.asarray(dy)
    if dy.shape != (trace.batch_size, arch.out_dim):
        raise ValueError(f"output gradient has shape {dy.shape}, expected ({trace.batch_size}, {arch.out_dim})")
    dt = next(iter(trace.weights.values())).dtype
    dy = dy.astype(dt, copy=False)
    flat = np.zeros(trace.layout.size, dtype=dt)
    g = trace.layout.views(flat)
    w = trace.weights
    if trace.variant == "fusion":
        dl, dp = fusion_backward(dy, trace.fuse, w, g, arch.out_dim)
    else:
        dl = dp = dy
    if trace.variant in ("fusion", "lifting"):
        lifting_backward(dl, trace.lift, w, arch, g)
    if trace.variant in ("fusion", "point"):
        point_backward(dp, trace.point, w, arch, g)
    flat = flat.astype(np.float64, copy=False)
    _check_finite(flat, "gradient")
    return flat


# --- inputs ------------------------------------------------------------------------------

def resample_cloud(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``n`` points: a uniform subset, or every point plus random repeats."""
    N = len(points)
    if N == n:
        return points
    if N > n:
        return points[np.sort(rng.choice(N, n, replace=False))]
    extra = rng.choice(N, n - N, replace=True)
    return points[np.concatenate([np.arange(N), extra])]


def distinct_rows(n_points: int, n: int) -> int:
    """Leading rows of ``resample_cloud(points, n)`` that are not repeats (given distinct input points)."""
    return min(n_points, n)


@dataclass
class Batch:
    x: np.ndarray  # (B, lift_in)
    cloud: np.ndarray  # (B, P, 3)
    target: np.ndarray  # (B, J, 3)
    valid: np.ndarray  # (B, J)
    beta: np.ndarray  # (B, J)
    counts: np.ndarray | None = None  # distinct leading rows per cloud, see point_forward

    def __len__(self):
        return len(self.target)


def batch_loss(params: ModelParams, batch: Batch, variant: Variant = "fusion", train=False, rng=None,
               masks=None, available=None, dtype=np.float64, weights=None, gates=None):
    """Loss, output gradient and trace for one batch."""
    y, trace = model_forward(params, batch.x, batch.cloud, variant, train, rng, masks, available,
                             weights=weights, dtype=dtype, gates=gates, counts=batch.counts)
    J = params.arch.n_joints
    pred = y.reshape(len(y), J, -1)
    loss, dpred = weighted_mpjpe(pred, batch.target, batch.valid, batch.beta)
    return loss, dpred.reshape(len(y), -1), trace


# --- gradient check -------------------------------------------------------------------

def relative_error(ga, gn):
    ga, gn = np.asarray(ga, float), np.asarray(gn, float)
    return np.abs(ga - gn) / np.maximum(np.abs(ga) + np.abs(gn), 1e-8)


def numeric_gradient(f, theta: np.ndarray, indices, epsilon: float) -> np.ndarray:
    """Central differences of scalar ``f`` at ``theta`` for the given coordinates."""
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        old = theta[i]
        theta[i] = old + epsilon
        fp = f(theta)
        theta[i] = old - epsilon
        fm = f(theta)
        theta[i] = old
        out[n] = (fp - fm) / (2 * epsilon)
    return out


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: int
    worst_name: str
    n_checked: int
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def choose_check_indices(params: ModelParams, grad: np.ndarray, per_tensor: int, rng) -> np.ndarray:
    """Per tensor: the largest-magnitude gradient entry plus random entries."""
    chosen = []
    for name, (a, b, _) in params.slices.items():
        chosen.append(a + int(np.argmax(np.abs(grad[a:b]))))
        k = min(per_tensor - 1, b - a)
        if k > 0:
            chosen.extend(a + rng.choice(b - a, k, replace=False))
    return np.unique(np.array(chosen, dtype=np.int64))


def grad_check(
    params: ModelParams,
    batch: Batch,
    epsilon: float = 1e-5,
    variant: Variant = "fusion",
    seed: int = 0,
    per_tensor: int = 4,
    corrupt_index: int | None = None,
    freeze_gates: bool = True,
) -> GradCheckResult:
    """Compare backprop against central differences of the full batch loss.

    Runs in float64 with dropout masks drawn once and then frozen. Checks a
    sample of coordinates from every parameter tensor.

    With ``freeze_gates`` the rectifier patterns and max-pool winners of the
    unperturbed pass are replayed during the differences, so the numeric
    derivative is taken on the active linear piece. Without it, a step of
    1e-5 in a shared point-layer weight flips some of the ~10^6 gates in the
    batch and the difference straddles a kink.
    ``corrupt_index`` doubles one analytic component to exercise the checker.
    """
    rng = np.random.default_rng(seed)
    gates = {} if freeze_gates else None
    _, dy, trace = batch_loss(params, batch, variant, train=True, rng=rng, gates=gates)
    masks = trace.masks
    grad = backward(trace, dy)
    idx = choose_check_indices(params, grad, per_tensor, rng)
    if corrupt_index is not None:
        grad = grad.copy()
        grad[corrupt_index] *= 2.0
        idx = np.union1d(idx, [corrupt_index])
    theta = params.flat.copy()
    probe = ModelParams(params.arch, theta)

    def f(_):
        return batch_loss(probe, batch, variant, train=True, masks=masks, gates=gates)[0]

    gn = numeric_gradient(f, theta, idx, epsilon)
    ga = grad[idx]
    rel = relative_error(ga, gn)
    worst = int(np.argmax(rel))
    return GradCheckResult(float(rel[worst]), int(idx[worst]), params.owner(int(idx[worst])), len(idx), idx, ga, gn)


# --- checkpoints ----------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FPOSECKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, seed: int, meta: dict | None = None) -> None:
    """Binary little-endian checkpoint.

    Layout: 8-byte magic, uint32 version, int64 seed, uint32 header length,
    UTF-8 JSON header (architecture, ordered layer-shape manifest, meta),
    then the flat parameter vector as float64.
    """
    header = {
        "architecture": asdict(params.arch),
        "layers": [[n, list(s)] for n, s in params.shapes],
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IqI", CHECKPOINT_VERSION, int(seed), len(hb)))
        fh.write(hb)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, int, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, seed, hlen = struct.unpack_from("<IqI", raw, 8)
    except struct.error:
        raise CheckpointError(f"{path}: truncated header") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IqI")
    try:
        header = json.loads(raw[off:off + hlen])
        arch = Architecture.from_dict(header["architecture"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None
    if (len(raw) - off - hlen) % 8:
        raise CheckpointError(f"{path}: parameter block is not a whole number of float64 values")
    params = ModelParams(arch)
    if [[n, list(s)] for n, s in params.shapes] != header["layers"]:
        raise CheckpointError(f"{path}: layer manifest does not match architecture")
    data = np.frombuffer(raw, dtype="<f8", offset=off + hlen)
    if data.size != params.size:
        raise CheckpointError(f"{path}: expected {params.size} parameters, found {data.size}")
    return ModelParams(arch, data.astype(np.float64)), seed, header["meta"]
