"""Synthetic pedestrian scenes.

A pedestrian is a set of capsules hung on a 13-joint skeleton. LiDAR
returns are sampled on the capsule surfaces visible from the roof sensor;
2D keypoints are pinhole projections seen from a separate camera, with
pixel noise, occasional outliers and a confidence that falls with the
applied error:

    confidence = 1 / (1 + (error_px / confidence_scale_px) ** 2)

Joints hidden behind other body parts, behind the camera or outside the
image get confidence 0.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from fusionpose import geometry
from fusionpose.model import (
    JOINT_INDEX,
    N_JOINTS,
    Camera,
    Keypoints2D,
    PointCloud,
    Pose3D,
    Sample,
    validate_sample,
)

J = JOINT_INDEX

ANGLE_LIMITS = {
    "torso_pitch": (-0.05, 0.3),
    "torso_roll": (-0.08, 0.08),
    "torso_twist": (-0.3, 0.3),
    "head_pitch": (-0.3, 0.3),
    "left_shoulder_flex": (-0.6, 1.2),
    "right_shoulder_flex": (-0.6, 1.2),
    "left_shoulder_abd": (0.0, 0.6),
    "right_shoulder_abd": (0.0, 0.6),
    "left_elbow": (0.0, 1.6),
    "right_elbow": (0.0, 1.6),
    "left_hip_flex": (-0.5, 0.8),
    "right_hip_flex": (-0.5, 0.8),
    "left_hip_abd": (0.0, 0.25),
    "right_hip_abd": (0.0, 0.25),
    "left_knee": (0.0, 1.2),
    "right_knee": (0.0, 1.2),
}

# Rest forward tilt of the neck-to-nose bone.
HEAD_TILT = 0.35


class EmptyCloudError(RuntimeError):
    """Too few LiDAR returns survived culling and dropout."""


class GenerationError(RuntimeError):
    """A sample could not be produced within the retry budget."""


@dataclass(frozen=True)
class BodyModel:
    spine: float = 0.50
    head: float = 0.22
    shoulder_half_width: float = 0.19
    hip_half_width: float = 0.10
    upper_arm: float = 0.29
    forearm: float = 0.26
    thigh: float = 0.43
    shin: float = 0.42
    radii: dict = field(
        default_factory=lambda: {
            "head": 0.09,
            "shoulder_girdle": 0.06,
            "torso": 0.12,
            "torso_side": 0.10,
            "hip_girdle": 0.09,
            "upper_arm": 0.05,
            "forearm": 0.04,
            "thigh": 0.08,
            "shin": 0.055,
        }
    )
    angle_limits: dict = field(default_factory=lambda: dict(ANGLE_LIMITS))

    def __post_init__(self):
        lengths = [self.spine, self.head, self.shoulder_half_width, self.hip_half_width,
                   self.upper_arm, self.forearm, self.thigh, self.shin]
        if min(lengths) <= 0 or min(self.radii.values()) <= 0:
            raise ValueError("bone lengths and radii must be positive")
        for name, (lo, hi) in self.angle_limits.items():
            if not lo <= hi:
                raise ValueError(f"empty angle interval for {name}")

    def scaled(self, f: float) -> "BodyModel":
        return replace(
            self,
            spine=self.spine * f, head=self.head * f,
            shoulder_half_width=self.shoulder_half_width * f,
            hip_half_width=self.hip_half_width * f,
            upper_arm=self.upper_arm * f, forearm=self.forearm * f,
            thigh=self.thigh * f, shin=self.shin * f,
            radii={k: v * f for k, v in self.radii.items()},
        )

    def bones(self) -> list[tuple[int, int, float]]:
        """Joint pairs with a fixed distance under forward kinematics."""
        return [
            (J["left_shoulder"], J["right_shoulder"], 2 * self.shoulder_half_width),
            (J["left_hip"], J["right_hip"], 2 * self.hip_half_width),
            (J["left_shoulder"], J["left_elbow"], self.upper_arm),
            (J["right_shoulder"], J["right_elbow"], self.upper_arm),
            (J["left_elbow"], J["left_wrist"], self.forearm),
            (J["right_elbow"], J["right_wrist"], self.forearm),
            (J["left_hip"], J["left_knee"], self.thigh),
            (J["right_hip"], J["right_knee"], self.thigh),
            (J["left_knee"], J["left_ankle"], self.shin),
            (J["right_knee"], J["right_ankle"], self.shin),
        ]


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 100
    points_per_body: tuple[int, int] = (75, 1000)
    lidar_noise_sigma: float = 0.01
    dropout_prob: float = 0.1
    keypoint_noise_sigma: float = 2.0
    outlier_prob: float = 0.05
    outlier_shift: float = 30.0
    confidence_scale_px: float = 6.0
    rng_seed: int = 42
    distance_range: tuple[float, float] = (5.0, 30.0)
    density_at_10m: float = 2000.0
    lidar_outlier_prob: float = 0.02
    lidar_outlier_range: tuple[float, float] = (0.3, 2.0)
    box_center_noise_sigma: float = 0.03
    body_scale_range: tuple[float, float] = (0.9, 1.1)
    camera_yaw_range: tuple[float, float] = (-0.2, 0.2)
    lidar_position: tuple[float, float, float] = (0.0, 0.0, 2.0)
    camera_position: tuple[float, float, float] = (1.5, 0.0, 1.6)
    require_valid: bool = True
    max_retries: int = 50

    def __post_init__(self):
        for p in (self.dropout_prob, self.outlier_prob, self.lidar_outlier_prob):
            if not 0 <= p < 1:
                raise ValueError("probabilities must lie in [0, 1)")
        if min(self.lidar_noise_sigma, self.keypoint_noise_sigma, self.box_center_noise_sigma) < 0:
            raise ValueError("noise sigmas must be non-negative")
        lo, hi = self.points_per_body
        if not 1 <= lo <= hi:
            raise ValueError("points_per_body must satisfy 1 <= lo <= hi")
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")


NOISE_PROFILES = {
    "clean": dict(
        lidar_noise_sigma=0.0, dropout_prob=0.0, keypoint_noise_sigma=0.0, outlier_prob=0.0,
        lidar_outlier_prob=0.0, box_center_noise_sigma=0.0,
    ),
    "nominal": {},
    "outlier-heavy": dict(outlier_prob=0.2, outlier_shift=40.0, lidar_outlier_prob=0.15),
}


def profile_config(name: str, **overrides) -> SynthConfig:
    if name not in NOISE_PROFILES:
        raise ValueError(f"unknown noise profile {name!r}; choose from {sorted(NOISE_PROFILES)}")
    return SynthConfig(**{**NOISE_PROFILES[name], **overrides})


# --- rotations and kinematics ---------------------------------------------------------

def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


DOWN = np.array([0.0, 0.0, -1.0])


def rest_angles() -> dict:
    return {name: 0.0 for name in ANGLE_LIMITS}


def forward_kinematics(model: BodyModel, angles: dict) -> np.ndarray:
    """Joint positions in the body frame: pelvis at origin, facing +x, z up."""
    a = {**rest_angles(), **angles}
    out = np.zeros((N_JOINTS, 3))
    R_t = _rz(a["torso_twist"]) @ _ry(a["torso_pitch"]) @ _rx(a["torso_roll"])
    neck = R_t @ np.array([0.0, 0.0, model.spine])
    lateral = R_t @ np.array([0.0, model.shoulder_half_width, 0.0])
    out[J["left_shoulder"]] = neck + lateral
    out[J["right_shoulder"]] = neck - lateral
    tilt = HEAD_TILT + a["head_pitch"]
    out[J["nose"]] = neck + R_t @ (model.head * np.array([math.sin(tilt), 0.0, math.cos(tilt)]))
    for side, sign in (("left", 1.0), ("right", -1.0)):
        sh = out[J[f"{side}_shoulder"]]
        R_abd = R_t @ _rx(sign * a[f"{side}_shoulder_abd"])
        flex = a[f"{side}_shoulder_flex"]
        elbow = sh + R_abd @ _ry(-flex) @ DOWN * model.upper_arm
        out[J[f"{side}_elbow"]] = elbow
        out[J[f"{side}_wrist"]] = elbow + R_abd @ _ry(-(flex + a[f"{side}_elbow"])) @ DOWN * model.forearm

        hip = np.array([0.0, sign * model.hip_half_width, 0.0])
        out[J[f"{side}_hip"]] = hip
        R_leg = _rx(sign * a[f"{side}_hip_abd"])
        hf = a[f"{side}_hip_flex"]
        knee = hip + R_leg @ _ry(-hf) @ DOWN * model.thigh
        out[J[f"{side}_knee"]] = knee
        out[J[f"{side}_ankle"]] = knee + R_leg @ _ry(-(hf - a[f"{side}_knee"])) @ DOWN * model.shin
    return out


def sample_angles(model: BodyModel, rng: np.random.Generator) -> dict:
    return {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in model.angle_limits.items()}


# --- sensors ---------------------------------------------------------------------------

CAM_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def make_camera(yaw: float = 0.0, position=(1.5, 0.0, 1.6), fx: float = 1200.0, fy: float = 1200.0,
                width: int = 1920, height: int = 1280) -> Camera:
    """Forward-looking camera yawed by ``yaw`` about the vehicle z axis."""
    R = CAM_AXES @ _rz(yaw).T
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ np.asarray(position, dtype=float)
    return Camera(fx, fy, width / 2.0, height / 2.0, T, width, height)


def camera_center(cam: Camera) -> np.ndarray:
    return -cam.rotation.T @ cam.translation


def sample_pose(
    model: BodyModel,
    rng: np.random.Generator,
    camera: Camera | None = None,
    distance_range: tuple[float, float] = (5.0, 30.0),
    angles: dict | None = None,
) -> Pose3D:
    """Random pose placed on the ground in front of ``camera`` (vehicle frame)."""
    camera = camera if camera is not None else make_camera()
    if angles is None:
        angles = sample_angles(model, rng)
    body = forward_kinematics(model, angles)
    yaw = rng.uniform(-math.pi, math.pi)
    d = rng.uniform(*distance_range)
    half_fov = math.atan(camera.cx / camera.fx)
    az_max = max(half_fov - 0.8 / d - 0.02, 0.0)
    az = rng.uniform(-az_max, az_max)
    cam_yaw = math.atan2(camera.rotation[2, 1], camera.rotation[2, 0])
    c = camera_center(camera)
    heading = cam_yaw + az
    world = body @ _rz(yaw).T
    world[:, 0] += c[0] + d * math.cos(heading)
    world[:, 1] += c[1] + d * math.sin(heading)
    world[:, 2] += model.radii["shin"] - world[[J["left_ankle"], J["right_ankle"]], 2].min()
    return Pose3D.full(world)


def capsules(pose: Pose3D, model: BodyModel) -> list[tuple[np.ndarray, np.ndarray, float, tuple[int, ...]]]:
    """(start, end, radius, incident joints) for every body capsule."""
    p = pose.joints
    r = model.radii
    mid_sh = 0.5 * (p[J["left_shoulder"]] + p[J["right_shoulder"]])
    mid_hip = 0.5 * (p[J["left_hip"]] + p[J["right_hip"]])
    out = [
        (mid_sh, p[J["nose"]], r["head"], (J["nose"],)),
        (p[J["left_shoulder"]], p[J["right_shoulder"]], r["shoulder_girdle"],
         (J["left_shoulder"], J["right_shoulder"])),
        (mid_hip, mid_sh, r["torso"], ()),
        (p[J["left_hip"]], p[J["right_hip"]], r["hip_girdle"], (J["left_hip"], J["right_hip"])),
    ]
    for side in ("left", "right"):
        def j(n, side=side):
            return J[f"{side}_{n}"]
        out += [
            (p[j("hip")], p[j("shoulder")], r["torso_side"], (j("hip"), j("shoulder"))),
            (p[j("shoulder")], p[j("elbow")], r["upper_arm"], (j("shoulder"), j("elbow"))),
            (p[j("elbow")], p[j("wrist")], r["forearm"], (j("elbow"), j("wrist"))),
            (p[j("hip")], p[j("knee")], r["thigh"], (j("hip"), j("knee"))),
            (p[j("knee")], p[j("ankle")], r["shin"], (j("knee"), j("ankle"))),
        ]
    return out


def segment_distance(p1, q1, p2, q2) -> np.ndarray:
    """Closest distance between segments [p1, q1] and [p2, q2], broadcasting over leading axes."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.einsum("...i,...i->...", d1, d1)
    e = np.einsum("...i,...i->...", d2, d2)
    f = np.einsum("...i,...i->...", d2, r)
    c = np.einsum("...i,...i->...", d1, r)
    b = np.einsum("...i,...i->...", d1, d2)
    tiny = 1e-15
    a_safe = np.where(a > tiny, a, 1.0)
    e_safe = np.where(e > tiny, e, 1.0)
    denom = a * e - b * b
    s = np.where(denom > tiny * np.maximum(a * e, tiny),
                 np.clip((b * f - c * e) / np.where(denom > 0, denom, 1.0), 0.0, 1.0), 0.0)
    s = np.where(a > tiny, s, 0.0)
    t = np.where(e > tiny, (b * s + f) / e_safe, 0.0)
    s = np.where(t < 0, np.where(a > tiny, np.clip(-c / a_safe, 0.0, 1.0), 0.0), s)
    s = np.where(t > 1, np.where(a > tiny, np.clip((b - c) / a_safe, 0.0, 1.0), 0.0), s)
    t = np.clip(t, 0.0, 1.0)
    c1 = p1 + s[..., None] * d1
    c2 = p2 + t[..., None] * d2
    return np.linalg.norm(c1 - c2, axis=-1)


def point_segment_distance(p, a, b) -> np.ndarray:
    ab = b - a
    denom = np.maximum(np.einsum("...i,...i->...", ab, ab), 1e-30)
    t = np.clip(np.einsum("...i,...i->...", p - a, ab) / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def _occluded(origin: np.ndarray, targets: np.ndarray, caps, skip: np.ndarray) -> np.ndarray:
    """True where the sight line origin->target passes through a capsule not skipped."""
    if len(targets) == 0:
        return np.zeros(0, dtype=bool)
    A = np.stack([c[0] for c in caps])
    B = np.stack([c[1] for c in caps])
    radii = np.array([c[2] for c in caps])
    # stop just short of the target so a point on a surface does not hit itself
    direction = targets - origin
    ends = origin + direction * (1.0 - 1e-9)
    d = segment_distance(origin[None, None, :], ends[:, None, :], A[None], B[None])
    blocked = (d < radii[None, :]) & ~skip
    return blocked.any(axis=1)


def _orthonormal_frame(axis: np.ndarray):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def render_lidar(
    pose: Pose3D,
    model: BodyModel,
    cfg: SynthConfig,
    rng: np.random.Generator,
    return_sources: bool = False,
):
    """Sparse LiDAR returns on the capsule surfaces visible from the sensor.

    Range noise is applied along the surface normal, so the distance of a
    noisy point to its source surface is half-normal. Raises
    :class:`EmptyCloudError` when fewer than ``points_per_body[0]`` points
    remain; clouds above the upper bound are subsampled.
    """
    caps = capsules(pose, model)
    sensor = np.asarray(cfg.lidar_position, dtype=float)
    center = pose.joints.mean(axis=0)
    dist = float(np.linalg.norm(center - sensor))
    n_cand = int(round(cfg.density_at_10m * (10.0 / max(dist, 1e-3)) ** 2))
    areas = np.array([2 * math.pi * c[2] * np.linalg.norm(c[1] - c[0]) for c in caps])
    counts = rng.multinomial(n_cand, areas / areas.sum()) if n_cand > 0 else np.zeros(len(caps), int)

    pts, normals, src = [], [], []
    for k, ((a, b, r, _), n) in enumerate(zip(caps, counts)):
        if n == 0:
            continue
        u, v = _orthonormal_frame(b - a)
        t = rng.uniform(0.0, 1.0, n)
        theta = rng.uniform(0.0, 2 * math.pi, n)
        nrm = np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v
        pts.append(a + t[:, None] * (b - a) + r * nrm)
        normals.append(nrm)
        src.append(np.full(n, k))
    if pts:
        pts, normals, src = np.concatenate(pts), np.concatenate(normals), np.concatenate(src)
    else:
        pts, normals, src = np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, int)

    facing = np.einsum("ij,ij->i", normals, sensor - pts) > 0
    pts, normals, src = pts[facing], normals[facing], src[facing]
    skip = src[:, None] == np.arange(len(caps))[None, :]
    keep = ~_occluded(sensor, pts, caps, skip)
    keep &= rng.random(len(pts)) >= cfg.dropout_prob
    pts, normals, src = pts[keep], normals[keep], src[keep]

    if cfg.lidar_noise_sigma > 0:
        pts = pts + normals * rng.normal(0.0, cfg.lidar_noise_sigma, len(pts))[:, None]
    if cfg.lidar_outlier_prob > 0 and len(pts):
        hit = rng.random(len(pts)) < cfg.lidar_outlier_prob
        ray = pts[hit] - sensor
        ray /= np.linalg.norm(ray, axis=1, keepdims=True)
        pts[hit] += ray * rng.uniform(*cfg.lidar_outlier_range, hit.sum())[:, None]

    lo, hi = cfg.points_per_body
    if len(pts) < lo:
        raise EmptyCloudError(f"{len(pts)} points survived, need at least {lo}")
    order = rng.permutation(len(pts))[:hi]
    cloud = PointCloud(pts[order])
    return (cloud, src[order]) if return_sources else cloud


def confidence_from_error(err_px: np.ndarray, scale_px: float) -> np.ndarray:
    return 1.0 / (1.0 + (np.asarray(err_px) / scale_px) ** 2)


def render_keypoints(
    pose: Pose3D,
    cam: Camera,
    cfg: SynthConfig,
    rng: np.random.Generator,
    model: BodyModel | None = None,
    return_errors: bool = False,
):
    """Noisy 2D detections of the pose; ``model`` enables self-occlusion."""
    uv, front = geometry.project_to_image(geometry.vehicle_to_camera(pose.joints, cam), cam)
    visible = geometry.inside_image(uv, front, cam) & pose.valid
    if model is not None:
        caps = capsules(pose, model)
        A = np.stack([c[0] for c in caps])
        B = np.stack([c[1] for c in caps])
        radii = np.array([c[2] for c in caps])
        inside = point_segment_distance(pose.joints[:, None, :], A[None], B[None]) < radii[None] + 1e-9
        visible &= ~_occluded(camera_center(cam), pose.joints, caps, inside)

    noise = rng.normal(0.0, 1.0, (N_JOINTS, 2)) * cfg.keypoint_noise_sigma
    phi = rng.uniform(0.0, 2 * math.pi, N_JOINTS)
    is_out = rng.random(N_JOINTS) < cfg.outlier_prob
    shift = np.where(is_out, cfg.outlier_shift, 0.0)[:, None] * np.stack([np.cos(phi), np.sin(phi)], 1)
    err_vec = noise + shift
    err = np.linalg.norm(err_vec, axis=1)
    conf = np.where(visible, confidence_from_error(err, cfg.confidence_scale_px), 0.0)
    joints = np.where(front[:, None], uv + err_vec, 0.0)
    kp = Keypoints2D(joints, conf)
    return (kp, err) if return_errors else kp


def box_center(pose: Pose3D, model: BodyModel) -> np.ndarray:
    """Center of the body's extent, padded by the largest capsule radius."""
    pad = max(model.radii.values())
    lo = pose.joints.min(axis=0) - pad
    hi = pose.joints.max(axis=0) + pad
    lo[2] = max(lo[2], 0.0)
    return 0.5 * (lo + hi)


def generate_sample(idx: int, seed_seq: np.random.SeedSequence, cfg: SynthConfig,
                    model: BodyModel = BodyModel()) -> Sample:
    rng = np.random.default_rng(seed_seq)
    for _ in range(cfg.max_retries):
        m = model.scaled(rng.uniform(*cfg.body_scale_range))
        cam = make_camera(rng.uniform(*cfg.camera_yaw_range), cfg.camera_position)
        pose = sample_pose(m, rng, cam, cfg.distance_range)
        try:
            cloud = render_lidar(pose, m, cfg, rng)
        except EmptyCloudError:
            continue
        kp = render_keypoints(pose, cam, cfg, rng, model=m)
        center = box_center(pose, m) + rng.normal(0.0, 1.0, 3) * cfg.box_center_noise_sigma
        s = Sample(f"synth-{cfg.rng_seed}-{idx:06d}", cam, center, cloud, kp, gt3d=pose)
        if not cfg.require_valid or validate_sample(s).accepted:
            return s
    raise GenerationError(f"sample {idx}: no valid sample after {cfg.max_retries} attempts")


def _generate_one(args):
    return generate_sample(*args)


def generate_dataset(cfg: SynthConfig, model: BodyModel = BodyModel(), workers: int = 1) -> list[Sample]:
    """``cfg.n_samples`` samples; sample i depends only on (cfg, i)."""
    seqs = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.n_samples)
    jobs = [(i, sq, cfg, model) for i, sq in enumerate(seqs)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_generate_one, jobs, chunksize=16))
    return [_generate_one(j) for j in jobs]
