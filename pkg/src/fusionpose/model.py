"""Domain types shared across the pipeline, plus sample validation.

All 3D quantities stored on a :class:`Sample` live in the vehicle frame
(x forward, y left, z up, meters). Conversion into the camera-aligned,
box-centered learning frame happens in :mod:`fusionpose.geometry`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fusionpose import geometry

N_JOINTS = 13

# Canonical joint order. External data must be remapped to this table.
JOINT_NAMES: tuple[str, ...] = (
    "nose",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}

# Minimum confidence for a 2D joint to count as labeled.
KEYPOINT_VALIDITY_BAR = 0.05

DEFAULT_MIN_POINTS = 75
DEFAULT_MIN_KEYPOINTS = 7
DEFAULT_MIN_PROJECTION_FRACTION = 0.75

REASON_TOO_FEW_POINTS = "too_few_points"
REASON_TOO_FEW_KEYPOINTS = "too_few_keypoints"
REASON_CAMERA_OVERLAP = "camera_overlap"
REASON_MALFORMED = "malformed"
REJECTION_REASONS = (
    REASON_MALFORMED,
    REASON_TOO_FEW_POINTS,
    REASON_TOO_FEW_KEYPOINTS,
    REASON_CAMERA_OVERLAP,
)


def _as_array(x, shape_tail: tuple[int, ...], name: str, dtype=float) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.shape[arr.ndim - len(shape_tail):] != shape_tail:
        raise ValueError(f"{name}: expected trailing shape {shape_tail}, got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Pose3D:
    """13 joints in meters with a per-joint validity mask."""

    joints: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "joints", _as_array(self.joints, (N_JOINTS, 3), "joints"))
        valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != (N_JOINTS,):
            raise ValueError(f"valid: expected shape ({N_JOINTS},), got {valid.shape}")
        object.__setattr__(self, "valid", valid)

    @classmethod
    def full(cls, joints) -> "Pose3D":
        return cls(joints, np.ones(N_JOINTS, dtype=bool))

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.joints[self.valid]).all())


@dataclass(frozen=True, eq=False)
class Keypoints2D:
    """13 image-plane joints in pixels with confidences in [0, 1]."""

    joints: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "joints", _as_array(self.joints, (N_JOINTS, 2), "joints"))
        conf = np.asarray(self.confidence, dtype=float)
        if conf.shape != (N_JOINTS,):
            raise ValueError(f"confidence: expected shape ({N_JOINTS},), got {conf.shape}")
        object.__setattr__(self, "confidence", conf)

    def is_finite(self) -> bool:
        c = self.confidence
        if not np.isfinite(c).all() or (c < 0).any() or (c > 1).any():
            return False
        return bool(np.isfinite(self.joints[c > 0]).all())


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Unordered set of N >= 1 points in meters."""

    points: np.ndarray

    def __post_init__(self):
        pts = _as_array(self.points, (3,), "points").reshape(-1, 3)
        if len(pts) < 1:
            raise ValueError("point cloud must contain at least one point")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera; ``extrinsics`` maps vehicle-frame points into the camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        ext = np.asarray(self.extrinsics, dtype=float)
        if ext.shape != (4, 4):
            raise ValueError(f"extrinsics must be 4x4, got {ext.shape}")
        object.__setattr__(self, "extrinsics", ext)

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.width, self.height)

    def is_valid(self, tol: float = 1e-6) -> bool:
        vals = np.array([self.fx, self.fy, self.cx, self.cy], dtype=float)
        if not (np.isfinite(vals).all() and np.isfinite(self.extrinsics).all()):
            return False
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            return False
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=tol):
            return False
        if abs(np.linalg.det(R) - 1.0) > tol:
            return False
        return bool(np.allclose(self.extrinsics[3], [0, 0, 0, 1], atol=tol))


@dataclass(frozen=True, eq=False)
class Sample:
    """One pedestrian observation."""

    id: str
    camera: Camera
    bbox3d_center: np.ndarray
    cloud: PointCloud
    keypoints2d: Keypoints2D
    gt3d: Optional[Pose3D] = None
    pseudo3d: Optional[Pose3D] = None

    def __post_init__(self):
        c = np.asarray(self.bbox3d_center, dtype=float)
        if c.shape != (3,):
            raise ValueError(f"bbox3d_center must have shape (3,), got {c.shape}")
        object.__setattr__(self, "bbox3d_center", c)

    def replace(self, **changes) -> "Sample":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class ValidityReport:
    accepted: bool
    reasons: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.accepted != (len(self.reasons) == 0):
            raise ValueError("accepted must be true iff there are no rejection reasons")


def count_labeled_keypoints(k: Keypoints2D, bar: float = KEYPOINT_VALIDITY_BAR) -> int:
    return int((k.confidence > bar).sum())


def projection_fraction(s: Sample) -> float:
    """Fraction of cloud points that land inside the sample's camera image."""
    inside = geometry.points_in_image(s.cloud.points, s.camera)
    return float(inside.mean())


def is_malformed(s: Sample) -> bool:
    return not (
        np.isfinite(s.bbox3d_center).all()
        and np.isfinite(s.cloud.points).all()
        and s.keypoints2d.is_finite()
        and s.camera.is_valid()
        and (s.gt3d is None or s.gt3d.is_finite())
        and (s.pseudo3d is None or s.pseudo3d.is_finite())
    )


def validate_sample(
    s: Sample,
    min_points: int = DEFAULT_MIN_POINTS,
    min_keypoints: int = DEFAULT_MIN_KEYPOINTS,
    min_projection_fraction: float = DEFAULT_MIN_PROJECTION_FRACTION,
) -> ValidityReport:
    """Apply the dataset-cleaning rules to one sample.

    All thresholds are inclusive. A malformed sample is reported with the
    single reason ``malformed`` since the remaining checks are meaningless.
    """
    if min_points <= 0 or min_keypoints <= 0 or min_projection_fraction <= 0:
        raise ValueError("thresholds must be positive")
    if is_malformed(s):
        return ValidityReport(False, (REASON_MALFORMED,))
    reasons = []
    if len(s.cloud) < min_points:
        reasons.append(REASON_TOO_FEW_POINTS)
    if count_labeled_keypoints(s.keypoints2d) < min_keypoints:
        reasons.append(REASON_TOO_FEW_KEYPOINTS)
    if projection_fraction(s) < min_projection_fraction:
        reasons.append(REASON_CAMERA_OVERLAP)
    return ValidityReport(not reasons, tuple(reasons))
