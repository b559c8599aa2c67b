"""Pinhole projection, frame transforms and 2D keypoint normalization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from fusionpose.model import Camera, Keypoints2D


class DegenerateBoxError(ValueError):
    """Raised when the valid keypoints span zero height."""


@dataclass(frozen=True, eq=False)
class NormalizedKeypoints:
    joints: np.ndarray  # (13, 2), dimensionless
    confidence: np.ndarray  # (13,)
    aspect: float  # w / h of the keypoint box

    def flat(self) -> np.ndarray:
        return self.joints.reshape(-1)


def rigid_transform(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 4x4 homogeneous transform to (..., 3) points."""
    points = np.asarray(points, dtype=float)
    return points @ T[:3, :3].T + T[:3, 3]


def vehicle_to_camera(points: np.ndarray, cam: "Camera") -> np.ndarray:
    return rigid_transform(cam.extrinsics, points)


def camera_to_vehicle(points: np.ndarray, cam: "Camera") -> np.ndarray:
    R, t = cam.rotation, cam.translation
    return (np.asarray(points, dtype=float) - t) @ R


def project_to_image(p: np.ndarray, cam: "Camera") -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points (..., 3) onto the image plane.

    Returns ``(uv, in_front)``. Points with z <= 0 are flagged with
    ``in_front == False`` and get NaN pixel coordinates; callers must
    exclude them.
    """
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * p[..., 0] / z + cam.cx
        v = cam.fy * p[..., 1] / z + cam.cy
    uv = np.stack([u, v], axis=-1)
    uv[~in_front] = np.nan
    return uv, in_front


def backproject(uv: np.ndarray, depth: np.ndarray, cam: "Camera") -> np.ndarray:
    """Inverse of :func:`project_to_image` for a known camera-frame depth."""
    uv = np.asarray(uv, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (uv[..., 0] - cam.cx) * depth / cam.fx
    y = (uv[..., 1] - cam.cy) * depth / cam.fy
    return np.stack([x, y, depth], axis=-1)


def inside_image(uv: np.ndarray, in_front: np.ndarray, cam: "Camera") -> np.ndarray:
    u, v = uv[..., 0], uv[..., 1]
    with np.errstate(invalid="ignore"):
        return in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)


def project_vehicle_points(points: np.ndarray, cam: "Camera"):
    """Project vehicle-frame points; returns ``(uv, in_front, in_image)``."""
    uv, front = project_to_image(vehicle_to_camera(points, cam), cam)
    return uv, front, inside_image(uv, front, cam)


def points_in_image(points: np.ndarray, cam: "Camera") -> np.ndarray:
    return project_vehicle_points(points, cam)[2]


def to_camera_box_frame(p: np.ndarray, bbox3d_center: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Express vehicle-frame points relative to the box center in camera axes.

    The offset ``p - center`` is a displacement, so only the rotation block
    of ``ext`` acts on it; the box center becomes the origin.
    """
    d = np.asarray(p, dtype=float) - np.asarray(bbox3d_center, dtype=float)
    return d @ np.asarray(ext, dtype=float)[:3, :3].T


def from_camera_box_frame(q: np.ndarray, bbox3d_center: np.ndarray, ext: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=float) @ np.asarray(ext, dtype=float)[:3, :3] + bbox3d_center


def normalize_keypoints(k: "Keypoints2D") -> NormalizedKeypoints:
    """Scale keypoints so the pose box spans [-1, 1] vertically.

    The box is the tight extent of joints with confidence > 0, anchored at
    its min corner; the horizontal range keeps the aspect ratio. Joints
    without confidence become (0, 0) with confidence 0.
    """
    valid = k.confidence > 0
    if valid.sum() < 2:
        raise DegenerateBoxError("need at least two valid joints")
    pts = k.joints[valid]
    lo = pts.min(axis=0)
    w, h = pts.max(axis=0) - lo
    if not h > 0:
        raise DegenerateBoxError("valid keypoints have zero height")
    out = np.zeros_like(k.joints, dtype=float)
    out[valid] = 2.0 * (pts - lo) / h - np.array([w / h, 1.0])
    conf = np.where(valid, k.confidence, 0.0)
    return NormalizedKeypoints(out, conf, float(w / h))
