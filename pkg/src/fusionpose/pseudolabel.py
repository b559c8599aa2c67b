"""3D pseudo-labels from 2D keypoints and projected LiDAR points.

Each confident 2D joint collects the LiDAR points whose image projections
fall closest to it. The pseudo joint is a convex combination of those
points, weighted either by their 3D distance to the neighborhood mean
(``three_d``) or, as the image-space baseline, by their pixel distance to
the keypoint (``two_d_baseline``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from fusionpose import geometry
from fusionpose.model import N_JOINTS, Pose3D, Sample

Weighting = Literal["three_d", "two_d_baseline"]
WEIGHTINGS = ("three_d", "two_d_baseline")


@dataclass(frozen=True)
class PseudoLabelConfig:
    radius_px: float = 10.0
    max_neighbors: int = 20
    min_neighbors: int = 1
    weighting: Weighting = "three_d"
    confidence_threshold: float = 0.8

    def __post_init__(self):
        if not self.radius_px > 0:
            raise ValueError("radius_px must be positive")
        if not (self.max_neighbors >= self.min_neighbors >= 1):
            raise ValueError("need max_neighbors >= min_neighbors >= 1")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True, eq=False)
class JointNeighbors:
    indices: np.ndarray  # into the sample's cloud, sorted by pixel distance
    uv: np.ndarray  # (k, 2) projections
    distances: np.ndarray  # (k,) pixel distance to the joint

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class NeighborSet:
    joints: tuple[JointNeighbors, ...]

    def __getitem__(self, j: int) -> JointNeighbors:
        return self.joints[j]


_EMPTY = JointNeighbors(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros(0))


def select_neighbors(s: Sample, cfg: PseudoLabelConfig) -> NeighborSet:
    uv, _, inside = geometry.project_vehicle_points(s.cloud.points, s.camera)
    cand = np.flatnonzero(inside)
    cand_uv = uv[cand]
    out = []
    for j in range(N_JOINTS):
        if not s.keypoints2d.confidence[j] > cfg.confidence_threshold or len(cand) == 0:
            out.append(_EMPTY)
            continue
        d = np.linalg.norm(cand_uv - s.keypoints2d.joints[j], axis=1)
        within = np.flatnonzero(d <= cfg.radius_px)
        # stable sort keeps ties in cloud order
        order = within[np.argsort(d[within], kind="stable")][: cfg.max_neighbors]
        if len(order) < cfg.min_neighbors:
            out.append(_EMPTY)
            continue
        out.append(JointNeighbors(cand[order], cand_uv[order], d[order]))
    return NeighborSet(tuple(out))


def _softmax_neg(d: np.ndarray) -> np.ndarray:
    z = np.exp(-(d - d.min()))
    return z / z.sum()


def weights_3d(points: np.ndarray) -> np.ndarray:
    """Softmax over negative Euclidean distances to the neighborhood mean (meters)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty neighborhood")
    dist = np.linalg.norm(points - points.mean(axis=0), axis=1)
    return _softmax_neg(dist)


def weights_2d_baseline(pixel_distances: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Softmax over negative pixel distances, measured in units of ``scale`` pixels."""
    d = np.asarray(pixel_distances, dtype=float).reshape(-1)
    if len(d) == 0:
        raise ValueError("empty neighborhood")
    if (d < 0).any():
        raise ValueError("distances must be non-negative")
    return _softmax_neg(d / scale)


def joint_weights(points: np.ndarray, neighbors: JointNeighbors, cfg: PseudoLabelConfig) -> np.ndarray:
    if cfg.weighting == "three_d":
        return weights_3d(points)
    return weights_2d_baseline(neighbors.distances, scale=cfg.radius_px)


def make_pseudo_labels(
    s: Sample,
    cfg: PseudoLabelConfig = PseudoLabelConfig(),
    frame: Literal["box", "vehicle"] = "box",
    neighbors: NeighborSet | None = None,
) -> Pose3D:
    """Weighted sum of neighborhood points per joint.

    ``frame="box"`` returns the camera-aligned, box-centered coordinates used
    for learning; ``frame="vehicle"`` returns vehicle coordinates, which is
    what gets stored on a :class:`Sample`. Joints without neighbors are
    marked invalid; if every joint is empty the pose is all-invalid and the
    caller should skip the sample.
    """
    if neighbors is None:
        neighbors = select_neighbors(s, cfg)
    if frame == "box":
        cloud = geometry.to_camera_box_frame(s.cloud.points, s.bbox3d_center, s.camera.extrinsics)
    elif frame == "vehicle":
        cloud = s.cloud.points
    else:
        raise ValueError(f"unknown frame {frame!r}")
    joints = np.zeros((N_JOINTS, 3))
    valid = np.zeros(N_JOINTS, dtype=bool)
    for j, nb in enumerate(neighbors.joints):
        if len(nb) == 0:
            continue
        pts = cloud[nb.indices]
        joints[j] = joint_weights(pts, nb, cfg) @ pts
        valid[j] = True
    return Pose3D(joints, valid)


@dataclass
class Coverage:
    confident: int = 0
    labeled: int = 0
    samples_with_labels: int = 0
    samples: int = 0

    @property
    def fraction(self) -> float:
        return self.labeled / self.confident if self.confident else 0.0


def label_dataset(samples, cfg: PseudoLabelConfig) -> tuple[list[Sample], Coverage]:
    """Attach vehicle-frame pseudo-labels to every sample."""
    out = []
    cov = Coverage()
    for s in samples:
        pose = make_pseudo_labels(s, cfg, frame="vehicle")
        cov.samples += 1
        cov.confident += int((s.keypoints2d.confidence > cfg.confidence_threshold).sum())
        cov.labeled += pose.n_valid
        cov.samples_with_labels += pose.n_valid > 0
        out.append(s.replace(pseudo3d=pose))
    return out, cov
