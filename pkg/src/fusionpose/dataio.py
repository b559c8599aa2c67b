"""Sample files, dataset cleaning and train/test splitting.

File layout: one JSON object per line. The first line is a header
``{"schema": "fusionpose.samples", "version": 1, "joints": [...], "frame": "vehicle"}``
and every following line is one sample record::

    id            string
    camera        {fx, fy, cx, cy, width, height, extrinsics: 16 reals, row-major}
    bbox3d_center 3 reals
    points        N x 3 reals
    keypoints2d   13 x 3 reals (u, v, confidence)
    gt3d          null or 13 x 4 reals (x, y, z, valid)
    pseudo3d      null or 13 x 4 reals

All 3D quantities are in the vehicle frame. Floats are written with 9
significant digits, so identical data always produces identical bytes.
Paths ending in ``.gz`` are transparently gzip-compressed.
"""

from __future__ import annotations

import dataclasses
import gzip
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fusionpose.model import (
    DEFAULT_MIN_KEYPOINTS,
    DEFAULT_MIN_POINTS,
    DEFAULT_MIN_PROJECTION_FRACTION,
    JOINT_NAMES,
    N_JOINTS,
    REJECTION_REASONS,
    Camera,
    Keypoints2D,
    PointCloud,
    Pose3D,
    Sample,
    validate_sample,
)

SCHEMA = "fusionpose.samples"
SCHEMA_VERSION = 1
FRAME = "vehicle"
FLOAT_FORMAT = ".9g"

RECORD_FIELDS = ("id", "camera", "bbox3d_center", "points", "keypoints2d", "gt3d", "pseudo3d")
REQUIRED_FIELDS = RECORD_FIELDS[:5]
CAMERA_FIELDS = ("fx", "fy", "cx", "cy", "width", "height", "extrinsics")


class DatasetFormatError(ValueError):
    """Unparseable or schema-violating record; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = f"{path}:" if path is not None else ""
        where += f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class SchemaVersionError(DatasetFormatError):
    pass


# --- encoding -----------------------------------------------------------------------------

def _num(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = format(x, FLOAT_FORMAT)
    return "0" if s == "-0" else s


def _nums(a) -> str:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return "[" + ",".join(_num(v) for v in a) + "]"
    return "[" + ",".join(_nums(row) for row in a) + "]"


def _pose(p: Pose3D | None) -> str:
    if p is None:
        return "null"
    return _nums(np.column_stack([p.joints, p.valid.astype(float)]))


def encode_sample(s: Sample) -> str:
    """One canonical JSON line (without the newline)."""
    c = s.camera
    camera = (
        f'{{"fx":{_num(c.fx)},"fy":{_num(c.fy)},"cx":{_num(c.cx)},"cy":{_num(c.cy)},'
        f'"width":{int(c.width)},"height":{int(c.height)},"extrinsics":{_nums(c.extrinsics.reshape(-1))}}}'
    )
    kp = np.column_stack([s.keypoints2d.joints, s.keypoints2d.confidence])
    return (
        f'{{"id":{json.dumps(s.id)},"camera":{camera},"bbox3d_center":{_nums(s.bbox3d_center)},'
        f'"points":{_nums(s.cloud.points)},"keypoints2d":{_nums(kp)},'
        f'"gt3d":{_pose(s.gt3d)},"pseudo3d":{_pose(s.pseudo3d)}}}'
    )


def header() -> str:
    return json.dumps({"schema": SCHEMA, "version": SCHEMA_VERSION, "joints": list(JOINT_NAMES), "frame": FRAME},
                      separators=(",", ":"))


# --- decoding -----------------------------------------------------------------------------

def _array(v, shape, name) -> np.ndarray:
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ValueError(f"{name} must be numeric")
    if shape[0] is None and a.size == 0:
        a = a.reshape(0, *shape[1:])
    if a.ndim != len(shape) or any(want is not None and got != want for got, want in zip(a.shape, shape)):
        raise ValueError(f"{name}: expected shape {tuple('N' if d is None else d for d in shape)}, got {a.shape}")
    return a


def _decode_pose(v, name) -> Pose3D | None:
    if v is None:
        return None
    a = _array(v, (N_JOINTS, 4), name)
    flags = a[:, 3]
    if not np.isin(flags, (0.0, 1.0)).all():
        raise ValueError(f"{name}: validity column must hold 0 or 1")
    return Pose3D(a[:, :3], flags.astype(bool))


def decode_sample(rec: dict) -> Sample:
    if not isinstance(rec, dict):
        raise ValueError("record must be a JSON object")
    missing = [k for k in REQUIRED_FIELDS if k not in rec]
    if missing:
        raise ValueError(f"missing field(s) {', '.join(missing)}")
    extra = sorted(set(rec) - set(RECORD_FIELDS))
    if extra:
        raise ValueError(f"unknown field(s) {', '.join(extra)}")
    if not isinstance(rec["id"], str):
        raise ValueError("id must be a string")
    cam = rec["camera"]
    if not isinstance(cam, dict):
        raise ValueError("camera must be an object")
    missing = [k for k in CAMERA_FIELDS if k not in cam]
    if missing:
        raise ValueError(f"camera is missing {', '.join(missing)}")
    if sorted(cam) != sorted(CAMERA_FIELDS):
        raise ValueError(f"camera has unknown field(s) {', '.join(sorted(set(cam) - set(CAMERA_FIELDS)))}")
    for k in ("width", "height"):
        if not isinstance(cam[k], int) or isinstance(cam[k], bool):
            raise ValueError(f"camera.{k} must be an integer")
    for k in ("fx", "fy", "cx", "cy"):
        if not isinstance(cam[k], (int, float)) or isinstance(cam[k], bool):
            raise ValueError(f"camera.{k} must be a number")
    camera = Camera(float(cam["fx"]), float(cam["fy"]), float(cam["cx"]), float(cam["cy"]),
                    _array(cam["extrinsics"], (16,), "camera.extrinsics").reshape(4, 4),
                    cam["width"], cam["height"])
    points = _array(rec["points"], (None, 3), "points")
    if len(points) == 0:
        raise ValueError("points must contain at least one point")
    kp = _array(rec["keypoints2d"], (N_JOINTS, 3), "keypoints2d")
    return Sample(
        id=rec["id"],
        camera=camera,
        bbox3d_center=_array(rec["bbox3d_center"], (3,), "bbox3d_center"),
        cloud=PointCloud(points),
        keypoints2d=Keypoints2D(kp[:, :2], kp[:, 2]),
        gt3d=_decode_pose(rec.get("gt3d"), "gt3d"),
        pseudo3d=_decode_pose(rec.get("pseudo3d"), "pseudo3d"),
    )


def _check_header(obj, path, lineno: int = 1) -> None:
    if not isinstance(obj, dict) or obj.get("schema") != SCHEMA:
        raise DatasetFormatError(f"first line is not a {SCHEMA} header", lineno, path)
    if obj.get("version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"schema version {obj.get('version')!r} is not supported (expected {SCHEMA_VERSION})", lineno, path)
    if list(obj.get("joints", [])) != list(JOINT_NAMES):
        raise DatasetFormatError("joint order in header does not match this build", lineno, path)
    if obj.get("frame", FRAME) != FRAME:
        raise DatasetFormatError(f"unsupported frame {obj.get('frame')!r}", lineno, path)


def _open_text(path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8", newline="\n")
    return open(path, mode, encoding="utf-8", newline="\n")


def parse_lines(lines: Iterable[str], path=None) -> list[Sample]:
    samples = []
    seen_header = False
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"invalid JSON ({e.msg} at column {e.colno})", lineno, path) from None
        if not seen_header:
            _check_header(obj, path, lineno)
            seen_header = True
            continue
        try:
            samples.append(decode_sample(obj))
        except ValueError as e:
            raise DatasetFormatError(str(e), lineno, path) from None
    return samples


def read_samples(path) -> list[Sample]:
    """Parse a sample file; an empty file yields an empty list."""
    with _open_text(path, "r") as fh:
        return parse_lines(fh, path)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_samples(samples: Sequence[Sample], path) -> dict:
    """Write ``samples`` atomically; returns a manifest entry for the file."""
    path = Path(path)
    text = "".join([header() + "\n"] + [encode_sample(s) + "\n" for s in samples]).encode("utf-8")
    if path.suffix == ".gz":
        buf = io.BytesIO()
        # fixed mtime and no embedded name keep the bytes reproducible
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(text)
        text = buf.getvalue()
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return {"path": str(path), "n_samples": len(samples), "sha256": file_digest(path),
            "schema": SCHEMA, "version": SCHEMA_VERSION}


# --- manifests, filtering, splitting ------------------------------------------------------

def to_plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(cfg) -> str:
    """Short stable digest of a (dataclass) configuration."""
    blob = json.dumps(to_plain(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class FilterThresholds:
    min_points: int = DEFAULT_MIN_POINTS
    min_keypoints: int = DEFAULT_MIN_KEYPOINTS
    min_projection_fraction: float = DEFAULT_MIN_PROJECTION_FRACTION


FILTER_STAGES = ("input", "well_formed", "min_points", "min_keypoints", "camera_overlap")


@dataclass
class DatasetManifest:
    stage_counts: dict[str, int] = field(default_factory=dict)
    rejections: dict[str, int] = field(default_factory=dict)
    split_sizes: dict[str, int] = field(default_factory=dict)
    config_hash: str = ""
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = list(self.stage_counts.values())
        if any(b > a for a, b in zip(counts, counts[1:])):
            raise ValueError("stage counts must be non-increasing")

    @property
    def rejection_rate(self) -> float:
        counts = list(self.stage_counts.values())
        return 1.0 - counts[-1] / counts[0] if counts and counts[0] else 0.0

    def to_dict(self) -> dict:
        return to_plain(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def filter_dataset(samples: Sequence[Sample], thresholds: FilterThresholds = FilterThresholds()):
    """Keep samples passing every cleaning rule.

    ``rejections`` counts every rule a sample violates, so a sample breaking
    two rules adds to both counters. ``stage_counts`` applies the rules one
    after another and records the survivors of each stage.
    """
    rejections = {r: 0 for r in REJECTION_REASONS}
    stage_of = {"malformed": 1, "too_few_points": 2, "too_few_keypoints": 3, "camera_overlap": 4}
    dropped_at = [0] * len(FILTER_STAGES)
    kept = []
    for s in samples:
        rep = validate_sample(s, thresholds.min_points, thresholds.min_keypoints, thresholds.min_projection_fraction)
        for r in rep.reasons:
            rejections[r] += 1
        if rep.accepted:
            kept.append(s)
        else:
            dropped_at[min(stage_of[r] for r in rep.reasons)] += 1
    counts, n = {}, len(samples)
    for stage, d in zip(FILTER_STAGES, dropped_at):
        n -= d
        counts[stage] = n
    return kept, DatasetManifest(stage_counts=counts, rejections=rejections, config_hash=config_hash(thresholds))


def split(samples: Sequence[Sample], fraction: float, seed: int = 42):
    """Seeded shuffle, then the first ``floor(n * (1 - fraction))`` go to test."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n = len(samples)
    # the epsilon absorbs representation error, e.g. 5 * (1 - 0.8) -> 0.999...
    n_test = math.floor(n * (1.0 - fraction) + 1e-9)
    perm = np.random.default_rng(seed).permutation(n)
    test = [samples[i] for i in perm[:n_test]]
    train = [samples[i] for i in perm[n_test:]]
    return train, test
