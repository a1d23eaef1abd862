"""
Pose set generation and slice dataset materialization.

Every scheme produces transforms that rotate the identity plane (normal +z)
and then shift it by tz along its own rotated normal.
"""

import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pipeline_utils import PipelineError, chunked, log_event, run_ordered
from se3core import (
    AnchorPoints,
    EulerCartesian,
    QuaternionCartesian,
    RigidTransform,
    anchor_points_from_transform,
    from_euler,
    from_quaternion,
    rotation_between_vectors,
    rotation_from_euler,
    to_euler,
    to_quaternion,
    transform_from_anchor_points,
)
from volume import SliceImage, Volume, content_fraction, extract_slice, save_slice, save_slice_png

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0
TZ_LIMIT_FRACTION = 0.35
SCHEMES = ("identity", "euler-grid", "uniform-polar", "fibonacci", "random")
EXTRACT_CHUNK = 256
Z_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class SamplingConfig:
    scheme: str = "euler-grid"
    angle_step: float = math.radians(18.0)
    angle_min: float = -math.pi / 2.0
    angle_max: float = math.pi / 2.0
    n_normals: int = 300
    n_inplane: int = 10
    n_phi: int = 20
    n_theta: int = 15
    n_random: int = 500
    hemisphere: bool = False
    tz_min: float = -8.0
    tz_max: float = 8.0
    tz_step: float = 4.0
    seed: int = 0
    slice_size: Optional[int] = None
    slice_spacing: Optional[float] = None
    anchor_scale: Optional[float] = None
    min_content: float = 0.05

    def validate(self, volume: Optional[Volume] = None) -> "SamplingConfig":
        if self.scheme not in SCHEMES:
            raise PipelineError("invalid_config", "Unknown sampling scheme", detail=f"{self.scheme} not in {SCHEMES}")
        counts = {
            "n_normals": self.n_normals, "n_inplane": self.n_inplane,
            "n_phi": self.n_phi, "n_theta": self.n_theta,
        }
        for name, value in counts.items():
            if value < 1:
                raise PipelineError("invalid_config", "Counts must be at least 1", detail=f"{name}={value}")
        if self.n_random < 0:
            raise PipelineError("invalid_config", "Random pose count must not be negative", detail=str(self.n_random))
        if self.tz_max < self.tz_min or (self.tz_max > self.tz_min and self.tz_step <= 0):
            raise PipelineError(
                "invalid_config", "Invalid tz range", detail=f"[{self.tz_min}, {self.tz_max}) step {self.tz_step}"
            )
        if volume is not None:
            limit = TZ_LIMIT_FRACTION * volume.extent_mm
            if max(abs(self.tz_min), abs(self.tz_max)) > limit + 1e-9:
                raise PipelineError(
                    "invalid_config",
                    "tz range exceeds 0.35 of the volume side",
                    detail=f"[{self.tz_min}, {self.tz_max}] vs +-{limit:.4g} mm",
                )
        return self

    def slice_geometry(self, volume: Volume) -> Tuple[int, float, float]:
        """Slice side in pixels, pixel spacing in mm and anchor scale in mm."""
        l = int(self.slice_size or max(volume.dims))
        spacing = float(self.slice_spacing or volume.spacing)
        scale = float(self.anchor_scale or l * spacing)
        return l, spacing, scale

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SamplingConfig":
        known = {name: data[name] for name in cls.__dataclass_fields__ if name in data}
        return cls(**known)


@dataclass(frozen=True)
class SliceSample:
    id: str
    image: SliceImage
    transform: RigidTransform
    euler: EulerCartesian
    quaternion: QuaternionCartesian
    anchors: AnchorPoints
    content_fraction: float
    anchor_scale: float = field(default=1.0)

    def manifest_row(self, slice_file: str) -> Dict[str, Any]:
        return {
            "id": self.id,
            "slice": slice_file,
            "euler": self.euler.to_dict(),
            "quaternion": self.quaternion.to_dict(),
            "anchors": self.anchors.to_dict(),
            "anchor_scale": self.anchor_scale,
            "content_fraction": self.content_fraction,
        }


def tz_values(tz_min: float, tz_max: float, tz_step: float) -> List[float]:
    """Half-open grid [tz_min, tz_max); a degenerate range yields tz_min alone."""
    if tz_max == tz_min:
        return [float(tz_min)]
    if tz_step <= 0 or tz_max < tz_min:
        raise PipelineError("invalid_config", "Invalid tz range", detail=f"[{tz_min}, {tz_max}) step {tz_step}")
    count = int(math.ceil((tz_max - tz_min) / tz_step - 1e-9))
    return [float(tz_min + k * tz_step) for k in range(count)]


def euler_angles(step: float, lo: float = -math.pi / 2.0, hi: float = math.pi / 2.0) -> List[float]:
    """Angles lo + k*step for k = 1..n, covering (lo, hi]."""
    if step <= 0:
        raise PipelineError("invalid_config", "Angle step must be positive", detail=str(step))
    n = int(round((hi - lo) / step))
    if n < 1 or abs(n * step - (hi - lo)) > 1e-9:
        raise PipelineError(
            "invalid_config",
            "Angle step must divide the angle range evenly",
            detail=f"step={math.degrees(step):.6g} deg range={math.degrees(hi - lo):.6g} deg",
        )
    return [lo + k * step for k in range(1, n + 1)]


def euler_grid_transforms(
    angle_step: float,
    angle_range: Tuple[float, float] = (-math.pi / 2.0, math.pi / 2.0),
    tz: Tuple[float, float, float] = (-40.0, 40.0, 2.0),
) -> List[RigidTransform]:
    angles = euler_angles(angle_step, *angle_range)
    offsets = tz_values(*tz)
    transforms = []
    for rx in angles:
        for ry in angles:
            for rz in angles:
                rotation = rotation_from_euler(rx, ry, rz)
                normal = rotation[:, 2]
                transforms.extend(RigidTransform(rotation, offset * normal) for offset in offsets)
    return transforms


def inplane_angles(n: int) -> List[float]:
    return [k * math.pi / n for k in range(n)]


def transforms_from_normals(
    normals: Sequence[np.ndarray],
    angles: Sequence[float],
    offsets: Sequence[float],
) -> List[RigidTransform]:
    """Align +z with each normal after an in-plane Rz pre-rotation; shift along the normal."""
    transforms = []
    for normal in normals:
        normal = np.asarray(normal, dtype=np.float64)
        normal = normal / np.linalg.norm(normal)
        align = rotation_between_vectors(Z_AXIS, normal)
        for angle in angles:
            rotation = align @ rotation_from_euler(0.0, 0.0, angle)
            transforms.extend(RigidTransform(rotation, offset * normal) for offset in offsets)
    return transforms


def fibonacci_normals(n: int, hemisphere: bool = False) -> np.ndarray:
    """Golden-ratio spiral normals. The hemisphere variant spreads n points over z in (0, 1)."""
    if n < 1:
        raise PipelineError("invalid_config", "Normal count must be at least 1", detail=str(n))
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (i + 0.5) / n if hemisphere else 1.0 - (2.0 * i + 1.0) / n
    phi = 2.0 * np.pi * i / GOLDEN_RATIO
    radius = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([radius * np.cos(phi), radius * np.sin(phi), z], axis=1)


def fibonacci_transforms(
    n_normals: int,
    n_inplane: int,
    tz: Tuple[float, float, float],
    hemisphere: bool = False,
) -> List[RigidTransform]:
    return transforms_from_normals(fibonacci_normals(n_normals, hemisphere), inplane_angles(n_inplane), tz_values(*tz))


def uniform_polar_normals(n_phi: int, n_theta: int) -> np.ndarray:
    theta = (np.arange(n_theta) + 0.5) * np.pi / n_theta
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    normals = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1)
    return normals.reshape(-1, 3)


def uniform_polar_transforms(
    n_phi: int,
    n_theta: int,
    n_inplane: int = 1,
    tz: Tuple[float, float, float] = (0.0, 0.0, 1.0),
) -> List[RigidTransform]:
    return transforms_from_normals(uniform_polar_normals(n_phi, n_theta), inplane_angles(n_inplane), tz_values(*tz))


def random_validation_transforms(n: int, bounds: Tuple[float, float], seed: int) -> List[RigidTransform]:
    """Uniform random normals, in-plane angles in [0, pi) and tz uniform in bounds."""
    if n <= 0:
        return []
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1.0, 1.0, size=n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    psi = rng.uniform(0.0, np.pi, size=n)
    offsets = rng.uniform(bounds[0], bounds[1], size=n)
    radius = np.sqrt(1.0 - z * z)
    normals = np.stack([radius * np.cos(phi), radius * np.sin(phi), z], axis=1)
    transforms = []
    for normal, angle, offset in zip(normals, psi, offsets):
        transforms.extend(transforms_from_normals([normal], [angle], [offset]))
    return transforms


def random_euler_transforms(
    n: int,
    angle_range: Tuple[float, float],
    tz_range: Tuple[float, float],
    seed: int,
) -> List[RigidTransform]:
    """Random poses inside the bounds of an Euler-grid training set."""
    if n <= 0:
        return []
    rng = np.random.default_rng(seed)
    angles = rng.uniform(angle_range[0], angle_range[1], size=(n, 3))
    offsets = rng.uniform(tz_range[0], tz_range[1], size=n)
    transforms = []
    for (rx, ry, rz), offset in zip(angles, offsets):
        rotation = rotation_from_euler(rx, ry, rz)
        transforms.append(RigidTransform(rotation, offset * rotation[:, 2]))
    return transforms


def nearest_neighbor_angles(normals: np.ndarray) -> np.ndarray:
    """Angle in radians from each normal to its closest other normal (brute force)."""
    normals = np.asarray(normals, dtype=np.float64)
    dots = np.clip(normals @ normals.T, -1.0, 1.0)
    np.fill_diagonal(dots, -np.inf)
    return np.arccos(np.clip(dots.max(axis=1), -1.0, 1.0))


def sampling_transforms(cfg: SamplingConfig) -> List[RigidTransform]:
    tz = (cfg.tz_min, cfg.tz_max, cfg.tz_step)
    if cfg.scheme == "identity":
        return [RigidTransform.from_translation([0.0, 0.0, offset]) for offset in tz_values(*tz)]
    if cfg.scheme == "euler-grid":
        return euler_grid_transforms(cfg.angle_step, (cfg.angle_min, cfg.angle_max), tz)
    if cfg.scheme == "fibonacci":
        return fibonacci_transforms(cfg.n_normals, cfg.n_inplane, tz, cfg.hemisphere)
    if cfg.scheme == "uniform-polar":
        return uniform_polar_transforms(cfg.n_phi, cfg.n_theta, cfg.n_inplane, tz)
    if cfg.scheme == "random":
        upper = cfg.tz_max if cfg.tz_max > cfg.tz_min else cfg.tz_min
        return random_validation_transforms(cfg.n_random, (cfg.tz_min, upper), cfg.seed)
    raise PipelineError("invalid_config", "Unknown sampling scheme", detail=cfg.scheme)


def slice_id(index: int) -> str:
    return f"s{index:06d}"


def make_sample(sample_id: str, image: SliceImage, t: RigidTransform, anchor_scale: float) -> SliceSample:
    return SliceSample(
        id=sample_id,
        image=image,
        transform=t,
        euler=to_euler(t),
        quaternion=to_quaternion(t),
        anchors=anchor_points_from_transform(t, anchor_scale),
        content_fraction=content_fraction(image),
        anchor_scale=anchor_scale,
    )


def iter_slice_samples(
    v: Volume,
    cfg: SamplingConfig,
    transforms: Optional[Sequence[RigidTransform]] = None,
    threads: int = 1,
) -> Iterator[SliceSample]:
    """Extract slices in transform order and drop those below min_content.

    Ids follow the transform index, so they are stable under filtering.
    """
    cfg.validate(v)
    transforms = sampling_transforms(cfg) if transforms is None else list(transforms)
    l, spacing, scale = cfg.slice_geometry(v)

    def build(item: Tuple[int, RigidTransform]) -> SliceSample:
        index, t = item
        return make_sample(slice_id(index), extract_slice(v, t, l, spacing), t, scale)

    for chunk in chunked(list(enumerate(transforms)), EXTRACT_CHUNK):
        for sample in run_ordered(build, chunk, threads):
            if sample.content_fraction >= cfg.min_content:
                yield sample


def generate_dataset(
    v: Volume,
    cfg: SamplingConfig,
    out_dir: str,
    manifest_name: str = "manifest.jsonl",
    threads: int = 1,
    png: bool = False,
) -> List[Dict[str, Any]]:
    """Write one SPV1 slice per kept pose plus a JSON-lines manifest; return the manifest rows."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise PipelineError("unwritable_output", "Unable to create output directory", detail=f"{out_dir}: {exc}") from exc

    rows: List[Dict[str, Any]] = []
    total = 0
    for sample in iter_slice_samples(v, cfg, threads=threads):
        slice_file = f"{sample.id}.spv"
        save_slice(sample.image, os.path.join(out_dir, slice_file))
        if png:
            save_slice_png(sample.image, os.path.join(out_dir, f"{sample.id}.png"))
        rows.append(sample.manifest_row(slice_file))
        total += 1
    if not rows:
        raise PipelineError(
            "empty_dataset", "No slice passed the content filter", detail=f"min_content={cfg.min_content}"
        )
    write_jsonl(os.path.join(out_dir, manifest_name), rows)
    log_event("dataset_written", out_dir=out_dir, scheme=cfg.scheme, rows=total, min_content=cfg.min_content)
    return rows


def write_jsonl(path: str, rows: Sequence[Dict[str, Any]]) -> None:
    try:
        with open(path, "w", encoding="utf-8") as handle:
            for row in rows:
                handle.write(json.dumps(row, sort_keys=True) + "\n")
    except OSError as exc:
        raise PipelineError("unwritable_output", "Unable to write JSON-lines file", detail=f"{path}: {exc}") from exc


def read_manifest(path: str) -> pd.DataFrame:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
        frame = pd.read_json(io.StringIO(text), lines=True, precise_float=True, dtype=False, convert_dates=False)
    except (OSError, ValueError) as exc:
        raise PipelineError("malformed_manifest", "Unable to read manifest", detail=f"{path}: {exc}") from exc
    if frame.empty or "id" not in frame.columns:
        raise PipelineError("malformed_manifest", "Manifest has no rows with an id", detail=path)
    return frame


def row_transform(row: Dict[str, Any], encoding: str = "quaternion") -> RigidTransform:
    if encoding == "quaternion":
        return from_quaternion(QuaternionCartesian.from_dict(row["quaternion"]))
    if encoding == "euler":
        return from_euler(EulerCartesian.from_dict(row["euler"]))
    if encoding == "anchors":
        return transform_from_anchor_points(AnchorPoints.from_dict(row["anchors"]), row.get("anchor_scale"))
    raise PipelineError("invalid_config", "Unknown label encoding", detail=encoding)
