"""
Rigid transform representations for slice poses.

A pose maps the identity sampling plane (the x-y plane through the volume
center) to its location in atlas space. Three label encodings describe the
same pose: Euler-Cartesian, Quaternion-Cartesian and Anchor Points. All of them
convert losslessly to and from RigidTransform.

Euler convention: extrinsic rotations about X, then Y, then Z, so that
R = Rz @ Ry @ Rx.
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from pipeline_utils import PipelineError

ORTHONORMAL_TOL = 1e-9
ANTIPARALLEL_EPS = 1e-12
GIMBAL_EPS = 1e-8
COLLINEAR_REL = 1e-6
COINCIDE_REL = 1e-6

IDENTITY_ANCHORS = np.array([[-1.0, -1.0, 0.0], [0.0, 0.0, 0.0], [1.0, -1.0, 0.0]])


def _frozen_array(values: Any, shape: tuple) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    if array.shape != shape:
        raise PipelineError("invalid_transform", "Unexpected array shape", detail=f"{array.shape} != {shape}")
    if not np.all(np.isfinite(array)):
        raise PipelineError("invalid_transform", "Non-finite transform component")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rotation = _frozen_array(self.rotation, (3, 3))
        translation = _frozen_array(self.translation, (3,))
        ortho_error = np.linalg.norm(rotation.T @ rotation - np.eye(3))
        if ortho_error > ORTHONORMAL_TOL:
            raise PipelineError("invalid_transform", "Rotation is not orthonormal", detail=f"error={ortho_error:.3g}")
        det = np.linalg.det(rotation)
        if abs(det - 1.0) > ORTHONORMAL_TOL:
            raise PipelineError("invalid_transform", "Rotation is not proper", detail=f"det={det:.12g}")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, translation: Sequence[float]) -> "RigidTransform":
        return cls(np.eye(3), translation)

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points of shape (..., 3) from the slice frame to world space."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def __repr__(self) -> str:
        euler = to_euler(self)
        return (
            f"RigidTransform(rx={euler.rx:.6g}, ry={euler.ry:.6g}, rz={euler.rz:.6g}, "
            f"t=({euler.tx:.6g}, {euler.ty:.6g}, {euler.tz:.6g}))"
        )


@dataclass(frozen=True)
class EulerCartesian:
    rx: float
    ry: float
    rz: float
    tx: float
    ty: float
    tz: float

    def to_dict(self) -> Dict[str, float]:
        return {"rx": self.rx, "ry": self.ry, "rz": self.rz, "tx": self.tx, "ty": self.ty, "tz": self.tz}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EulerCartesian":
        return cls(*(float(data[key]) for key in ("rx", "ry", "rz", "tx", "ty", "tz")))


@dataclass(frozen=True)
class QuaternionCartesian:
    qw: float
    qx: float
    qy: float
    qz: float
    tx: float
    ty: float
    tz: float

    @property
    def quaternion(self) -> np.ndarray:
        return np.array([self.qw, self.qx, self.qy, self.qz])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    def to_dict(self) -> Dict[str, float]:
        return {
            "qw": self.qw, "qx": self.qx, "qy": self.qy, "qz": self.qz,
            "tx": self.tx, "ty": self.ty, "tz": self.tz,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "QuaternionCartesian":
        return cls(*(float(data[key]) for key in ("qw", "qx", "qy", "qz", "tx", "ty", "tz")))


@dataclass(frozen=True, eq=False)
class AnchorPoints:
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray

    def __post_init__(self) -> None:
        for name in ("p1", "p2", "p3"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), (3,)))

    def as_array(self) -> np.ndarray:
        return np.stack([self.p1, self.p2, self.p3])

    def to_dict(self) -> Dict[str, list]:
        return {"p1": self.p1.tolist(), "p2": self.p2.tolist(), "p3": self.p3.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AnchorPoints":
        return cls(data["p1"], data["p2"], data["p3"])

    @classmethod
    def from_array(cls, points: np.ndarray) -> "AnchorPoints":
        points = np.asarray(points, dtype=np.float64)
        return cls(points[0], points[1], points[2])


def normalize_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(float(angle), 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def rotation_from_euler(rx: float, ry: float, rz: float) -> np.ndarray:
    return Rotation.from_euler("xyz", [rx, ry, rz]).as_matrix()


def euler_from_rotation(rotation: np.ndarray) -> tuple:
    r = np.asarray(rotation, dtype=np.float64)
    # atan2 form keeps ry well conditioned near +-pi/2
    ry = math.atan2(-r[2, 0], math.hypot(r[0, 0], r[1, 0]))
    if math.hypot(r[2, 1], r[2, 2]) < GIMBAL_EPS:
        # gimbal lock: only rz - rx (or rz + rx) is observable, pin rx to 0
        rx = 0.0
        rz = math.atan2(-r[0, 1], r[1, 1])
    else:
        rx = math.atan2(r[2, 1], r[2, 2])
        rz = math.atan2(r[1, 0], r[0, 0])
    return normalize_angle(rx), normalize_angle(ry), normalize_angle(rz)


def rotation_between_vectors(a: Sequence[float], b: Sequence[float]) -> np.ndarray:
    """Minimal-angle rotation taking the direction of a onto the direction of b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise PipelineError("degenerate_input", "Cannot align a zero-length vector")
    a_hat = a / norm_a
    b_hat = b / norm_b
    cos_angle = float(np.clip(a_hat @ b_hat, -1.0, 1.0))
    if cos_angle < -1.0 + ANTIPARALLEL_EPS:
        candidates = [np.cross(a_hat, [1.0, 0.0, 0.0]), np.cross(a_hat, [0.0, 1.0, 0.0])]
        axis = candidates[0] if np.linalg.norm(candidates[0]) >= np.linalg.norm(candidates[1]) else candidates[1]
        axis = axis / np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    cross = np.cross(a_hat, b_hat)
    sin_angle = np.linalg.norm(cross)
    if sin_angle < 1e-15:
        return np.eye(3)
    angle = math.atan2(sin_angle, cos_angle)
    return Rotation.from_rotvec(cross / sin_angle * angle).as_matrix()


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a o b: apply b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rotation_t = t.rotation.T
    return RigidTransform(rotation_t, -(rotation_t @ t.translation))


def from_euler(euler: EulerCartesian) -> RigidTransform:
    return RigidTransform(rotation_from_euler(euler.rx, euler.ry, euler.rz), [euler.tx, euler.ty, euler.tz])


def to_euler(t: RigidTransform) -> EulerCartesian:
    rx, ry, rz = euler_from_rotation(t.rotation)
    tx, ty, tz = (float(v) for v in t.translation)
    return EulerCartesian(rx, ry, rz, tx, ty, tz)


def canonical_quaternion(q: Sequence[float]) -> np.ndarray:
    """Unit quaternion (w, x, y, z) on the qw >= 0 hemisphere."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise PipelineError("degenerate_input", "Zero quaternion")
    q = q / norm
    if q[0] < 0.0:
        return -q
    if q[0] == 0.0:
        nonzero = np.flatnonzero(q[1:])
        if nonzero.size and q[1 + nonzero[0]] < 0.0:
            return -q
    return q


def from_quaternion(q: QuaternionCartesian) -> RigidTransform:
    qw, qx, qy, qz = canonical_quaternion(q.quaternion)
    rotation = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
    return RigidTransform(rotation, q.translation)


def to_quaternion(t: RigidTransform) -> QuaternionCartesian:
    qx, qy, qz, qw = Rotation.from_matrix(np.array(t.rotation)).as_quat()
    qw, qx, qy, qz = canonical_quaternion([qw, qx, qy, qz])
    tx, ty, tz = (float(v) for v in t.translation)
    return QuaternionCartesian(float(qw), float(qx), float(qy), float(qz), tx, ty, tz)


def anchor_points_from_transform(t: RigidTransform, l: float) -> AnchorPoints:
    return AnchorPoints.from_array(t.apply(IDENTITY_ANCHORS * float(l)))


def transform_from_anchor_points(a: AnchorPoints, l: Optional[float] = None) -> RigidTransform:
    """Recover the pose from (possibly noisy) anchor points; translation is p2."""
    points = a.as_array()
    pairs = {"p1-p2": (0, 1), "p2-p3": (1, 2), "p1-p3": (0, 2)}
    distances = {name: float(np.linalg.norm(points[i] - points[j])) for name, (i, j) in pairs.items()}
    scale = float(l) if l is not None else max(distances.values()) / 2.0
    for name, distance in distances.items():
        if distance <= COINCIDE_REL * scale:
            raise PipelineError(
                "degenerate_anchor_points",
                "Anchor points coincide",
                detail=f"{name} distance {distance:.3g} <= {COINCIDE_REL * scale:.3g}",
            )
    v1 = a.p3 - a.p1
    v2 = a.p2 - a.p1
    n1 = np.cross(v1, v2)
    if np.linalg.norm(n1) <= COLLINEAR_REL * scale * scale:
        raise PipelineError(
            "degenerate_anchor_points",
            "Anchor points are collinear",
            detail=f"|v1 x v2| {np.linalg.norm(n1):.3g} <= {COLLINEAR_REL * scale * scale:.3g}",
        )
    x_axis = v1 / np.linalg.norm(v1)
    z_axis = n1 / np.linalg.norm(n1)
    n2 = np.cross(z_axis, x_axis)
    y_axis = n2 / np.linalg.norm(n2)
    # a noisy triangle leaves z slightly off x; rebuild z from the orthonormal pair
    z_axis = np.cross(x_axis, y_axis)
    return RigidTransform(np.column_stack([x_axis, y_axis, z_axis]), a.p2)
