"""
SE(3) statistics for pose aggregation.

Tangent vectors are ordered (omega, nu): rotation vector first, then the
translational part. The squared geodesic distance is
w_rot * |omega|^2 + w_trans * |nu|^2 of the principal logarithm of x^-1 o y.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from pipeline_utils import PipelineError, env_float
from se3core import (
    AnchorPoints,
    RigidTransform,
    anchor_points_from_transform,
    compose,
    invert,
    transform_from_anchor_points,
)

SMALL_ANGLE = 1e-7
SERIES_ANGLE = 1e-4
NEAR_PI = 1e-3
MAD_SCALE = 1.4826
FRECHET_METHODS = ("fixed_point", "gauss_newton")


@dataclass(frozen=True, eq=False)
class Twist:
    omega: np.ndarray
    nu: np.ndarray

    def __post_init__(self) -> None:
        for name in ("omega", "nu"):
            value = np.array(getattr(self, name), dtype=np.float64)
            if value.shape != (3,):
                raise PipelineError("invalid_transform", f"Twist {name} must be a 3-vector", detail=str(value.shape))
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, vector: Sequence[float]) -> "Twist":
        vector = np.asarray(vector, dtype=np.float64)
        return cls(vector[:3], vector[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.nu])


@dataclass(frozen=True)
class MetricWeights:
    w_rot: float = 1.0
    w_trans: float = 1.0

    def validate(self) -> "MetricWeights":
        if not (self.w_rot > 0 and self.w_trans > 0):
            raise PipelineError(
                "invalid_config", "Metric weights must be positive", detail=f"w_rot={self.w_rot} w_trans={self.w_trans}"
            )
        return self

    @classmethod
    def from_env(cls) -> "MetricWeights":
        return cls(env_float("SVR_POSE_W_ROT", 1.0), env_float("SVR_POSE_W_TRANS", 1.0)).validate()

    def diagonal(self) -> np.ndarray:
        return np.array([self.w_rot] * 3 + [self.w_trans] * 3)


@dataclass(frozen=True)
class ManifoldStats:
    mean: RigidTransform
    variance: float
    n: int
    iterations: int
    converged: bool
    status: str = "converged"


def _resolve_weights(w_rot: Optional[float], w_trans: Optional[float]) -> MetricWeights:
    if w_rot is None or w_trans is None:
        defaults = MetricWeights.from_env()
        w_rot = defaults.w_rot if w_rot is None else w_rot
        w_trans = defaults.w_trans if w_trans is None else w_trans
    return MetricWeights(float(w_rot), float(w_trans)).validate()


def hat(v: Sequence[float]) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega: Sequence[float]) -> np.ndarray:
    return Rotation.from_rotvec(np.array(omega, dtype=np.float64)).as_matrix()


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """Principal rotation vector of a rotation matrix (|omega| <= pi)."""
    r = np.asarray(rotation, dtype=np.float64)
    w = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_theta = float(np.linalg.norm(w))
    cos_theta = 0.5 * (float(np.trace(r)) - 1.0)
    theta = math.atan2(sin_theta, cos_theta)
    if theta < SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    if theta > math.pi - NEAR_PI:
        # axis from the symmetric part: (R + R^T)/2 - cos(theta) I = (1 - cos(theta)) a a^T
        sym = 0.5 * (r + r.T) - cos_theta * np.eye(3)
        column = int(np.argmax(np.diag(sym)))
        axis = sym[:, column] / np.linalg.norm(sym[:, column])
        if axis @ w < 0.0:
            axis = -axis
        return theta * axis
    return w * (theta / sin_theta)


def _jacobian_coefficients(theta: float) -> tuple:
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        return 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0, 1.0 / 12.0 + t2 / 720.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    c = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / t2
    return a, b, c


def left_jacobian(omega: Sequence[float]) -> np.ndarray:
    """V(omega): maps nu to the translation of exp((omega, nu))."""
    omega = np.asarray(omega, dtype=np.float64)
    a, b, _ = _jacobian_coefficients(float(np.linalg.norm(omega)))
    k = hat(omega)
    return np.eye(3) + a * k + b * (k @ k)


def left_jacobian_inverse(omega: Sequence[float]) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    _, _, c = _jacobian_coefficients(float(np.linalg.norm(omega)))
    k = hat(omega)
    return np.eye(3) - 0.5 * k + c * (k @ k)


def se3_log(t: RigidTransform) -> Twist:
    omega = so3_log(t.rotation)
    return Twist(omega, left_jacobian_inverse(omega) @ t.translation)


def se3_exp(x: Twist) -> RigidTransform:
    return RigidTransform(so3_exp(x.omega), left_jacobian(x.omega) @ x.nu)


def adjoint_algebra(x: Twist) -> np.ndarray:
    """ad_x acting on (omega, nu) tangent vectors."""
    ad = np.zeros((6, 6))
    ad[:3, :3] = hat(x.omega)
    ad[3:, :3] = hat(x.nu)
    ad[3:, 3:] = hat(x.omega)
    return ad


def se3_left_jacobian(x: Twist) -> np.ndarray:
    """Full 6x6 left Jacobian, sum_n ad_x^n / (n+1)!, evaluated through a block exponential."""
    block = np.zeros((12, 12))
    block[:6, :6] = adjoint_algebra(x)
    block[:6, 6:] = np.eye(6)
    return expm(block)[:6, 6:]


def geodesic_distance(
    x: RigidTransform,
    y: RigidTransform,
    w_rot: Optional[float] = None,
    w_trans: Optional[float] = None,
) -> float:
    weights = _resolve_weights(w_rot, w_trans)
    if np.array_equal(x.rotation, y.rotation) and np.array_equal(x.translation, y.translation):
        return 0.0
    twist = se3_log(compose(invert(x), y))
    return math.sqrt(weights.w_rot * float(twist.omega @ twist.omega) + weights.w_trans * float(twist.nu @ twist.nu))


def max_pairwise_rotation_angle(xs: Sequence[RigidTransform]) -> float:
    rotations = np.stack([x.rotation for x in xs])
    traces = np.einsum("iab,jab->ij", rotations, rotations)
    cosines = np.clip(0.5 * (traces - 1.0), -1.0, 1.0)
    return float(np.arccos(cosines.min()))


def manifold_variance(
    mean: RigidTransform,
    xs: Sequence[RigidTransform],
    w_rot: Optional[float] = None,
    w_trans: Optional[float] = None,
) -> float:
    if not xs:
        raise PipelineError("empty_input", "Variance of an empty sample")
    return float(np.mean([geodesic_distance(mean, x, w_rot, w_trans) ** 2 for x in xs]))


def frechet_mean(
    xs: Sequence[RigidTransform],
    tol: float = 1e-10,
    max_iter: int = 100,
    w_rot: Optional[float] = None,
    w_trans: Optional[float] = None,
    margin: float = 1e-3,
    method: str = "fixed_point",
) -> ManifoldStats:
    """Riemannian center of mass of SE(3) samples, starting from the first sample.

    ``fixed_point`` moves the mean by the average of the residuals
    log(m^-1 o x_i) until that average is below tol. ``gauss_newton`` instead
    solves the normal equations of the linearized residuals, which lands on the
    exact minimizer of sum_i dist(m, x_i)^2 under the weighted metric; the two
    agree to second order in the spread of the sample.
    """
    xs = list(xs)
    if not xs:
        raise PipelineError("empty_input", "Frechet mean of an empty sample")
    if method not in FRECHET_METHODS:
        raise PipelineError("invalid_config", "Unknown Frechet mean method", detail=f"{method} not in {FRECHET_METHODS}")
    weights = _resolve_weights(w_rot, w_trans)
    w = np.diag(weights.diagonal())
    n = len(xs)

    spread = max_pairwise_rotation_angle(xs) if n > 1 else 0.0
    if spread >= math.pi - margin:
        return ManifoldStats(xs[0], float("nan"), n, 0, False, status="injectivity")

    mean = xs[0]
    for iteration in range(1, max_iter + 1):
        mean_inv = invert(mean)
        residuals = [se3_log(compose(mean_inv, x)) for x in xs]
        if method == "fixed_point":
            step = np.mean([residual.as_vector() for residual in residuals], axis=0)
        else:
            step = _gauss_newton_step(residuals, w)
        if np.linalg.norm(step) < tol:
            variance = manifold_variance(mean, xs, weights.w_rot, weights.w_trans)
            return ManifoldStats(mean, variance, n, iteration, True)
        mean = compose(mean, se3_exp(Twist.from_vector(step)))

    variance = manifold_variance(mean, xs, weights.w_rot, weights.w_trans)
    return ManifoldStats(mean, variance, n, max_iter, False, status="max_iter")


def _gauss_newton_step(residuals: Sequence[Twist], w: np.ndarray) -> np.ndarray:
    hessian = np.zeros((6, 6))
    gradient = np.zeros(6)
    for residual in residuals:
        vector = residual.as_vector()
        if not vector.any():
            hessian += w
            continue
        a = np.linalg.inv(se3_left_jacobian(residual))
        hessian += a.T @ w @ a
        gradient += a.T @ w @ vector
    return np.linalg.solve(hessian, gradient)


def anchor_point_mean(xs: Sequence[RigidTransform], l: float) -> RigidTransform:
    """Average the anchor points of each pose, then recover a single pose."""
    if not xs:
        raise PipelineError("empty_input", "Anchor point mean of an empty sample")
    points = np.mean([anchor_points_from_transform(x, l).as_array() for x in xs], axis=0)
    return transform_from_anchor_points(AnchorPoints.from_array(points), l)


def mad_outlier_mask(values: Sequence[float], k: float = MAD_SCALE, cutoff: float = 3.0) -> np.ndarray:
    """True where a value lies more than cutoff scaled MADs from the median.

    With a zero MAD every value that differs from the median at all is flagged.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise PipelineError("empty_input", "MAD of an empty sample")
    median = np.median(values)
    deviation = np.abs(values - median)
    mad = k * float(np.median(deviation))
    if mad == 0.0:
        return deviation > 0.0
    return deviation > cutoff * mad
