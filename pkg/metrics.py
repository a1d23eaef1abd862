"""
Image similarity metrics and pose-label errors/losses.
Used by the evaluate command, the dictionary predictor and the reconstruction loop.
"""

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from liegroup import geodesic_distance, mad_outlier_mask
from pipeline_utils import PipelineError
from se3core import (
    AnchorPoints,
    EulerCartesian,
    QuaternionCartesian,
    RigidTransform,
    anchor_points_from_transform,
    to_euler,
    to_quaternion,
)
from volume import SliceImage, Volume, extract_slice

ImageLike = Union[np.ndarray, SliceImage]

DEFAULT_MAX_I = 255.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
REPORT_METRICS = ("cc", "mse", "psnr", "ssim", "ed_error", "gd_error")


@dataclass
class MetricReport:
    id: Optional[str] = None
    cc: Optional[float] = None
    mse: Optional[float] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    ed_error: float = 0.0
    gd_error: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        row = asdict(self)
        if row["psnr"] is not None and math.isinf(row["psnr"]):
            row["psnr"] = None
            row["identical"] = True
        return row


def _pair(f: ImageLike, g: ImageLike) -> tuple:
    a = np.asarray(f.pixels if isinstance(f, SliceImage) else f, dtype=np.float64)
    b = np.asarray(g.pixels if isinstance(g, SliceImage) else g, dtype=np.float64)
    if a.shape != b.shape:
        raise PipelineError("shape_mismatch", "Images must have equal dimensions", detail=f"{a.shape} != {b.shape}")
    return a, b


def normalized_image(f: np.ndarray) -> np.ndarray:
    """Zero-mean image scaled to unit sum of squares."""
    centered = np.asarray(f, dtype=np.float64) - np.mean(f)
    norm = math.sqrt(float(np.sum(centered * centered)))
    if norm == 0.0:
        raise PipelineError("constant_input", "Cross correlation of a constant image is undefined")
    return centered / norm


def cross_correlation(f: ImageLike, g: ImageLike) -> float:
    a, b = _pair(f, g)
    value = float(np.sum(normalized_image(a) * normalized_image(b)))
    return max(-1.0, min(1.0, value))


def mse(f: ImageLike, g: ImageLike) -> float:
    a, b = _pair(f, g)
    return float(np.mean((a - b) ** 2))


def psnr(f: ImageLike, g: ImageLike, max_i: float = DEFAULT_MAX_I) -> float:
    """Peak signal-to-noise ratio in dB; identical images give +inf."""
    error = mse(f, g)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(max_i * max_i / error)


def ssim(
    f: ImageLike,
    g: ImageLike,
    k1: float = SSIM_K1,
    k2: float = SSIM_K2,
    max_i: float = DEFAULT_MAX_I,
) -> float:
    """Single-window SSIM over the whole image."""
    a, b = _pair(f, g)
    c1 = (k1 * max_i) ** 2
    c2 = (k2 * max_i) ** 2
    mu_a, mu_b = float(a.mean()), float(b.mean())
    var_a, var_b = float(a.var()), float(b.var())
    cov = float(np.mean((a - mu_a) * (b - mu_b)))
    luminance = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    structure = (2.0 * cov + c2) / (var_a + var_b + c2)
    return luminance * structure


def euclidean_distance_error(pred: AnchorPoints, gt: AnchorPoints) -> float:
    return float(np.mean(np.linalg.norm(pred.as_array() - gt.as_array(), axis=1)))


def posenet_loss(pred: QuaternionCartesian, gt: QuaternionCartesian, beta: float = 1.0) -> float:
    """|x_hat - x| + beta * |q_hat - q / |q||; only the target quaternion is normalized."""
    target = gt.quaternion
    norm = np.linalg.norm(target)
    if norm == 0.0:
        raise PipelineError("degenerate_input", "Target quaternion is zero")
    translation_error = np.linalg.norm(pred.translation - gt.translation)
    rotation_error = np.linalg.norm(pred.quaternion - target / norm)
    return float(translation_error + beta * rotation_error)


def anchor_loss(pred: AnchorPoints, gt: AnchorPoints, alpha: float = 1.0, beta: float = 1.0, gamma: float = 1.0) -> float:
    distances = np.linalg.norm(pred.as_array() - gt.as_array(), axis=1)
    return float(alpha * distances[0] + beta * distances[1] + gamma * distances[2])


def euler_l2_loss(pred: EulerCartesian, gt: EulerCartesian) -> float:
    a = np.array([pred.rx, pred.ry, pred.rz, pred.tx, pred.ty, pred.tz])
    b = np.array([gt.rx, gt.ry, gt.rz, gt.tx, gt.ty, gt.tz])
    return float(np.linalg.norm(a - b))


def multi_branch_loss(pred: RigidTransform, gt: RigidTransform, anchor_scale: float, beta: float = 1.0) -> Dict[str, float]:
    """One loss per label representation plus their sum."""
    branches = {
        "euler": euler_l2_loss(to_euler(pred), to_euler(gt)),
        "posenet": posenet_loss(to_quaternion(pred), to_quaternion(gt), beta),
        "anchors": anchor_loss(
            anchor_points_from_transform(pred, anchor_scale), anchor_points_from_transform(gt, anchor_scale)
        ),
    }
    branches["total"] = sum(branches.values())
    return branches


def evaluate_pose(
    pred: RigidTransform,
    gt: RigidTransform,
    anchor_scale: float,
    volume: Optional[Volume] = None,
    l: Optional[int] = None,
    spacing: Optional[float] = None,
    w_rot: Optional[float] = None,
    w_trans: Optional[float] = None,
    max_i: float = DEFAULT_MAX_I,
    report_id: Optional[str] = None,
) -> MetricReport:
    report = MetricReport(
        id=report_id,
        ed_error=euclidean_distance_error(
            anchor_points_from_transform(pred, anchor_scale), anchor_points_from_transform(gt, anchor_scale)
        ),
        gd_error=geodesic_distance(pred, gt, w_rot, w_trans),
    )
    if volume is None:
        return report
    l = l or max(volume.dims)
    reference = extract_slice(volume, gt, l, spacing)
    candidate = extract_slice(volume, pred, l, spacing)
    try:
        report.cc = cross_correlation(reference, candidate)
    except PipelineError:
        report.cc = None
    report.mse = mse(reference, candidate)
    report.psnr = psnr(reference, candidate, max_i)
    report.ssim = ssim(reference, candidate, max_i=max_i)
    return report


def summarize_reports(reports: Sequence[MetricReport], reject_outliers: bool = False) -> Dict[str, Any]:
    """Mean and population stdev per metric; MAD rejection of gross geodesic outliers if asked."""
    if not reports:
        raise PipelineError("empty_input", "No metric reports to summarize")
    frame = pd.DataFrame([asdict(report) for report in reports])
    rejected: List[str] = []
    if reject_outliers:
        mask = mad_outlier_mask(frame["gd_error"].to_numpy(dtype=np.float64))
        rejected = [str(value) for value in frame.loc[mask, "id"]]
        frame = frame.loc[~mask]
    numeric = frame[list(REPORT_METRICS)].apply(pd.to_numeric, errors="coerce").replace([np.inf, -np.inf], np.nan)
    summary: Dict[str, Any] = {"id": "summary", "count": int(len(frame)), "rejected": rejected}
    for metric in REPORT_METRICS:
        column = numeric[metric].dropna()
        if column.empty:
            summary[metric] = None
            continue
        summary[metric] = {"mean": float(column.mean()), "std": float(column.std(ddof=0))}
    return summary
