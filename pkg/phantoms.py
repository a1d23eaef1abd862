"""
Deterministic synthetic volumes for the pipeline tests and the `phantom` command.
"""

from typing import Callable, Dict

import numpy as np

from pipeline_utils import PipelineError
from volume import Volume, grid_world_points, minmax_rescale

PHANTOM_KINDS = ("gradient", "shells", "sinusoid", "blobs")


def _soft_ellipsoid(points: np.ndarray, semi_axes: np.ndarray, edge: float = 0.15) -> np.ndarray:
    rho = np.sqrt(np.sum((points / semi_axes) ** 2, axis=-1))
    ramp = np.clip((1.0 - rho) / edge, 0.0, 1.0)
    return ramp * ramp * (3.0 - 2.0 * ramp)


def gradient_phantom(dims: int, spacing: float, seed: int) -> np.ndarray:
    # intensity equals the z index: 0 on the first plane
    return np.broadcast_to(np.arange(dims, dtype=np.float64), (dims, dims, dims)).copy()


def shells_phantom(dims: int, spacing: float, seed: int, n_shells: int = 4) -> np.ndarray:
    points = grid_world_points(Volume(np.zeros((dims, dims, dims)), spacing))
    radius = 0.45 * dims * spacing
    r = np.linalg.norm(points, axis=-1)
    shells = 0.5 * (1.0 + np.cos(2.0 * np.pi * n_shells * r / radius))
    return np.where(r < radius, shells, 0.0) * _soft_ellipsoid(points, np.full(3, radius))


def sinusoid_phantom(dims: int, spacing: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    points = grid_world_points(Volume(np.zeros((dims, dims, dims)), spacing))
    extent = dims * spacing
    frequencies = rng.uniform(1.5, 3.0, size=3) * 2.0 * np.pi / extent
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    waves = np.prod(np.sin(points * frequencies + phases), axis=-1)
    return (1.0 + waves) * _soft_ellipsoid(points, np.full(3, 0.45 * extent))


def blobs_phantom(dims: int, spacing: float, seed: int, n_blobs: int = 12) -> np.ndarray:
    """Sum of anisotropic Gaussians inside a soft ellipsoid; no symmetry planes."""
    rng = np.random.default_rng(seed)
    points = grid_world_points(Volume(np.zeros((dims, dims, dims)), spacing))
    half = 0.5 * dims * spacing
    semi_axes = np.array([0.85, 0.75, 0.65]) * half
    body = np.full(points.shape[:-1], 0.3)
    for _ in range(n_blobs):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        center = direction * rng.uniform(0.0, 0.7) * semi_axes
        sigmas = rng.uniform(0.12, 0.3, size=3) * half
        amplitude = rng.uniform(0.4, 1.0)
        body += amplitude * np.exp(-0.5 * np.sum(((points - center) / sigmas) ** 2, axis=-1))
    return body * _soft_ellipsoid(points, semi_axes)


PHANTOM_BUILDERS: Dict[str, Callable[[int, float, int], np.ndarray]] = {
    "gradient": gradient_phantom,
    "shells": shells_phantom,
    "sinusoid": sinusoid_phantom,
    "blobs": blobs_phantom,
}


def make_phantom(kind: str, dims: int = 64, spacing: float = 1.0, seed: int = 0) -> Volume:
    if kind not in PHANTOM_BUILDERS:
        raise PipelineError("invalid_config", "Unknown phantom kind", detail=f"{kind} not in {PHANTOM_KINDS}")
    if dims < 2:
        raise PipelineError("invalid_config", "Phantom needs at least 2 voxels per axis", detail=str(dims))
    data = PHANTOM_BUILDERS[kind](int(dims), float(spacing), int(seed))
    volume = Volume(data, spacing)
    if kind == "gradient":
        return volume
    return minmax_rescale(volume, 0.0, 255.0)
