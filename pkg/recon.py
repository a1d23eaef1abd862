"""
Slice-to-volume reconstruction.

The forward model blurs the volume with the slice PSF and samples it on the
slice plane. Reconstruction scatters slice pixels into the grid with the same
PSF (Gaussian average) and optionally alternates that with per-slice rigid
registration against the current estimate (SVR refinement).
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from liegroup import mad_outlier_mask, so3_exp
from metrics import cross_correlation, psnr
from pipeline_utils import PipelineError, chunked, log_event, run_ordered
from se3core import RigidTransform, compose, rotation_from_euler
from volume import SliceImage, Volume, extract_slice, sample_points, slice_world_points

FWHM_TO_SIGMA = 1.0 / 2.355
GAUSS_HERMITE_WEIGHTS = (1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0)
WEIGHT_FLOOR = 1e-6
CC_TOLERANCE = 1e-6

STACK_ROTATIONS = {
    "axial": (0.0, 0.0, 0.0),
    "coronal": (math.pi / 2.0, 0.0, 0.0),
    "sagittal": (0.0, math.pi / 2.0, 0.0),
}
MOTION_MODES = ("random", "smooth")

SlicePose = Tuple[SliceImage, RigidTransform]


@dataclass(frozen=True)
class PSF:
    sigma_inplane: float
    sigma_through: float

    def __post_init__(self) -> None:
        if not (self.sigma_inplane > 0 and self.sigma_through > 0):
            raise PipelineError(
                "invalid_config", "PSF sigmas must be positive", detail=f"{self.sigma_inplane}, {self.sigma_through}"
            )

    @classmethod
    def from_geometry(cls, thickness: float, pixel_spacing: float) -> "PSF":
        """Gaussian PSF whose FWHM equals the slice thickness through-plane and the pixel size in-plane."""
        return cls(pixel_spacing * FWHM_TO_SIGMA, thickness * FWHM_TO_SIGMA)


@dataclass(frozen=True)
class ReconConfig:
    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing: float = 1.0
    psf: PSF = field(default_factory=lambda: PSF.from_geometry(2.0, 1.0))
    svr_iterations: int = 0
    search_rotation: float = math.radians(20.0)
    search_translation: float = 8.0
    passes: int = 3
    robust_rejection: bool = True
    min_weight_fraction: float = 0.01
    support_sigmas: float = 3.0
    chunk_size: int = 8
    threads: int = 1

    def validate(self) -> "ReconConfig":
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise PipelineError("invalid_config", "Grid dims must be three positive integers", detail=str(self.dims))
        if self.spacing <= 0:
            raise PipelineError("invalid_config", "Grid spacing must be positive", detail=str(self.spacing))
        if self.svr_iterations < 0 or self.passes < 1:
            raise PipelineError(
                "invalid_config", "svr_iterations must be >= 0 and passes >= 1",
                detail=f"{self.svr_iterations}, {self.passes}",
            )
        if self.search_rotation < 0 or self.search_translation < 0:
            raise PipelineError("invalid_config", "Search radius must not be negative")
        if self.chunk_size < 1:
            raise PipelineError("invalid_config", "Chunk size must be positive", detail=str(self.chunk_size))
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["dims"] = list(self.dims)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ReconConfig":
        known = {name: data[name] for name in cls.__dataclass_fields__ if name in data}
        if "psf" in known and isinstance(known["psf"], dict):
            known["psf"] = PSF(**known["psf"])
        if "dims" in known:
            known["dims"] = tuple(int(n) for n in known["dims"])
        return cls(**known)


@dataclass(frozen=True, eq=False)
class Reconstruction:
    volume: Volume
    coverage: np.ndarray
    weights: np.ndarray

    @property
    def covered_fraction(self) -> float:
        return float(self.coverage.mean())


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    cc: Optional[float]
    initial_cc: Optional[float]
    no_overlap: bool = False
    evaluations: int = 0


@dataclass(frozen=True)
class SVRResult:
    reconstruction: Reconstruction
    poses: Tuple[RigidTransform, ...]
    history: Tuple[Dict[str, Any], ...]


@dataclass(frozen=True)
class StackSpec:
    orientations: Tuple[str, ...] = ("axial", "coronal", "sagittal")
    slices_per_stack: int = 24
    gap: float = 2.0
    slice_size: Optional[int] = None
    pixel_spacing: Optional[float] = None

    def nominal_poses(self) -> List[RigidTransform]:
        poses = []
        for orientation in self.orientations:
            if orientation not in STACK_ROTATIONS:
                raise PipelineError("invalid_config", "Unknown stack orientation", detail=orientation)
            rotation = rotation_from_euler(*STACK_ROTATIONS[orientation])
            for k in range(self.slices_per_stack):
                offset = (k - (self.slices_per_stack - 1) / 2.0) * self.gap
                poses.append(RigidTransform(rotation, offset * rotation[:, 2]))
        return poses


@dataclass(frozen=True)
class MotionSpec:
    max_translation: float = 0.0
    max_rotation: float = 0.0
    mode: str = "random"

    def validate(self) -> "MotionSpec":
        if self.mode not in MOTION_MODES:
            raise PipelineError("invalid_config", "Unknown motion mode", detail=f"{self.mode} not in {MOTION_MODES}")
        if self.max_translation < 0 or self.max_rotation < 0:
            raise PipelineError("invalid_config", "Motion bounds must not be negative")
        return self

    @property
    def is_static(self) -> bool:
        return self.max_translation == 0 and self.max_rotation == 0


def blur_volume(v: Volume, psf: PSF) -> Volume:
    """Isotropic in-plane part of the PSF applied to the whole grid."""
    return v.with_data(ndimage.gaussian_filter(v.data, sigma=psf.sigma_inplane / v.spacing, mode="nearest"))


def through_plane_offsets(psf: PSF) -> Tuple[float, float, float]:
    # remaining through-plane spread once the isotropic blur is accounted for
    extra = math.sqrt(max(psf.sigma_through ** 2 - psf.sigma_inplane ** 2, 0.0))
    step = math.sqrt(3.0) * extra
    return (-step, 0.0, step)


def project_blurred(blurred: Volume, t: RigidTransform, l: int, spacing: float, psf: PSF) -> SliceImage:
    pixels = np.zeros((l, l))
    for offset, weight in zip(through_plane_offsets(psf), GAUSS_HERMITE_WEIGHTS):
        pixels += weight * sample_points(blurred, slice_world_points(t, l, spacing, offset))
    return SliceImage(pixels, spacing)


def forward_project(v: Volume, t: RigidTransform, l: int, spacing: float, psf: PSF) -> SliceImage:
    """Simulated acquisition of one slice: PSF blur, then sampling on the posed plane."""
    return project_blurred(blur_volume(v, psf), t, l, spacing, psf)


def _offset_lattice(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    grid = np.stack(np.meshgrid(span, span, span, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


def _splat_chunk(chunk: Sequence[SlicePose], cfg: ReconConfig) -> Tuple[np.ndarray, np.ndarray]:
    dims = np.asarray(cfg.dims)
    n_voxels = int(np.prod(dims))
    centers = (dims - 1) / 2.0
    sigma_in, sigma_th = cfg.psf.sigma_inplane, cfg.psf.sigma_through
    radius = int(math.ceil(cfg.support_sigmas * max(sigma_in, sigma_th) / cfg.spacing))
    offsets = _offset_lattice(radius)
    weights = np.zeros(n_voxels)
    sums = np.zeros(n_voxels)
    for image, t in chunk:
        points = slice_world_points(t, image.l, image.spacing).reshape(-1, 3)
        values = image.pixels.ravel()
        continuous = points / cfg.spacing + centers
        index = np.rint(continuous).astype(np.int64)[:, None, :] + offsets[None, :, :]
        inside = np.all((index >= 0) & (index < dims), axis=-1)
        # voxel-minus-pixel displacement expressed in the slice frame
        local = ((index - continuous[:, None, :]) * cfg.spacing) @ t.rotation
        q = (local[..., 0] ** 2 + local[..., 1] ** 2) / sigma_in ** 2 + local[..., 2] ** 2 / sigma_th ** 2
        w = np.exp(-0.5 * q)
        keep = inside & (w >= WEIGHT_FLOOR)
        flat = np.ravel_multi_index(tuple(index[keep].T), tuple(dims))
        weights += np.bincount(flat, weights=w[keep], minlength=n_voxels)
        sums += np.bincount(flat, weights=(w * values[:, None])[keep], minlength=n_voxels)
    return weights, sums


def splat_gaussian(slices: Sequence[SlicePose], cfg: ReconConfig) -> Reconstruction:
    """PSF-weighted average of slice pixels on the reconstruction grid.

    Partial grids are accumulated per fixed-size chunk of slices and summed in
    chunk order, so the result does not depend on the thread count.
    """
    cfg.validate()
    slices = list(slices)
    if not slices:
        raise PipelineError("empty_input", "Reconstruction needs at least one slice")
    n_voxels = int(np.prod(cfg.dims))
    weights = np.zeros(n_voxels)
    sums = np.zeros(n_voxels)
    chunks = chunked(slices, cfg.chunk_size)
    for group in chunked(chunks, max(1, cfg.threads)):
        for chunk_weights, chunk_sums in run_ordered(lambda c: _splat_chunk(c, cfg), group, cfg.threads):
            weights += chunk_weights
            sums += chunk_sums

    weights = weights.reshape(cfg.dims)
    sums = sums.reshape(cfg.dims)
    coverage = weights >= cfg.min_weight_fraction
    data = np.zeros(cfg.dims)
    data[coverage] = sums[coverage] / weights[coverage]
    coverage.setflags(write=False)
    weights.setflags(write=False)
    log_event("splat_done", slices=len(slices), covered=f"{coverage.mean():.4f}")
    return Reconstruction(Volume(data, cfg.spacing), coverage, weights)


def _slice_delta(params: np.ndarray) -> RigidTransform:
    return RigidTransform(so3_exp(params[:3]), params[3:])


def _safe_cc(image: SliceImage, projection: SliceImage) -> Optional[float]:
    try:
        return cross_correlation(image, projection)
    except PipelineError:
        return None


def register_slice_to_volume(
    img: SliceImage,
    init: RigidTransform,
    v: Volume,
    cfg: ReconConfig,
    blurred: Optional[Volume] = None,
) -> RegistrationResult:
    """Maximize CC between the slice and its forward projection around init.

    Candidates are init o delta with delta a slice-frame rotation vector and
    translation. Each pass walks every coordinate with a fixed step while CC
    strictly improves; steps halve between passes and stay inside the radius.
    """
    blurred = blur_volume(v, cfg.psf) if blurred is None else blurred
    evaluations = 0

    def score(params: np.ndarray) -> Optional[float]:
        nonlocal evaluations
        evaluations += 1
        candidate = compose(init, _slice_delta(params))
        return _safe_cc(img, project_blurred(blurred, candidate, img.l, img.spacing, cfg.psf))

    if np.ptp(img.pixels) == 0:
        return RegistrationResult(init, None, None, no_overlap=True)

    params = np.zeros(6)
    best = score(params)
    initial = best
    radii = np.array([cfg.search_rotation] * 3 + [cfg.search_translation] * 3)
    for level in range(1, cfg.passes + 1):
        steps = radii / (2.0 ** level)
        for axis in range(6):
            if steps[axis] == 0:
                continue
            for direction in (1.0, -1.0):
                moved = False
                while True:
                    trial = params.copy()
                    trial[axis] += direction * steps[axis]
                    if abs(trial[axis]) > radii[axis] + 1e-12:
                        break
                    value = score(trial)
                    if value is None or (best is not None and value <= best):
                        break
                    params, best, moved = trial, value, True
                if moved:
                    break

    if best is None:
        return RegistrationResult(init, None, None, no_overlap=True, evaluations=evaluations)
    return RegistrationResult(compose(init, _slice_delta(params)), best, initial, evaluations=evaluations)


def slice_volume_cc(
    slices: Sequence[SliceImage],
    poses: Sequence[RigidTransform],
    v: Volume,
    cfg: ReconConfig,
    blurred: Optional[Volume] = None,
) -> List[Optional[float]]:
    blurred = blur_volume(v, cfg.psf) if blurred is None else blurred
    return run_ordered(
        lambda pair: _safe_cc(pair[0], project_blurred(blurred, pair[1], pair[0].l, pair[0].spacing, cfg.psf)),
        list(zip(slices, poses)),
        cfg.threads,
    )


def _mean_cc(values: Sequence[Optional[float]]) -> float:
    usable = [value for value in values if value is not None]
    return float(np.mean(usable)) if usable else -math.inf


def _robust_inliers(ccs: Sequence[Optional[float]]) -> np.ndarray:
    """Slices with undefined CC, or CC below the median and outside 3 scaled MADs, are left out."""
    defined = np.array([value is not None for value in ccs])
    inliers = defined.copy()
    if defined.sum() >= 3:
        values = np.array([value for value in ccs if value is not None])
        low = mad_outlier_mask(values) & (values < np.median(values))
        inliers[np.flatnonzero(defined)[low]] = False
    return inliers


def svr_refine(
    slices: Sequence[SliceImage],
    init_poses: Sequence[RigidTransform],
    cfg: ReconConfig,
) -> SVRResult:
    cfg.validate()
    slices = list(slices)
    poses = list(init_poses)
    if len(slices) != len(poses):
        raise PipelineError("invalid_config", "Slices and poses differ in count", detail=f"{len(slices)} != {len(poses)}")
    recon = splat_gaussian(list(zip(slices, poses)), cfg)
    history: List[Dict[str, Any]] = []
    if cfg.svr_iterations == 0:
        return SVRResult(recon, tuple(poses), tuple(history))

    current_cc = _mean_cc(slice_volume_cc(slices, poses, recon.volume, cfg))
    history.append({"round": 0, "mean_cc": current_cc, "rejected": 0, "accepted": True})
    for round_index in range(1, cfg.svr_iterations + 1):
        blurred = blur_volume(recon.volume, cfg.psf)
        results = run_ordered(
            lambda pair: register_slice_to_volume(pair[0], pair[1], recon.volume, cfg, blurred),
            list(zip(slices, poses)),
            cfg.threads,
        )
        new_poses = [result.transform for result in results]
        ccs = [result.cc for result in results]
        inliers = _robust_inliers(ccs) if cfg.robust_rejection else np.array([cc is not None for cc in ccs])
        kept = [(image, pose) for image, pose, keep in zip(slices, new_poses, inliers) if keep]
        if not kept:
            history.append({"round": round_index, "mean_cc": None, "rejected": len(slices), "accepted": False})
            break
        candidate = splat_gaussian(kept, cfg)
        candidate_cc = _mean_cc(slice_volume_cc(slices, new_poses, candidate.volume, cfg))
        accepted = candidate_cc >= current_cc - CC_TOLERANCE
        history.append({
            "round": round_index,
            "mean_cc": candidate_cc,
            "rejected": int(len(slices) - inliers.sum()),
            "accepted": bool(accepted),
        })
        log_event("svr_round", round=round_index, mean_cc=candidate_cc, accepted=accepted)
        if not accepted:
            break
        recon, poses, current_cc = candidate, new_poses, candidate_cc
    return SVRResult(recon, tuple(poses), tuple(history))


def _random_motion(rng: np.random.Generator, max_translation: float, max_rotation: float) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_rotation)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    shift = rng.uniform(0.0, max_translation)
    return RigidTransform(so3_exp(axis * angle), direction * shift)


def perturb_poses(
    poses: Sequence[RigidTransform],
    max_translation: float,
    max_rotation: float,
    seed: int,
) -> List[RigidTransform]:
    """World-frame random perturbations delta o pose with bounded angle and shift."""
    rng = np.random.default_rng(seed)
    return [compose(_random_motion(rng, max_translation, max_rotation), pose) for pose in poses]


def _smooth_motion(
    rng: np.random.Generator, n: int, max_translation: float, max_rotation: float
) -> List[RigidTransform]:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    cycles = rng.uniform(0.5, 1.5)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    motions = []
    for k in range(n):
        s = math.sin(2.0 * math.pi * cycles * k / max(n, 1) + phase)
        motions.append(RigidTransform(so3_exp(axis * max_rotation * s), direction * max_translation * s))
    return motions


def corrupt_stacks(
    v: Volume,
    stack_spec: StackSpec,
    motion_spec: MotionSpec,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> List[SlicePose]:
    """Motion-corrupted slice stacks with their ground-truth poses (gt = delta o nominal)."""
    motion_spec.validate()
    rng = np.random.default_rng(seed)
    l = int(stack_spec.slice_size or max(v.dims))
    spacing = float(stack_spec.pixel_spacing or v.spacing)
    nominal = stack_spec.nominal_poses()

    if motion_spec.is_static:
        truths = nominal
    elif motion_spec.mode == "random":
        truths = [compose(_random_motion(rng, motion_spec.max_translation, motion_spec.max_rotation), pose) for pose in nominal]
    else:
        truths = []
        per_stack = stack_spec.slices_per_stack
        for start in range(0, len(nominal), per_stack):
            stack = nominal[start:start + per_stack]
            motions = _smooth_motion(rng, len(stack), motion_spec.max_translation, motion_spec.max_rotation)
            truths.extend(compose(delta, pose) for delta, pose in zip(motions, stack))

    slices: List[SlicePose] = []
    for pose in truths:
        image = extract_slice(v, pose, l, spacing)
        if noise_sigma > 0:
            image = SliceImage(image.pixels + rng.normal(0.0, noise_sigma, size=image.pixels.shape), spacing)
        slices.append((image, pose))
    log_event("stacks_corrupted", slices=len(slices), mode=motion_spec.mode, noise_sigma=noise_sigma)
    return slices


def psnr_over_mask(recon: Volume, reference: Volume, mask: np.ndarray, max_i: float = 255.0) -> float:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != recon.dims or recon.dims != reference.dims:
        raise PipelineError("shape_mismatch", "Volumes and mask must share dims", detail=f"{recon.dims} vs {reference.dims}")
    if not mask.any():
        raise PipelineError("empty_input", "PSNR mask selects no voxels")
    return psnr(recon.data[mask], reference.data[mask], max_i)
