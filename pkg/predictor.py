"""
Pose predictor contract, the dictionary (template matching) baseline,
Monte Carlo aggregation on SE(3) and confidence-based slice rejection.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np
from PIL import Image

from database import Base, get_db, get_engine, model_store_url
from liegroup import frechet_mean
from models import DictionaryEntryRecord, DictionaryModelRecord, get_model_record
from pipeline_utils import PipelineError, log_event, run_ordered
from sampler import SamplingConfig, iter_slice_samples, sampling_transforms
from se3core import RigidTransform
from volume import SliceImage, Volume

DEFAULT_DESCRIPTOR_SIZE = 32
DEFAULT_TOP_K = 10
DEFAULT_TEMPERATURE = 0.05
DEFAULT_MC_SAMPLES = 100
DEFAULT_VARIANCE_THRESHOLD = 10.0
SIMILARITIES = ("cc", "ssim")
POSE_KEY_DECIMALS = 9


@runtime_checkable
class PosePredictor(Protocol):
    def predict(self, image: SliceImage, stochastic: bool = False, rng_seed: Optional[int] = None) -> RigidTransform:
        ...


@dataclass(frozen=True, eq=False)
class DictionaryModel:
    descriptors: np.ndarray
    transforms: Tuple[RigidTransform, ...]
    slice_ids: Tuple[str, ...]
    descriptor_size: int
    similarity: str = "cc"
    slice_size: int = 64
    slice_spacing: float = 1.0
    anchor_scale: float = 64.0
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        descriptors = np.array(self.descriptors, dtype=np.float64)
        if descriptors.ndim != 2 or descriptors.shape[0] == 0:
            raise PipelineError("empty_dataset", "Dictionary has no entries")
        if descriptors.shape[1] != self.descriptor_size * self.descriptor_size:
            raise PipelineError(
                "invalid_config", "Descriptor length does not match descriptor size",
                detail=f"{descriptors.shape[1]} != {self.descriptor_size}^2",
            )
        if len(self.transforms) != descriptors.shape[0] or len(self.slice_ids) != descriptors.shape[0]:
            raise PipelineError("invalid_config", "Dictionary entries and poses differ in count")
        if self.similarity not in SIMILARITIES:
            raise PipelineError("invalid_config", "Unknown similarity", detail=str(self.similarity))
        descriptors.setflags(write=False)
        object.__setattr__(self, "descriptors", descriptors)
        object.__setattr__(self, "transforms", tuple(self.transforms))
        object.__setattr__(self, "slice_ids", tuple(self.slice_ids))

    def __len__(self) -> int:
        return int(self.descriptors.shape[0])


@dataclass(frozen=True)
class PredictionSet:
    samples: Tuple[RigidTransform, ...]
    mean: Optional[RigidTransform]
    variance: float
    accepted: bool
    status: str = "accepted"
    iterations: int = 0


def image_descriptor(image: SliceImage, size: int) -> np.ndarray:
    """Box-filtered downsample of the slice to size x size, flattened."""
    if size < 1:
        raise PipelineError("invalid_config", "Descriptor size must be at least 1", detail=str(size))
    pixels = np.ascontiguousarray(image.pixels, dtype=np.float32)
    resized = Image.fromarray(pixels).resize((size, size), Image.Resampling.BOX)
    return np.asarray(resized, dtype=np.float64).ravel()


def _unit_rows(descriptors: np.ndarray) -> np.ndarray:
    centered = descriptors - descriptors.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    return np.divide(centered, norms, out=np.zeros_like(centered), where=norms > 0)


def pose_key(t: RigidTransform) -> bytes:
    values = np.concatenate([t.rotation.ravel(), t.translation])
    # + 0.0 folds -0.0 into 0.0
    return (np.round(values, POSE_KEY_DECIMALS) + 0.0).tobytes()


def canonicalize_poses(transforms: Sequence[RigidTransform]) -> List[RigidTransform]:
    """Replace numerically identical poses by their first occurrence.

    Distinct Euler triples can describe the same rotation (gimbal lock); sharing
    one object keeps their slices and descriptors bitwise identical.
    """
    first: Dict[bytes, RigidTransform] = {}
    return [first.setdefault(pose_key(t), t) for t in transforms]


def build_dictionary(
    atlas: Volume,
    cfg: SamplingConfig,
    descriptor_size: int = DEFAULT_DESCRIPTOR_SIZE,
    similarity: str = "cc",
    threads: int = 1,
) -> DictionaryModel:
    l, spacing, scale = cfg.slice_geometry(atlas)
    transforms = canonicalize_poses(sampling_transforms(cfg))
    descriptors: List[np.ndarray] = []
    poses: List[RigidTransform] = []
    ids: List[str] = []
    for sample in iter_slice_samples(atlas, cfg, transforms, threads):
        descriptors.append(image_descriptor(sample.image, descriptor_size))
        poses.append(sample.transform)
        ids.append(sample.id)
    if not descriptors:
        raise PipelineError("empty_dataset", "No slice passed the content filter", detail=f"min_content={cfg.min_content}")
    model = DictionaryModel(
        descriptors=np.stack(descriptors),
        transforms=tuple(poses),
        slice_ids=tuple(ids),
        descriptor_size=descriptor_size,
        similarity=similarity,
        slice_size=l,
        slice_spacing=spacing,
        anchor_scale=scale,
        config=cfg.to_dict(),
    )
    log_event("dictionary_built", entries=len(model), scheme=cfg.scheme, descriptor_size=descriptor_size)
    return model


class DictionaryPredictor:
    """Template-matching stand-in for a learned pose regressor."""

    def __init__(
        self,
        model: DictionaryModel,
        top_k: int = DEFAULT_TOP_K,
        temperature: float = DEFAULT_TEMPERATURE,
        max_i: float = 255.0,
    ):
        if top_k < 1 or temperature <= 0:
            raise PipelineError("invalid_config", "top_k must be >= 1 and temperature > 0", detail=f"{top_k}, {temperature}")
        self.model = model
        self.top_k = top_k
        self.temperature = temperature
        self.max_i = max_i
        if model.similarity == "cc":
            self._unit = _unit_rows(model.descriptors)
        else:
            self._means = model.descriptors.mean(axis=1)
            self._vars = model.descriptors.var(axis=1)

    def similarities(self, image: SliceImage) -> np.ndarray:
        if np.ptp(image.pixels) == 0:
            raise PipelineError("degenerate_input", "Constant slice has no usable similarity", detail=f"value={image.pixels.flat[0]:.6g}")
        query = image_descriptor(image, self.model.descriptor_size)
        if self.model.similarity == "cc":
            centered = query - query.mean()
            norm = np.linalg.norm(centered)
            if norm == 0.0:
                raise PipelineError("degenerate_input", "Slice is constant at descriptor resolution")
            return self._unit @ (centered / norm)
        c1 = (0.01 * self.max_i) ** 2
        c2 = (0.03 * self.max_i) ** 2
        mu = query.mean()
        cov = (self.model.descriptors - self._means[:, None]) @ (query - mu) / query.size
        luminance = (2.0 * self._means * mu + c1) / (self._means ** 2 + mu * mu + c1)
        structure = (2.0 * cov + c2) / (self._vars + query.var() + c2)
        return luminance * structure

    def predict(self, image: SliceImage, stochastic: bool = False, rng_seed: Optional[int] = None) -> RigidTransform:
        scores = self.similarities(image)
        if not stochastic:
            return self.model.transforms[int(np.argmax(scores))]
        order = np.argsort(-scores, kind="stable")[: self.top_k]
        logits = (scores[order] - scores[order[0]]) / self.temperature
        weights = np.exp(logits)
        rng = np.random.default_rng(rng_seed)
        pick = rng.choice(order.size, p=weights / weights.sum())
        return self.model.transforms[int(order[pick])]


def dictionary_predict(
    m: DictionaryModel, img: SliceImage, stochastic: bool = False, rng_seed: Optional[int] = None
) -> RigidTransform:
    return DictionaryPredictor(m).predict(img, stochastic, rng_seed)


def mc_aggregate(
    p: PosePredictor,
    img: SliceImage,
    n: int = DEFAULT_MC_SAMPLES,
    threshold: float = DEFAULT_VARIANCE_THRESHOLD,
    seed: int = 0,
    threads: int = 1,
    w_rot: Optional[float] = None,
    w_trans: Optional[float] = None,
) -> PredictionSet:
    """Run n stochastic predictions and summarize them by their Frechet mean and variance."""
    if n < 1:
        raise PipelineError("invalid_config", "Monte Carlo sample count must be at least 1", detail=str(n))
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]
    try:
        samples = run_ordered(lambda s: p.predict(img, True, s), seeds, threads)
    except PipelineError as exc:
        if exc.code != "degenerate_input":
            raise
        return PredictionSet((), None, math.inf, False, status="degenerate_input")

    stats = frechet_mean(samples, w_rot=w_rot, w_trans=w_trans)
    if not stats.converged:
        return PredictionSet(tuple(samples), stats.mean, stats.variance, False, "not_converged", stats.iterations)
    accepted = stats.variance <= threshold
    status = "accepted" if accepted else "rejected_variance"
    return PredictionSet(tuple(samples), stats.mean, stats.variance, accepted, status, stats.iterations)


def confidence_filter(
    sets: Sequence[PredictionSet],
    threshold: float = DEFAULT_VARIANCE_THRESHOLD,
) -> Tuple[List[PredictionSet], List[PredictionSet]]:
    kept: List[PredictionSet] = []
    discarded: List[PredictionSet] = []
    for prediction in sets:
        usable = prediction.status not in ("not_converged", "degenerate_input") and math.isfinite(prediction.variance)
        (kept if usable and prediction.variance <= threshold else discarded).append(prediction)
    return kept, discarded


def save_dictionary(model: DictionaryModel, path: str, name: str = "default") -> None:
    url = model_store_url(path)
    engine = get_engine(url)
    try:
        Base.metadata.create_all(bind=engine)
    finally:
        engine.dispose()
    with get_db(url) as db:
        existing = get_model_record(db, name)
        if existing is not None:
            db.delete(existing)
            db.flush()
        record = DictionaryModelRecord(
            name=name,
            descriptor_size=model.descriptor_size,
            similarity=model.similarity,
            slice_size=model.slice_size,
            slice_spacing=model.slice_spacing,
            anchor_scale=model.anchor_scale,
            entry_count=len(model),
            config_json=json.dumps(model.config, sort_keys=True),
        )
        record.entries = [
            DictionaryEntryRecord(
                position=position,
                slice_id=slice_id,
                rotation=np.asarray(t.rotation, dtype="<f8").tobytes(),
                translation=np.asarray(t.translation, dtype="<f8").tobytes(),
                descriptor=np.asarray(descriptor, dtype="<f8").tobytes(),
            )
            for position, (slice_id, t, descriptor) in enumerate(zip(model.slice_ids, model.transforms, model.descriptors))
        ]
        db.add(record)
        db.commit()
    log_event("dictionary_saved", path=path, name=name, entries=len(model))


def load_dictionary(path: str, name: str = "default") -> DictionaryModel:
    with get_db(model_store_url(path)) as db:
        try:
            record = get_model_record(db, name)
        except Exception as exc:
            raise PipelineError("model_store", "Unable to read model store", detail=f"{path}: {exc}") from exc
        if record is None:
            raise PipelineError("model_store", "Dictionary model not found", detail=f"{path}: {name}")
        entries = list(record.entries)
        transforms = tuple(
            RigidTransform(
                np.frombuffer(entry.rotation, dtype="<f8").reshape(3, 3),
                np.frombuffer(entry.translation, dtype="<f8"),
            )
            for entry in entries
        )
        model = DictionaryModel(
            descriptors=np.stack([np.frombuffer(entry.descriptor, dtype="<f8") for entry in entries]),
            transforms=transforms,
            slice_ids=tuple(entry.slice_id for entry in entries),
            descriptor_size=record.descriptor_size,
            similarity=record.similarity,
            slice_size=record.slice_size,
            slice_spacing=record.slice_spacing,
            anchor_scale=record.anchor_scale,
            config=json.loads(record.config_json or "{}"),
        )
    log_event("dictionary_loaded", path=path, name=name, entries=len(model))
    return model
