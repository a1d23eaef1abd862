"""
Volume and slice containers, intensity pre-processing, oblique slice
extraction and the SPV1 file format.

World coordinates are in mm with the origin at the grid center:
voxel index i maps to x = (i - (n - 1) / 2) * spacing on each axis.
"""

import math
import os
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from pipeline_utils import PipelineError, log_event
from se3core import RigidTransform, invert

SPV_MAGIC = "SPV1"
SPV_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: float
    dtype: str = "f32"

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise PipelineError("invalid_volume", "Volume data must be a non-empty 3D grid", detail=str(data.shape))
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise PipelineError("invalid_volume", "Voxel spacing must be positive", detail=str(self.spacing))
        if not np.all(np.isfinite(data)):
            raise PipelineError("invalid_volume", "Volume contains non-finite intensities")
        if self.dtype not in SPV_DTYPES:
            raise PipelineError("unsupported_dtype", "Unsupported scalar type", detail=str(self.dtype))
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent_mm(self) -> float:
        """Side length of the largest axis in mm."""
        return max(self.dims) * self.spacing

    def with_data(self, data: np.ndarray, dtype: Optional[str] = None) -> "Volume":
        return Volume(data, self.spacing, dtype or self.dtype)


@dataclass(frozen=True, eq=False)
class SliceImage:
    pixels: np.ndarray
    spacing: float

    def __post_init__(self) -> None:
        pixels = np.array(self.pixels, dtype=np.float64)
        if pixels.ndim != 2 or pixels.shape[0] != pixels.shape[1] or pixels.shape[0] < 1:
            raise PipelineError("invalid_slice", "Slice must be a non-empty square image", detail=str(pixels.shape))
        if not (self.spacing > 0):
            raise PipelineError("invalid_slice", "Pixel spacing must be positive", detail=str(self.spacing))
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def l(self) -> int:
        return int(self.pixels.shape[0])


def world_to_index(v: Volume, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    centers = (np.asarray(v.dims, dtype=np.float64) - 1.0) / 2.0
    return points / v.spacing + centers


def grid_world_points(v: Volume) -> np.ndarray:
    axes = [(np.arange(n) - (n - 1) / 2.0) * v.spacing for n in v.dims]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    return np.stack([xs, ys, zs], axis=-1)


def sample_points(v: Volume, points: np.ndarray) -> np.ndarray:
    """Trilinear samples at world points of shape (..., 3); zero outside the grid."""
    points = np.asarray(points, dtype=np.float64)
    shape = points.shape[:-1]
    coords = world_to_index(v, points.reshape(-1, 3)).T
    values = ndimage.map_coordinates(v.data, coords, order=1, mode="constant", cval=0.0)
    return values.reshape(shape)


def trilinear_sample(v: Volume, p: Sequence[float]) -> float:
    return float(sample_points(v, np.asarray(p, dtype=np.float64)[None, :])[0])


def slice_plane_coordinates(l: int, spacing: float) -> np.ndarray:
    """In-plane (u, w) mm coordinates of every pixel, shape (l, l, 2), centered on the slice."""
    axis = (np.arange(l) - (l - 1) / 2.0) * spacing
    us, ws = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([us, ws], axis=-1)


def slice_world_points(t: RigidTransform, l: int, spacing: float, offset: float = 0.0) -> np.ndarray:
    plane = slice_plane_coordinates(l, spacing)
    local = np.concatenate([plane, np.full(plane.shape[:-1] + (1,), float(offset))], axis=-1)
    return t.apply(local)


def extract_slice(v: Volume, t: RigidTransform, l: int, spacing: Optional[float] = None) -> SliceImage:
    spacing = v.spacing if spacing is None else float(spacing)
    return SliceImage(sample_points(v, slice_world_points(t, l, spacing)), spacing)


def resample_volume(v: Volume, g: RigidTransform) -> Volume:
    """Move the volume content by g: the result at x equals v at g^-1(x)."""
    source = invert(g).apply(grid_world_points(v))
    return v.with_data(sample_points(v, source))


def minmax_rescale(v: Volume, lo: float = 0.0, hi: float = 255.0) -> Volume:
    low, high = float(v.data.min()), float(v.data.max())
    if high <= low:
        raise PipelineError("constant_input", "Cannot rescale a constant volume", detail=f"value={low:.6g}")
    return v.with_data(lo + (v.data - low) * ((hi - lo) / (high - low)))


def zscore_normalize(v: Volume, mask: Optional[np.ndarray] = None) -> Volume:
    if mask is None:
        mask = np.ones(v.dims, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != v.dims:
        raise PipelineError("invalid_config", "Mask shape does not match volume", detail=f"{mask.shape} != {v.dims}")
    if not mask.any():
        raise PipelineError("empty_input", "Z-score mask selects no voxels")
    values = v.data[mask]
    std = float(values.std())
    if std == 0.0:
        raise PipelineError("constant_input", "Masked region has zero variance")
    out = np.zeros(v.dims)
    out[mask] = (values - values.mean()) / std
    return v.with_data(out)


def percentile_clip(v: Volume, low: float = 0.01, high: float = 0.99) -> Volume:
    """Clamp nonzero voxels to the [low, high] quantiles of the nonzero intensities."""
    if not (0.0 <= low < high <= 1.0):
        raise PipelineError("invalid_config", "Percentile bounds must satisfy 0 <= low < high <= 1", detail=f"{low}, {high}")
    nonzero = v.data != 0
    if not nonzero.any():
        return v
    lo_value, hi_value = np.quantile(v.data[nonzero], [low, high])
    out = np.array(v.data)
    out[nonzero] = np.clip(out[nonzero], lo_value, hi_value)
    return v.with_data(out)


def quantize_u8(v: Volume) -> Volume:
    return v.with_data(np.clip(np.rint(v.data), 0, 255), dtype="u8")


def quantization_snr_db(bits_in: int = 16, bits_out: int = 8) -> float:
    return 20.0 * math.log10(2.0 ** (bits_in - bits_out))


def content_fraction(img: SliceImage) -> float:
    return float(np.count_nonzero(img.pixels)) / img.pixels.size


def center_slice_content(img: SliceImage) -> Tuple[SliceImage, Tuple[float, float]]:
    """Shift the image so the bounding box of its nonzero pixels sits at the center.

    Returns the shifted image and the applied (u, w) shift in mm.
    """
    rows, cols = np.nonzero(img.pixels)
    if rows.size == 0:
        return img, (0.0, 0.0)
    center = (img.l - 1) / 2.0
    shift_i = int(round(center - (rows.min() + rows.max()) / 2.0))
    shift_j = int(round(center - (cols.min() + cols.max()) / 2.0))
    shifted = ndimage.shift(img.pixels, (shift_i, shift_j), order=0, mode="constant", cval=0.0)
    return SliceImage(shifted, img.spacing), (shift_i * img.spacing, shift_j * img.spacing)


def _encode_payload(data: np.ndarray, dtype: str) -> bytes:
    if dtype == "u8":
        data = np.clip(np.rint(data), 0, 255)
    return np.asarray(data, dtype=SPV_DTYPES[dtype]).ravel(order="F").tobytes()


def _write_spv(path: str, data: np.ndarray, spacing: float, dtype: str) -> None:
    if dtype not in SPV_DTYPES:
        raise PipelineError("unsupported_dtype", "Unsupported scalar type", detail=str(dtype))
    nx, ny, nz = data.shape
    header = "\n".join(
        [
            f"magic={SPV_MAGIC}",
            f"dims={nx},{ny},{nz}",
            f"spacing={float(spacing)!r}",
            f"dtype={dtype}",
            "byteorder=little",
        ]
    )
    try:
        with open(path, "wb") as handle:
            handle.write((header + "\n\n").encode("ascii"))
            handle.write(_encode_payload(data, dtype))
    except OSError as exc:
        raise PipelineError("unwritable_output", "Unable to write SPV1 file", detail=f"{path}: {exc}") from exc


def _parse_header(text: str) -> Dict[str, str]:
    fields: Dict[str, str] = {}
    for line in text.split("\n"):
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise PipelineError("malformed_header", "Header line is not key=value", detail=line[:80])
        fields[key.strip()] = value.strip()
    return fields


def _read_spv(path: str) -> Tuple[np.ndarray, float, str]:
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as exc:
        raise PipelineError("missing_file", "Unable to read SPV1 file", detail=f"{path}: {exc}") from exc

    end = raw.find(b"\n\n")
    if end < 0:
        raise PipelineError("malformed_header", "Header terminator not found", detail=path)
    try:
        fields = _parse_header(raw[:end].decode("ascii"))
    except UnicodeDecodeError as exc:
        raise PipelineError("malformed_header", "Header is not ASCII text", detail=path) from exc

    if fields.get("magic") != SPV_MAGIC:
        raise PipelineError("malformed_header", "Missing SPV1 magic", detail=str(fields.get("magic")))
    if fields.get("byteorder", "little") != "little":
        raise PipelineError("malformed_header", "Only little-endian payloads are supported", detail=fields["byteorder"])
    dtype = fields.get("dtype", "")
    if dtype not in SPV_DTYPES:
        raise PipelineError("unsupported_dtype", "Unsupported scalar type", detail=dtype)
    try:
        dims = tuple(int(part) for part in fields["dims"].split(","))
        spacing = float(fields["spacing"])
    except (KeyError, ValueError) as exc:
        raise PipelineError("malformed_header", "Invalid dims or spacing", detail=str(exc)) from exc
    if len(dims) != 3 or min(dims) < 1 or not spacing > 0:
        raise PipelineError("malformed_header", "Invalid dims or spacing", detail=f"dims={dims} spacing={spacing}")

    payload = raw[end + 2:]
    expected = int(np.prod(dims)) * SPV_DTYPES[dtype].itemsize
    if len(payload) != expected:
        raise PipelineError("size_mismatch", "Payload size does not match dims", detail=f"{len(payload)} != {expected}")
    data = np.frombuffer(payload, dtype=SPV_DTYPES[dtype]).reshape(dims, order="F").astype(np.float64)
    return data, spacing, dtype


def save_volume(v: Volume, path: str, dtype: Optional[str] = None) -> None:
    dtype = dtype or v.dtype
    _write_spv(path, v.data, v.spacing, dtype)
    log_event("volume_saved", path=path, dims="x".join(str(n) for n in v.dims), dtype=dtype)


def load_volume(path: str) -> Volume:
    data, spacing, dtype = _read_spv(path)
    return Volume(data, spacing, dtype)


def save_slice(img: SliceImage, path: str, dtype: str = "f32") -> None:
    _write_spv(path, img.pixels[:, :, None], img.spacing, dtype)


def load_slice(path: str) -> SliceImage:
    data, spacing, _ = _read_spv(path)
    if data.shape[2] != 1 or data.shape[0] != data.shape[1]:
        raise PipelineError("invalid_slice", "SPV1 slice must be square with nz=1", detail=str(data.shape))
    return SliceImage(data[:, :, 0], spacing)


def save_slice_png(img: SliceImage, path: str) -> None:
    """8-bit preview; rows follow the w axis so the image reads like the slice plane."""
    pixels = np.clip(np.rint(img.pixels), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(np.ascontiguousarray(pixels.T[::-1])).save(path)
    except OSError as exc:
        raise PipelineError("unwritable_output", "Unable to write PNG preview", detail=f"{os.path.basename(path)}: {exc}") from exc
