"""Volume and tissue-mask containers, raw file I/O, order statistics.

File format
-----------
A volume on disk is a pair of files sharing a base name: ``<name>.json``
(the sidecar) and ``<name>.raw`` (the payload). The sidecar records
``dims`` as ``[nx, ny, nz]``, ``spacing_mm`` as ``[sx, sy, sz]``, the
payload ``dtype`` (``"f32le"`` for intensity volumes, ``"u8"`` for label
masks) and the voxel ``order``, which is always ``"x-fastest"``: the
flat payload index of voxel (x, y, z) is ``x + nx * (y + ny * z)``.

In memory that layout corresponds to a C-contiguous array of shape
``(nz, ny, nx)`` indexed ``data[z, y, x]``. All modules in this package
use that indexing convention. The y axis is the anterior-posterior
axis with y = 0 at the anterior (breast side).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    MaskError,
    MissingInputError,
    NonFiniteDataError,
    PayloadSizeError,
    UnsupportedDtypeError,
    ValidationError,
    VolumeFormatError,
)
from .util import atomic_write_bytes, atomic_write_json, read_json

VOLUME_DTYPE = "f32le"
MASK_DTYPE = "u8"
VOXEL_ORDER = "x-fastest"

# Tissue label codes used in masks. Background covers anything that is
# none of the named tissues.
BACKGROUND = 0
AIR = 1
FAT = 2
DENSE = 3
HEART = 4
TUMOR = 5

LABEL_NAMES = {
    BACKGROUND: "background",
    AIR: "air",
    FAT: "fat",
    DENSE: "dense",
    HEART: "heart",
    TUMOR: "tumor",
}
MAX_LABEL = TUMOR


def _check_spacing(spacing_mm) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing_mm)
    if len(spacing) != 3 or any(s <= 0 or not math.isfinite(s) for s in spacing):
        raise ValidationError(f"spacing must be 3 positive finite values, got {spacing_mm}")
    return spacing


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with physical voxel spacing.

    ``data`` holds float32 values in a C-contiguous ``(nz, ny, nx)``
    array; the constructor takes ownership and freezes it. All values
    must be finite.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float]
    modality_tag: str = ""

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise VolumeFormatError(f"volume data must be 3D and non-empty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteDataError("volume contains NaN or infinite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        """Voxel counts per axis as (nx, ny, nz)."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def n_voxels(self) -> int:
        return self.data.size

    @classmethod
    def from_flat(cls, flat: np.ndarray, dims, spacing_mm, modality_tag: str = "") -> "Volume":
        nx, ny, nz = (int(d) for d in dims)
        arr = np.asarray(flat, dtype=np.float32).reshape(nz, ny, nx)
        return cls(arr, spacing_mm, modality_tag)


@dataclass(frozen=True)
class TissueMask:
    """Integer tissue labels on the same grid convention as Volume."""

    labels: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        arr = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise MaskError(f"mask labels must be 3D and non-empty, got shape {arr.shape}")
        bad = arr > MAX_LABEL
        if bad.any():
            raise MaskError(f"illegal label value {int(arr[bad][0])} (max allowed {MAX_LABEL})")
        arr.flags.writeable = False
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.labels.shape
        return (nx, ny, nz)

    def tissue(self, label: int) -> np.ndarray:
        """Boolean voxel set for one label code."""
        return self.labels == label

    def counts(self) -> dict[str, int]:
        out = {}
        for code, name in LABEL_NAMES.items():
            out[name] = int(np.count_nonzero(self.labels == code))
        return out


def base_path(path: Path | str) -> Path:
    """Strip a trailing .json or .raw so either file names the volume."""
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        return path.with_suffix("")
    return path


def _load_pair(path: Path | str, expected_dtype: str):
    base = base_path(path)
    sidecar_path = base.with_suffix(".json")
    payload_path = base.with_suffix(".raw")
    for p in (sidecar_path, payload_path):
        if not p.exists():
            raise MissingInputError("volume file not found", path=p)
    try:
        with open(sidecar_path, "r", encoding="utf-8") as handle:
            sidecar = json.load(handle)
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"sidecar is not valid JSON: {exc}", path=sidecar_path) from exc

    dims = sidecar.get("dims")
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or any(not isinstance(d, int) or d < 1 for d in dims)
    ):
        raise VolumeFormatError(f"sidecar dims must be 3 positive integers, got {dims!r}", path=sidecar_path)
    spacing = sidecar.get("spacing_mm")
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise VolumeFormatError(f"sidecar spacing_mm must have 3 entries, got {spacing!r}", path=sidecar_path)
    dtype = sidecar.get("dtype")
    if dtype != expected_dtype:
        raise UnsupportedDtypeError(
            f"unsupported dtype {dtype!r}, expected {expected_dtype!r}", path=sidecar_path
        )
    order = sidecar.get("order", VOXEL_ORDER)
    if order != VOXEL_ORDER:
        raise VolumeFormatError(f"unsupported voxel order {order!r}", path=sidecar_path)

    itemsize = 4 if dtype == VOLUME_DTYPE else 1
    nx, ny, nz = dims
    expected_bytes = nx * ny * nz * itemsize
    payload = payload_path.read_bytes()
    if len(payload) != expected_bytes:
        raise PayloadSizeError(
            f"payload is {len(payload)} bytes, dims {dims} require {expected_bytes}",
            path=payload_path,
        )
    np_dtype = "<f4" if dtype == VOLUME_DTYPE else np.uint8
    flat = np.frombuffer(payload, dtype=np_dtype)
    return sidecar, flat, dims, spacing, payload_path


def load_volume(path: Path | str) -> Volume:
    """Load an intensity volume from its sidecar/payload pair."""
    sidecar, flat, dims, spacing, payload_path = _load_pair(path, VOLUME_DTYPE)
    if not np.isfinite(flat).all():
        raise NonFiniteDataError("payload contains NaN or infinite values", path=payload_path)
    tag = str(sidecar.get("modality_tag", ""))
    return Volume.from_flat(flat, dims, spacing, tag)


def save_volume(volume: Volume, path: Path | str) -> None:
    """Write sidecar and payload; both writes are atomic."""
    base = base_path(path)
    nx, ny, nz = volume.dims
    sidecar = {
        "dims": [nx, ny, nz],
        "spacing_mm": list(volume.spacing_mm),
        "dtype": VOLUME_DTYPE,
        "order": VOXEL_ORDER,
        "modality_tag": volume.modality_tag,
    }
    atomic_write_bytes(base.with_suffix(".raw"), volume.data.tobytes())
    atomic_write_json(base.with_suffix(".json"), sidecar)


def load_mask(path: Path | str) -> TissueMask:
    _, flat, dims, spacing, payload_path = _load_pair(path, MASK_DTYPE)
    nx, ny, nz = dims
    arr = flat.reshape(nz, ny, nx)
    try:
        return TissueMask(arr, tuple(spacing))
    except MaskError as exc:
        raise MaskError(str(exc), path=payload_path) from exc


def save_mask(mask: TissueMask, path: Path | str) -> None:
    base = base_path(path)
    nx, ny, nz = mask.dims
    sidecar = {
        "dims": [nx, ny, nz],
        "spacing_mm": list(mask.spacing_mm),
        "dtype": MASK_DTYPE,
        "order": VOXEL_ORDER,
    }
    atomic_write_bytes(base.with_suffix(".raw"), mask.labels.tobytes())
    atomic_write_json(base.with_suffix(".json"), sidecar)


def nearest_rank_index(n: int, q: float) -> int:
    """0-based index of the q-th percentile in an ascending sort of n values."""
    if not 0.0 <= q <= 100.0:
        raise ValidationError(f"percentile q must be in [0, 100], got {q}")
    if n < 1:
        raise ValidationError("percentile of an empty selection")
    return max(math.ceil(q * n / 100.0) - 1, 0)


def percentile(volume: Volume | np.ndarray, q: float, mask: np.ndarray | None = None) -> float:
    """Nearest-rank percentile of a volume, optionally restricted to a mask.

    The result is always an element of the selected multiset: the value
    at 0-based index ceil(q/100 * n) - 1 of the ascending sort, with
    q = 0 mapping to the minimum.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if mask is not None:
        if mask.shape != data.shape:
            raise ValidationError(
                f"mask shape {mask.shape} does not match data shape {data.shape}"
            )
        values = data[mask]
    else:
        values = data.ravel()
    if values.size == 0:
        raise ValidationError("percentile of an empty selection")
    k = nearest_rank_index(values.size, q)
    return float(np.partition(values, k)[k])


def median_filter(volume: Volume, radius: int) -> Volume:
    """Median filter with a cubic window of side 2*radius + 1.

    Windows are clipped at the volume boundary rather than padded, and
    the median of a window of n values is the nearest-rank median (the
    value at index ceil(n/2) - 1 of the ascending sort), so the output
    is always drawn from values actually present in the window.
    """
    if radius < 1:
        raise ValidationError(f"filter radius must be >= 1, got {radius}")
    data = volume.data
    nz, ny, nx = data.shape
    side = 2 * radius + 1
    window = side ** 3

    padded = np.full((nz + 2 * radius, ny + 2 * radius, nx + 2 * radius), np.nan, dtype=np.float32)
    padded[radius : radius + nz, radius : radius + ny, radius : radius + nx] = data
    out = np.empty_like(data)

    # Slab size chosen to keep the sorted window copy around 128 MB.
    per_slice = (ny + 2 * radius) * (nx + 2 * radius) * window * 4 * 2
    chunk = max(1, int(128e6 / per_slice)) if per_slice else nz
    for z0 in range(0, nz, chunk):
        z1 = min(z0 + chunk, nz)
        block = padded[z0 : z1 + 2 * radius, :, :]
        win = sliding_window_view(block, (side, side, side))
        flat = win.reshape(win.shape[0], win.shape[1], win.shape[2], window)
        ordered = np.sort(flat, axis=-1)  # NaN sorts to the end
        n_valid = window - np.count_nonzero(np.isnan(ordered), axis=-1)
        k = (n_valid + 1) // 2 - 1
        out[z0:z1] = np.take_along_axis(ordered, k[..., None], axis=-1)[..., 0]
    return Volume(out, volume.spacing_mm, volume.modality_tag)
