"""Classical fallback segmentation of air, breast, dense tissue and heart.

These stages are deliberately simple threshold-and-morphology
heuristics. Downstream anchor extraction only consumes order statistics
of each tissue, which tolerates moderate boundary errors, so the goal
here is robustness and determinism rather than voxel-perfect contours.

Conventions: volumes are indexed ``data[z, y, x]`` and y = 0 is the
anterior side, so the breast occupies low y and the heart sits at
higher y behind the chest-wall plane.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import SegmentationError, ValidationError
from .manifest import StudySeries
from .volume import AIR, DENSE, FAT, HEART, TUMOR, TissueMask, Volume, percentile

log = logging.getLogger(__name__)

# 26-connectivity in 3D: every voxel touching by face, edge or corner.
_CONN26 = np.ones((3, 3, 3), dtype=bool)

OTSU_BINS = 256


@dataclass
class SegmentationConfig:
    """Tunable parameters of the classical pipeline.

    air_fraction
        Fraction of the darkest voxels selected as the air tissue.
    heart_enhancement_percentile
        Percentile of the subtraction image (first post minus pre) above
        which voxels are heart candidates.
    dense_threshold_method
        Currently only "otsu" is implemented.
    dense_polarity
        "dark" means dense tissue is the lower-intensity of the two
        intensity classes inside the breast (the usual situation in
        non-fat-suppressed T1 imaging where fat is bright); "bright"
        flips the assignment for fat-suppressed acquisitions.
    min_component_voxels
        Connected components smaller than this are discarded.
    morphology_radius
        Radius of the cubic structuring element used for closing.
    """

    air_fraction: float = 0.05
    heart_enhancement_percentile: float = 99.0
    dense_threshold_method: str = "otsu"
    dense_polarity: str = "dark"
    min_component_voxels: int = 500
    morphology_radius: int = 1

    def __post_init__(self):
        if not 0.0 < self.air_fraction < 1.0:
            raise ValidationError(f"air_fraction must be in (0, 1), got {self.air_fraction}")
        if not 0.0 < self.heart_enhancement_percentile <= 100.0:
            raise ValidationError(
                f"heart_enhancement_percentile must be in (0, 100], got {self.heart_enhancement_percentile}"
            )
        if self.dense_threshold_method != "otsu":
            raise ValidationError(
                f"unknown dense_threshold_method {self.dense_threshold_method!r}"
            )
        if self.dense_polarity not in ("dark", "bright"):
            raise ValidationError(f"dense_polarity must be 'dark' or 'bright', got {self.dense_polarity!r}")
        if self.min_component_voxels < 1:
            raise ValidationError("min_component_voxels must be >= 1")
        if self.morphology_radius < 0:
            raise ValidationError("morphology_radius must be >= 0")


def otsu_upper_class(values: np.ndarray, bins: int = OTSU_BINS) -> np.ndarray | None:
    """Split values at the Otsu threshold of a fixed-bin histogram.

    Returns a boolean array marking the upper-intensity class, or None
    when the histogram is degenerate (constant input, or no split with
    two non-empty classes). Values are binned over [min, max] into
    ``bins`` equal bins and both the histogram and the class assignment
    use the same bin indices, so the split is exactly reproducible.
    """
    values = np.asarray(values)
    if values.size == 0:
        raise ValidationError("otsu split of an empty selection")
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        return None
    idx = np.floor((values.astype(np.float64) - lo) * (bins / (hi - lo))).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)

    # Between-class variance for every split "bin <= t vs bin > t",
    # with bin indices standing in for intensities (the argmax is
    # invariant under that affine substitution).
    centers = np.arange(bins, dtype=np.float64)
    w0 = np.cumsum(counts)[:-1]
    w1 = counts.sum() - w0
    m0 = np.cumsum(counts * centers)[:-1]
    m1 = (counts * centers).sum() - m0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return None
    variance = np.zeros(bins - 1)
    variance[valid] = w0[valid] * w1[valid] * (m0[valid] / w0[valid] - m1[valid] / w1[valid]) ** 2
    t = int(np.argmax(variance))
    if variance[t] <= 0:
        return None
    return idx.reshape(values.shape) > t


def segment_air(pre: Volume, config: SegmentationConfig) -> np.ndarray:
    """Select the darkest ``air_fraction`` of the pre-contrast volume.

    Ties at the threshold value are all included, so the result can be
    slightly larger than the nominal fraction; a constant volume comes
    back fully selected.
    """
    threshold = percentile(pre, config.air_fraction * 100.0)
    return pre.data <= threshold


def body_mask(pre: Volume) -> np.ndarray:
    """Voxels above the global air/tissue separation threshold.

    Uses an Otsu split of the whole volume rather than the air-fraction
    percentile: the air fraction is a prevalence convention for the air
    anchor, not a separator, and fails whenever the actual air fraction
    differs from it. Returns an all-False array when the volume has no
    separable structure.
    """
    upper = otsu_upper_class(pre.data.ravel())
    if upper is None:
        return np.zeros(pre.data.shape, dtype=bool)
    return upper.reshape(pre.data.shape)


def chest_wall_planes(body: np.ndarray) -> np.ndarray:
    """Per-slice chest-wall y coordinate.

    For each axial slice the plane is the posterior-most row whose
    body-voxel count exceeds half the slice's maximal row count; rows
    at or anterior of the plane are breast territory, rows behind it
    are heart search territory. Slices without body voxels get -1.
    """
    if body.ndim != 3:
        raise ValidationError("body mask must be 3D")
    runs = body.sum(axis=2)  # (nz, ny)
    max_run = runs.max(axis=1)
    wide = runs > (max_run[:, None] / 2.0)
    ny = body.shape[1]
    reversed_any = wide[:, ::-1]
    last = ny - 1 - np.argmax(reversed_any, axis=1)
    planes = np.where(wide.any(axis=1), last, -1)
    return planes.astype(np.int64)


def _drop_small_components(mask: np.ndarray, min_voxels: int) -> np.ndarray:
    labeled, n = ndimage.label(mask, structure=_CONN26)
    if n == 0:
        return mask
    sizes = np.bincount(labeled.ravel())
    keep = sizes >= min_voxels
    keep[0] = False
    return keep[labeled]


def segment_breast(pre: Volume, config: SegmentationConfig) -> np.ndarray:
    """Body voxels anterior of the chest-wall plane, cleaned up.

    Applies morphological closing with a cubic structuring element and
    removes connected components below ``min_component_voxels``. Raises
    SegmentationError when nothing survives.
    """
    body = body_mask(pre)
    if not body.any():
        raise SegmentationError("no body voxels above the air threshold")
    planes = chest_wall_planes(body)
    yy = np.arange(body.shape[1])[None, :, None]
    anterior = yy <= planes[:, None, None]
    candidate = body & anterior
    if config.morphology_radius > 0:
        side = 2 * config.morphology_radius + 1
        structure = np.ones((side, side, side), dtype=bool)
        candidate = ndimage.binary_closing(candidate, structure=structure)
    candidate = _drop_small_components(candidate, config.min_component_voxels)
    if not candidate.any():
        raise SegmentationError("breast segmentation produced an empty mask")
    return candidate


def segment_dense(pre: Volume, breast: np.ndarray, config: SegmentationConfig) -> np.ndarray:
    """Split breast voxels into dense and fat classes by Otsu threshold.

    Returns the dense subset; fat is the remainder of the breast. With a
    degenerate histogram the dense set is empty and a warning is logged,
    leaving the whole breast classified as fat.
    """
    if breast.shape != pre.data.shape:
        raise ValidationError("breast mask shape does not match volume")
    if not breast.any():
        raise ValidationError("dense segmentation needs a non-empty breast mask")
    values = pre.data[breast]
    upper = otsu_upper_class(values)
    dense = np.zeros(pre.data.shape, dtype=bool)
    if upper is None:
        log.warning("degenerate intensity histogram inside breast; dense set left empty")
        return dense
    selected = ~upper if config.dense_polarity == "dark" else upper
    dense[breast] = selected
    return dense


def segment_heart(
    pre: Volume, post1: Volume, body: np.ndarray, config: SegmentationConfig
) -> np.ndarray:
    """Largest strongly-enhancing component behind the chest wall.

    Candidates are body voxels whose subtraction value (first post minus
    pre) reaches the configured percentile of the whole subtraction
    image, restricted to rows behind the per-slice chest-wall plane.
    The largest 26-connected candidate component is returned; failure
    (no enhancement anywhere, or a component below the size floor) is
    an error so callers can skip the subject explicitly.
    """
    if post1.dims != pre.dims:
        raise ValidationError("pre and post volumes disagree on dims")
    if body.shape != pre.data.shape:
        raise ValidationError("body mask shape does not match volume")
    sub = post1.data.astype(np.float64) - pre.data.astype(np.float64)
    if not (sub > 0).any():
        raise SegmentationError("subtraction image shows no enhancement")
    threshold = percentile(sub, config.heart_enhancement_percentile)
    planes = chest_wall_planes(body)
    yy = np.arange(body.shape[1])[None, :, None]
    posterior = yy > planes[:, None, None]
    candidate = body & posterior & (sub >= threshold)
    labeled, n = ndimage.label(candidate, structure=_CONN26)
    if n == 0:
        raise SegmentationError("no heart candidates behind the chest wall")
    sizes = np.bincount(labeled.ravel())
    sizes[0] = 0
    best = int(np.argmax(sizes))
    if sizes[best] < config.min_component_voxels:
        raise SegmentationError(
            f"largest enhancing component has {int(sizes[best])} voxels, "
            f"below the floor of {config.min_component_voxels}"
        )
    return labeled == best


def assemble_mask(
    air: np.ndarray,
    fat: np.ndarray,
    dense: np.ndarray,
    heart: np.ndarray,
    tumor: np.ndarray,
    spacing_mm,
) -> TissueMask:
    """Combine per-tissue voxel sets into one label volume.

    Overlaps resolve by precedence tumor > heart > dense > fat > air;
    anything unclaimed stays background.
    """
    shape = air.shape
    for name, arr in (("fat", fat), ("dense", dense), ("heart", heart), ("tumor", tumor)):
        if arr.shape != shape:
            raise ValidationError(f"{name} mask shape {arr.shape} does not match {shape}")
    labels = np.zeros(shape, dtype=np.uint8)
    labels[air] = AIR
    labels[fat] = FAT
    labels[dense] = DENSE
    labels[heart] = HEART
    labels[tumor] = TUMOR
    return TissueMask(labels, spacing_mm)


def classical_mask(series: StudySeries, config: SegmentationConfig) -> TissueMask:
    """Run the full classical pipeline for one subject.

    No tumor stage exists here; tumor labels only enter through an
    externally supplied mask.
    """
    pre = series.pre
    air = segment_air(pre, config)
    breast = segment_breast(pre, config)
    dense = segment_dense(pre, breast, config)
    fat = breast & ~dense
    body = body_mask(pre)
    heart = segment_heart(pre, series.posts[0], body, config)
    tumor = np.zeros(pre.data.shape, dtype=bool)
    return assemble_mask(air, fat, dense, heart, tumor, series.spacing_mm)


def load_external_mask(path, series: StudySeries) -> TissueMask:
    """Load a mask file and check it matches the series geometry."""
    from .volume import load_mask
    from .errors import MaskError

    mask = load_mask(path)
    if mask.dims != series.dims:
        raise MaskError(
            f"mask dims {mask.dims} do not match series dims {series.dims}", path=path
        )
    if mask.spacing_mm != series.spacing_mm:
        raise MaskError(
            f"mask spacing {mask.spacing_mm} does not match series spacing {series.spacing_mm}",
            path=path,
        )
    return mask
