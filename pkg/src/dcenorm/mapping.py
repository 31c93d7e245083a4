"""Subject-specific piecewise linear intensity mapping.

A mapping is anchored at four control points pairing the subject's own
tissue anchors with the model's target intensities. Between control
points the mapping interpolates linearly. Above the top control point
it extends the trend from the dense anchor to the heart anchor; below
the bottom control point it extends the air-to-fat trend and clamps at
a floor so mapped intensities cannot dive arbitrarily negative.

One mapping is built per subject and applied unchanged to the
pre-contrast volume and every post-contrast volume, which preserves
within-subject intensity order and keeps enhancement ratios meaningful.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .anchors import TISSUES, AnchorSet
from .errors import DegenerateAnchorError, NonMonotoneModelError, ValidationError
from .manifest import StudySeries
from .model import NormalizationModel
from .volume import Volume
from .util import atomic_write_text


@dataclass(frozen=True)
class MappingFunction:
    """Piecewise linear map defined by four (v, m) control points.

    ``knots_v`` is strictly increasing and ``knots_m`` non-decreasing;
    both are sorted by v. ``upper_slope`` is the dense-to-heart secant
    used above the last control point, ``lower_slope`` the air-to-fat
    secant used below the first one. ``clamp_floor`` bounds the lower
    extrapolation; it never rises above the first control point's
    target value, so the map stays monotone even when the air target
    is below the floor.
    """

    knots_v: tuple[float, float, float, float]
    knots_m: tuple[float, float, float, float]
    upper_slope: float
    lower_slope: float
    clamp_floor: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.knots_v, dtype=np.float64)
        m = np.asarray(self.knots_m, dtype=np.float64)
        if v.shape != (4,) or m.shape != (4,):
            raise ValidationError("a mapping needs exactly 4 control points")
        if not np.all(np.diff(v) > 0):
            raise DegenerateAnchorError(f"control point values must strictly increase, got {self.knots_v}")
        if not np.all(np.diff(m) >= 0):
            raise NonMonotoneModelError(f"target values must be non-decreasing, got {self.knots_m}")
        object.__setattr__(self, "_v", v)
        object.__setattr__(self, "_m", m)

    @property
    def control_points(self) -> tuple[tuple[float, float], ...]:
        return tuple(zip(self.knots_v, self.knots_m))

    @property
    def effective_floor(self) -> float:
        return min(self.clamp_floor, self.knots_m[0])


def build_mapping(
    anchors: AnchorSet, model: NormalizationModel, clamp_floor: float = 0.0
) -> MappingFunction:
    """Pair subject anchors with model targets into a mapping.

    Control points are sorted by the subject's anchor values. Equal
    anchor values are rejected naming the colliding tissues; a target
    sequence that decreases in that order is rejected as non-monotone.
    """
    subject_values = anchors.values()
    target_values = model.values()
    triples = sorted(
        ((subject_values[t], target_values[t], t) for t in TISSUES), key=lambda p: p[0]
    )
    for (v0, _, t0), (v1, _, t1) in zip(triples, triples[1:]):
        if v0 == v1:
            raise DegenerateAnchorError(
                f"subject {anchors.subject_id}: tissues {t0!r} and {t1!r} share anchor value {v0}"
            )
    ms = [m for _, m, _ in triples]
    for (_, m0, t0), (_, m1, t1) in zip(triples, triples[1:]):
        if m1 < m0:
            raise NonMonotoneModelError(
                f"subject {anchors.subject_id}: target for {t1!r} ({m1}) falls below "
                f"target for {t0!r} ({m0}) in anchor order"
            )
    upper = (target_values["heart"] - target_values["dense"]) / (
        subject_values["heart"] - subject_values["dense"]
    )
    lower = (target_values["fat"] - target_values["air"]) / (
        subject_values["fat"] - subject_values["air"]
    )
    return MappingFunction(
        knots_v=tuple(v for v, _, _ in triples),
        knots_m=tuple(ms),
        upper_slope=upper,
        lower_slope=lower,
        clamp_floor=clamp_floor,
    )


def evaluate(mapping: MappingFunction, x) -> np.ndarray | float:
    """Evaluate the mapping in float64 at scalar or array ``x``.

    Control points reproduce their targets exactly: every knot is the
    left endpoint of its own segment (or of the upper extrapolation),
    where the slope form m0 + t * (m1 - m0) evaluates to m0 with t = 0.
    That form is also weakly monotone under rounding, which the
    symmetric (1 - t) * m0 + t * m1 blend is not; clipping each segment
    at its upper target removes the one remaining ulp-level overshoot
    at the far end.
    """
    v: np.ndarray = mapping._v  # type: ignore[attr-defined]
    m: np.ndarray = mapping._m  # type: ignore[attr-defined]
    xs = np.asarray(x, dtype=np.float64)
    scalar = xs.ndim == 0
    xs = np.atleast_1d(xs)

    idx = np.searchsorted(v, xs, side="right") - 1
    out = np.empty(xs.shape, dtype=np.float64)

    below = idx < 0
    above = idx >= 3
    mid = ~(below | above)

    if mid.any():
        i = idx[mid]
        t = (xs[mid] - v[i]) / (v[i + 1] - v[i])
        out[mid] = np.minimum(m[i] + t * (m[i + 1] - m[i]), m[i + 1])
    if above.any():
        out[above] = m[3] + mapping.upper_slope * (xs[above] - v[3])
    if below.any():
        lowered = m[0] + mapping.lower_slope * (xs[below] - v[0])
        out[below] = np.maximum(mapping.effective_floor, lowered)

    if scalar:
        return float(out[0])
    return out


def apply_mapping(mapping: MappingFunction, series: StudySeries) -> StudySeries:
    """Map every volume of a series with the same function.

    Arithmetic runs in float64 and results are stored as float32,
    matching the on-disk volume format.
    """

    def _map(vol: Volume) -> Volume:
        mapped = evaluate(mapping, vol.data).astype(np.float32)
        return Volume(mapped, vol.spacing_mm, vol.modality_tag)

    return StudySeries(
        subject_id=series.subject_id,
        pre=_map(series.pre),
        posts=tuple(_map(p) for p in series.posts),
        te_ms=series.te_ms,
        tr_ms=series.tr_ms,
        field_t=series.field_t,
        mask_path=series.mask_path,
    )


def export_mapping_curve(
    mapping: MappingFunction,
    n_samples: int = 256,
    lo: float | None = None,
    hi: float | None = None,
) -> np.ndarray:
    """Sample the mapping for plotting.

    Returns an array of rows (x, f(x), is_anchor) sorted by x. The four
    control points are always present with is_anchor = 1. The default
    range starts slightly below the first control point and extends a
    quarter span beyond the last one so the extrapolation tails are
    visible.
    """
    if n_samples < 2:
        raise ValidationError(f"n_samples must be >= 2, got {n_samples}")
    v = mapping._v  # type: ignore[attr-defined]
    span = float(v[3] - v[0])
    if lo is None:
        lo = float(v[0]) - 0.05 * span
    if hi is None:
        hi = float(v[3]) + 0.25 * span
    if not hi > lo:
        raise ValidationError(f"curve range is empty: [{lo}, {hi}]")
    xs = np.linspace(lo, hi, n_samples)
    all_x = np.concatenate([xs, v])
    flags = np.concatenate([np.zeros(n_samples), np.ones(4)])
    order = np.argsort(all_x, kind="stable")
    all_x = all_x[order]
    flags = flags[order]
    fx = evaluate(mapping, all_x)
    return np.column_stack([all_x, fx, flags])


def write_mapping_curve(path, curve: np.ndarray) -> None:
    lines = ["x,fx,is_anchor"]
    for x, fx, flag in curve:
        lines.append(f"{float(x)!r},{float(fx)!r},{int(flag)}")
    atomic_write_text(path, "\n".join(lines) + "\n")
