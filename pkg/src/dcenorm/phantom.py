"""Synthetic desk-scale DCE-MRI datasets with known ground truth.

Every subject shares one fixed anatomy: an anterior ellipsoidal breast
of fat holding a dense-tissue blob with a small tumor sphere inside it,
and a posterior heart sphere, all surrounded by air. A dataset has one
or more scanner groups; each group applies an affine intensity
distortion (scale, offset) and Gaussian noise to the common anatomy,
and stamps its acquisition metadata (TE, TR, field strength) on its
subjects.

Subjects at the same index in different groups form a matched set: they
are built from the same random draws, so they differ only by the group
affine (and noise amplitude, when groups disagree on sigma). That makes
post-normalization agreement between groups a sharp oracle instead of a
statistical one.

Randomness is a counter-based Philox stream keyed by (seed, subject
index), so generation is byte-identical across runs, platforms, and
worker counts.

Dense tissue enhances with an anterior-posterior gradient whose
amplitude is drawn uniformly per subject index: this gives the
enhancement maps real spatial structure and the cohort an even
between-subject spread, which the noise-sensitivity checks rely on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .manifest import DatasetManifest, load_manifest
from .volume import AIR, DENSE, FAT, HEART, TUMOR, TissueMask, Volume, save_mask, save_volume
from .util import atomic_write_json, atomic_write_text, read_json, run_parallel

# Anatomy layout, as fractions of the volume dims so any grid works.
# Each entry is (center_frac, semi_axis_frac) in (x, y, z) order; y = 0
# is the anterior (breast) side.
_BREAST = ((0.5, 0.28125, 0.5), (0.375, 0.203125, 0.375))
_DENSE = ((0.5, 0.25, 0.5), (0.15625, 0.09375, 5.0 / 24.0))
_TUMOR = ((0.40625, 0.25, 0.5), (0.05, 0.05, 3.2 / 24.0))
_HEART = ((0.5, 0.71875, 0.5), (0.09375, 0.09375, 0.25))


@dataclass(frozen=True)
class GroupSpec:
    """One scanner group: cohort size, affine distortion, metadata."""

    name: str
    n_subjects: int
    scale: float = 1.0
    offset: float = 0.0
    te_ms: float = 1.8
    tr_ms: float = 4.0
    field_t: float = 1.5
    noise_sigma: float = 2.0

    def __post_init__(self):
        if not self.name or not self.name.isalnum():
            raise ConfigError(f"group name must be non-empty alphanumeric, got {self.name!r}")
        if self.n_subjects < 1:
            raise ConfigError(f"group {self.name}: n_subjects must be >= 1")
        if self.scale <= 0:
            raise ConfigError(f"group {self.name}: scale must be positive")
        if self.noise_sigma < 0:
            raise ConfigError(f"group {self.name}: noise_sigma must be >= 0")


def _default_groups() -> tuple[GroupSpec, ...]:
    return (
        GroupSpec(name="A", n_subjects=20, scale=1.0, offset=0.0, te_ms=1.8, tr_ms=4.0, field_t=1.5),
        GroupSpec(name="B", n_subjects=20, scale=1.5, offset=50.0, te_ms=2.6, tr_ms=5.2, field_t=3.0),
    )


def _default_intensities() -> dict[str, float]:
    return {"air": 0.0, "fat": 400.0, "dense": 200.0, "heart": 300.0, "tumor": 240.0}


def _default_enhancement() -> dict[str, tuple[float, ...]]:
    # Fat enhances weakly but non-trivially: a zero fat enhancement
    # leaves median-filtered windows that straddle the dense/fat border
    # with noise-only enhancement-ratio denominators, which turns the
    # denoised SER features into amplifier artifacts instead of
    # smoothed ones.
    return {
        "fat": (1.05, 1.1, 1.15),
        "dense": (1.3, 1.45, 1.6),
        "heart": (3.0, 2.8, 2.6),
        "tumor_label0": (2.0, 1.9, 1.8),
        "tumor_label1": (2.4, 2.2, 2.0),
    }


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 24)
    spacing_mm: tuple[float, float, float] = (2.0, 2.0, 4.0)
    seed: int = 0
    n_posts: int = 3
    intensities: dict[str, float] = field(default_factory=_default_intensities)
    enhancement: dict[str, tuple[float, ...]] = field(default_factory=_default_enhancement)
    gradient_range: tuple[float, float] = (0.1, 0.55)
    groups: tuple[GroupSpec, ...] = field(default_factory=_default_groups)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 8 for d in self.dims):
            raise ConfigError(f"dims must be 3 entries >= 8, got {self.dims}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.n_posts < 1:
            raise ConfigError("n_posts must be >= 1")
        missing = set(_default_intensities()) - set(self.intensities)
        if missing:
            raise ConfigError(f"intensities missing tissues: {sorted(missing)}")
        for tissue, factors in self.enhancement.items():
            if len(factors) < self.n_posts:
                raise ConfigError(
                    f"enhancement[{tissue!r}] has {len(factors)} factors, need {self.n_posts}"
                )
        if not self.groups:
            raise ConfigError("at least one group is required")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ConfigError(f"group names must be unique, got {names}")
        lo, hi = self.gradient_range
        if not (0.0 <= lo <= hi):
            raise ConfigError(f"gradient_range must satisfy 0 <= lo <= hi, got {self.gradient_range}")


_CONFIG_KEYS = {f.name for f in dataclasses.fields(PhantomConfig)}
_GROUP_KEYS = {f.name for f in dataclasses.fields(GroupSpec)}
_ENH_KEYS = set(_default_enhancement())


def phantom_config_from_json(path: Path | str) -> PhantomConfig:
    """Load a phantom config file, rejecting unknown keys by name."""
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise ConfigError("phantom config must be a JSON object", path=path)
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown phantom config keys: {sorted(unknown)}", path=path)
    kwargs: dict = dict(raw)
    if "dims" in kwargs:
        kwargs["dims"] = tuple(int(d) for d in kwargs["dims"])
    if "spacing_mm" in kwargs:
        kwargs["spacing_mm"] = tuple(float(s) for s in kwargs["spacing_mm"])
    if "gradient_range" in kwargs:
        kwargs["gradient_range"] = tuple(float(b) for b in kwargs["gradient_range"])
    if "enhancement" in kwargs:
        enh = kwargs["enhancement"]
        if not isinstance(enh, dict):
            raise ConfigError("enhancement must be an object", path=path)
        unknown = set(enh) - _ENH_KEYS
        if unknown:
            raise ConfigError(f"unknown enhancement keys: {sorted(unknown)}", path=path)
        merged = _default_enhancement()
        merged.update({k: tuple(float(x) for x in v) for k, v in enh.items()})
        kwargs["enhancement"] = merged
    if "intensities" in kwargs:
        vals = kwargs["intensities"]
        if not isinstance(vals, dict):
            raise ConfigError("intensities must be an object", path=path)
        unknown = set(vals) - set(_default_intensities())
        if unknown:
            raise ConfigError(f"unknown intensity keys: {sorted(unknown)}", path=path)
        merged_i = _default_intensities()
        merged_i.update({k: float(v) for k, v in vals.items()})
        kwargs["intensities"] = merged_i
    if "groups" in kwargs:
        groups = []
        for i, g in enumerate(kwargs["groups"]):
            if not isinstance(g, dict):
                raise ConfigError(f"groups[{i}] must be an object", path=path)
            unknown = set(g) - _GROUP_KEYS
            if unknown:
                raise ConfigError(f"groups[{i}] has unknown keys: {sorted(unknown)}", path=path)
            groups.append(GroupSpec(**g))
        kwargs["groups"] = tuple(groups)
    try:
        return PhantomConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad phantom config: {exc}", path=path) from None


def _ellipsoid(dims: tuple[int, int, int], shape) -> np.ndarray:
    """Boolean mask of an axis-aligned ellipsoid given as dim fractions."""
    nx, ny, nz = dims
    (fx, fy, fz), (gx, gy, gz) = shape
    x = (np.arange(nx) - fx * nx) / (gx * nx)
    y = (np.arange(ny) - fy * ny) / (gy * ny)
    z = (np.arange(nz) - fz * nz) / (gz * nz)
    return (
        x[None, None, :] ** 2 + y[None, :, None] ** 2 + z[:, None, None] ** 2
    ) <= 1.0


def phantom_mask(dims: tuple[int, int, int], spacing_mm) -> TissueMask:
    """Ground-truth tissue labels shared by every phantom subject."""
    breast = _ellipsoid(dims, _BREAST)
    dense = _ellipsoid(dims, _DENSE)
    tumor = _ellipsoid(dims, _TUMOR)
    heart = _ellipsoid(dims, _HEART)
    nz, ny, nx = dims[2], dims[1], dims[0]
    labels = np.full((nz, ny, nx), AIR, dtype=np.uint8)
    labels[breast] = FAT
    labels[dense] = DENSE
    labels[tumor] = TUMOR
    labels[heart] = HEART
    return TissueMask(labels, tuple(spacing_mm))


def _gradient_profile(dims: tuple[int, int, int]) -> np.ndarray:
    """Anterior-posterior ramp over the dense blob, in [-1, 1]."""
    ny = dims[1]
    (_, fy, _), (_, gy, _) = _DENSE
    ramp = (np.arange(ny) - fy * ny) / (gy * ny)
    return np.clip(ramp, -1.0, 1.0)[None, :, None]


def _anatomy_rng(seed: int, anatomy: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(seed << 64) | anatomy))


def _base_fields(cfg: PhantomConfig, anatomy: int, grad_amp: float) -> list[np.ndarray]:
    """Undistorted per-sequence intensity fields for one anatomy index.

    Returns n_posts + 1 float64 arrays: pre first, then each post.
    """
    mask = phantom_mask(cfg.dims, cfg.spacing_mm)
    fat = mask.labels == FAT
    dense = mask.labels == DENSE
    tumor = mask.labels == TUMOR
    heart = mask.labels == HEART

    base = cfg.intensities
    enh = cfg.enhancement
    tumor_key = "tumor_label1" if anatomy % 2 else "tumor_label0"

    ramp = np.broadcast_to(_gradient_profile(cfg.dims), mask.labels.shape)

    fields = []
    pre = np.full(mask.labels.shape, base["air"], dtype=np.float64)
    pre[fat] = base["fat"]
    pre[dense] = base["dense"]
    pre[tumor] = base["tumor"]
    pre[heart] = base["heart"]
    fields.append(pre)
    for p in range(cfg.n_posts):
        post = np.full(mask.labels.shape, base["air"], dtype=np.float64)
        post[fat] = base["fat"] * enh["fat"][p]
        post[dense] = base["dense"] * (enh["dense"][p] + grad_amp * ramp[dense])
        post[tumor] = base["tumor"] * enh[tumor_key][p]
        post[heart] = base["heart"] * enh["heart"][p]
        fields.append(post)
    return fields


def _sequence_names(n_posts: int) -> list[str]:
    return ["pre"] + [f"post{p + 1}" for p in range(n_posts)]


def _generate_anatomy(job: tuple[PhantomConfig, str, int]) -> list[dict]:
    """Emit every subject at one anatomy index; returns manifest entries.

    All randomness for the index is drawn once here, in a fixed order,
    then reused for each group member, so matched subjects differ only
    by their group's affine and noise amplitude.
    """
    cfg, out_dir, anatomy = job
    out = Path(out_dir)
    rng = _anatomy_rng(cfg.seed, anatomy)
    # Stratified draw: anatomy k jitters inside the middle half of the
    # k-th subinterval of gradient_range. Adjacent anatomies then keep a
    # guaranteed amplitude gap, which i.i.d. draws do not.
    n_anat = max(g.n_subjects for g in cfg.groups)
    lo, hi = cfg.gradient_range
    stratum = (anatomy % n_anat + 0.3 + 0.4 * float(rng.random())) / n_anat
    grad_amp = lo + (hi - lo) * stratum
    fields = _base_fields(cfg, anatomy, grad_amp)
    unit_noise = [rng.standard_normal(size=fields[0].shape) for _ in fields]
    mask = phantom_mask(cfg.dims, cfg.spacing_mm)
    names = _sequence_names(cfg.n_posts)

    entries = []
    for group in cfg.groups:
        if anatomy >= group.n_subjects:
            continue
        sid = f"{group.name}{anatomy:03d}"
        for seq_name, clean, noise in zip(names, fields, unit_noise):
            data = (clean + group.noise_sigma * noise) * group.scale + group.offset
            vol = Volume(data.astype(np.float32), cfg.spacing_mm, f"dce-{seq_name}")
            save_volume(vol, out / f"{sid}_{seq_name}")
        save_mask(mask, out / f"{sid}_mask")
        entries.append(
            {
                "subject_id": sid,
                "pre": f"{sid}_pre.json",
                "posts": [f"{sid}_{n}.json" for n in names[1:]],
                "mask": f"{sid}_mask.json",
                "te_ms": group.te_ms,
                "tr_ms": group.tr_ms,
                "field_t": group.field_t,
                "label": anatomy % 2,
            }
        )
    return entries


def generate_phantom(cfg: PhantomConfig, out_dir: Path | str, jobs: int = 1) -> DatasetManifest:
    """Write a full phantom dataset and return its loaded manifest.

    Produces per subject a pre volume, n_posts post volumes, and a
    ground-truth mask, plus manifest.json and labels.csv. The manifest
    interleaves groups (A000, B000, A001, ...) so any prefix of it
    stays group-balanced. Output is byte-identical for a fixed config
    regardless of jobs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    max_n = max(g.n_subjects for g in cfg.groups)
    per_anatomy = run_parallel(_generate_anatomy, [(cfg, str(out), k) for k in range(max_n)], jobs)
    entries = [entry for group_entries in per_anatomy for entry in group_entries]
    atomic_write_json(out / "manifest.json", entries)
    label_lines = ["subject_id,label"]
    label_lines += [f"{e['subject_id']},{e['label']}" for e in entries]
    atomic_write_text(out / "labels.csv", "\n".join(label_lines) + "\n")
    return load_manifest(out / "manifest.json")
