"""Command line front-end.

Subcommands stage the pipeline through files: phantom generation,
segmentation, archetype training, normalization, feature extraction,
evaluation, and single-feature AUC. Every subcommand exits 0 on
success, 1 on a validation failure, and 2 on an I/O failure (missing
inputs, unwritable outputs); failures print exactly one line to stderr
of the form ``error[validation]: ...`` or ``error[io]: ...``.

An optional JSON config file tunes the pipeline via the sections
``segmentation``, ``anchors``, ``features``, and ``evaluation``;
command-line flags override config values. Unknown sections or keys
are rejected by name.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass
from functools import partial
from pathlib import Path

from . import anchors as anchors_mod
from . import evaluation as eval_mod
from .errors import ConfigError, DcenormError, MissingInputError, SegmentationError, ValidationError
from .features import FEATURE_NAMES, extract_features, read_features_csv, write_features_csv
from .manifest import SubjectEntry, load_manifest, load_series
from .mapping import apply_mapping, build_mapping, export_mapping_curve, write_mapping_curve
from .model import load_model, save_model, train_archetype
from .phantom import PhantomConfig, generate_phantom, phantom_config_from_json
from .segmentation import SegmentationConfig, classical_mask, load_external_mask
from .volume import save_mask, save_volume
from .util import atomic_write_json, atomic_write_text, default_jobs, read_json, run_parallel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CliConfig:
    segmentation: SegmentationConfig
    heart_rule: str = "p90"
    clamp_floor: float = 0.0
    denoise_radius: int | None = None
    group_by: str | None = None
    group_threshold: float | None = None


_SECTION_KEYS = {
    "segmentation": {f.name for f in dataclasses.fields(SegmentationConfig)},
    "anchors": {"heart_rule", "clamp_floor"},
    "features": {"denoise_radius"},
    "evaluation": {"group_by", "threshold"},
}


def load_cli_config(path: Path | str | None) -> CliConfig:
    if path is None:
        return CliConfig(segmentation=SegmentationConfig())
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", path=path)
    unknown = set(raw) - set(_SECTION_KEYS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}", path=path)
    for section, keys in _SECTION_KEYS.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object", path=path)
        bad = set(body) - keys
        if bad:
            raise ConfigError(f"unknown keys in config section {section!r}: {sorted(bad)}", path=path)
    seg = SegmentationConfig(**raw.get("segmentation", {}))
    anchors_sec = raw.get("anchors", {})
    features_sec = raw.get("features", {})
    eval_sec = raw.get("evaluation", {})
    cfg = CliConfig(
        segmentation=seg,
        heart_rule=anchors_sec.get("heart_rule", "p90"),
        clamp_floor=float(anchors_sec.get("clamp_floor", 0.0)),
        denoise_radius=features_sec.get("denoise_radius"),
        group_by=eval_sec.get("group_by"),
        group_threshold=eval_sec.get("threshold"),
    )
    if cfg.heart_rule not in anchors_mod.HEART_RULES:
        raise ConfigError(f"unknown heart_rule {cfg.heart_rule!r}", path=path)
    if cfg.denoise_radius is not None and int(cfg.denoise_radius) < 1:
        raise ConfigError("features.denoise_radius must be >= 1", path=path)
    if cfg.group_by is not None and cfg.group_by not in eval_mod.GROUP_KEYS:
        raise ConfigError(f"evaluation.group_by must be one of {eval_mod.GROUP_KEYS}", path=path)
    return cfg


def _resolve_mask_path(entry: SubjectEntry, masks_dir: str | None) -> Path:
    if masks_dir is not None:
        return Path(masks_dir) / f"{entry.subject_id}_mask.json"
    if entry.mask is not None:
        return entry.mask
    raise ValidationError(
        f"subject {entry.subject_id}: no mask available; add masks to the manifest or pass --masks"
    )


def _load_subject(entry: SubjectEntry, masks_dir: str | None):
    series = load_series(entry)
    mask = load_external_mask(_resolve_mask_path(entry, masks_dir), series)
    return series, mask


# ---------------------------------------------------------------------------
# per-subject workers (top level so process pools can pickle them)


def _anchor_job(entry: SubjectEntry, masks_dir: str | None, heart_rule: str):
    series, mask = _load_subject(entry, masks_dir)
    return anchors_mod.extract_anchors(series, mask, heart_rule=heart_rule)


def _segment_job(entry: SubjectEntry, out_dir: str, seg_config: SegmentationConfig):
    series = load_series(entry)
    if entry.mask is not None:
        mask = load_external_mask(entry.mask, series)
    else:
        try:
            mask = classical_mask(series, seg_config)
        except SegmentationError as exc:
            log.warning("subject %s skipped: %s", entry.subject_id, exc)
            return None
    sid = entry.subject_id
    save_mask(mask, Path(out_dir) / f"{sid}_mask")
    record = {
        "subject_id": sid,
        "pre": str(entry.pre),
        "posts": [str(p) for p in entry.posts],
        "mask": f"{sid}_mask.json",
        "te_ms": entry.te_ms,
        "tr_ms": entry.tr_ms,
        "field_t": entry.field_t,
    }
    if entry.label is not None:
        record["label"] = entry.label
    return record


def _normalize_job(
    entry: SubjectEntry,
    model_path: str,
    out_dir: str,
    masks_dir: str | None,
    heart_rule: str,
    clamp_floor: float,
    mapping_dir: str | None,
):
    model = load_model(model_path)
    series, mask = _load_subject(entry, masks_dir)
    anchor_set = anchors_mod.extract_anchors(series, mask, heart_rule=heart_rule)
    mapping = build_mapping(anchor_set, model, clamp_floor=clamp_floor)
    mapped = apply_mapping(mapping, series)

    sid = entry.subject_id
    out = Path(out_dir)
    save_volume(mapped.pre, out / f"{sid}_pre")
    for i, post in enumerate(mapped.posts):
        save_volume(post, out / f"{sid}_post{i + 1}")
    save_mask(mask, out / f"{sid}_mask")
    if mapping_dir is not None:
        curve = export_mapping_curve(mapping)
        write_mapping_curve(Path(mapping_dir) / f"{sid}_mapping.csv", curve)

    record = {
        "subject_id": sid,
        "pre": f"{sid}_pre.json",
        "posts": [f"{sid}_post{i + 1}.json" for i in range(len(mapped.posts))],
        "mask": f"{sid}_mask.json",
        "te_ms": entry.te_ms,
        "tr_ms": entry.tr_ms,
        "field_t": entry.field_t,
    }
    if entry.label is not None:
        record["label"] = entry.label
    return record


def _features_job(entry: SubjectEntry, masks_dir: str | None, denoise_radius: int | None, normalized: bool):
    series, mask = _load_subject(entry, masks_dir)
    return extract_features(series, mask, denoise_radius=denoise_radius, normalized=normalized)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_phantom(args) -> int:
    cfg = phantom_config_from_json(args.config) if args.config else PhantomConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    manifest = generate_phantom(cfg, args.out, jobs=args.jobs)
    log.info("phantom: wrote %d subjects to %s", len(manifest), args.out)
    return 0


def _cmd_segment(args) -> int:
    cli_cfg = load_cli_config(args.config)
    manifest = load_manifest(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    job = partial(_segment_job, out_dir=str(out), seg_config=cli_cfg.segmentation)
    records = [r for r in run_parallel(job, list(manifest), args.jobs) if r is not None]
    if not records:
        raise ValidationError("segmentation failed for every subject")
    atomic_write_json(out / "manifest.json", records)
    log.info("segment: %d/%d subjects masked", len(records), len(manifest))
    return 0


def _cmd_train(args) -> int:
    cli_cfg = load_cli_config(args.config)
    manifest = load_manifest(args.manifest)
    job = partial(_anchor_job, masks_dir=args.masks, heart_rule=cli_cfg.heart_rule)
    anchor_sets = run_parallel(job, list(manifest), args.jobs)
    model = train_archetype(anchor_sets)
    save_model(model, args.out)
    if args.emit_anchors:
        records = [
            {
                "subject_id": a.subject_id,
                "v_air": a.v_air,
                "v_fat": a.v_fat,
                "v_dense": a.v_dense,
                "v_heart": a.v_heart,
                "source_counts": dict(a.source_counts),
            }
            for a in anchor_sets
        ]
        atomic_write_json(args.emit_anchors, records)
    log.info("train: archetype %s from %d subjects", model.archetype_subject_id, len(anchor_sets))
    return 0


def _cmd_normalize(args) -> int:
    cli_cfg = load_cli_config(args.config)
    manifest = load_manifest(args.manifest)
    load_model(args.model)  # fail fast before any per-subject work
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.emit_mapping:
        Path(args.emit_mapping).mkdir(parents=True, exist_ok=True)
    job = partial(
        _normalize_job,
        model_path=str(args.model),
        out_dir=str(out),
        masks_dir=args.masks,
        heart_rule=cli_cfg.heart_rule,
        clamp_floor=cli_cfg.clamp_floor,
        mapping_dir=args.emit_mapping,
    )
    records = run_parallel(job, list(manifest), args.jobs)
    atomic_write_json(out / "manifest.json", records)
    log.info("normalize: %d subjects written to %s", len(records), out)
    return 0


def _cmd_features(args) -> int:
    cli_cfg = load_cli_config(args.config)
    manifest = load_manifest(args.manifest)
    radius = args.denoise_median if args.denoise_median is not None else cli_cfg.denoise_radius
    job = partial(
        _features_job, masks_dir=args.masks, denoise_radius=radius, normalized=args.normalized
    )
    rows = run_parallel(job, list(manifest), args.jobs)
    write_features_csv(args.out, rows)
    log.info("features: %d subjects -> %s", len(rows), args.out)
    return 0


def _cmd_evaluate(args) -> int:
    cli_cfg = load_cli_config(args.config)
    manifest = load_manifest(args.manifest)
    before = read_features_csv(args.before)
    after = read_features_csv(args.after)
    key = args.group_by or cli_cfg.group_by
    if key is None:
        raise ConfigError("evaluate needs --group-by or an evaluation.group_by config entry")
    spec = eval_mod.GroupingSpec(key=key, threshold=cli_cfg.group_threshold)
    manifest_after = load_manifest(args.manifest_after) if args.manifest_after else None
    report = eval_mod.build_report(
        manifest, before, after, spec, manifest_after=manifest_after
    )
    atomic_write_json(args.out, report)
    eval_mod.write_report_csv(Path(args.out).with_suffix(".csv"), report)
    log.info("evaluate: report written to %s", args.out)
    return 0


def _read_labels_csv(path: Path | str) -> dict[str, int]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError("labels file not found", path=path)
    labels: dict[str, int] = {}
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or set(reader.fieldnames) != {"subject_id", "label"}:
            raise ValidationError("labels CSV must have columns subject_id,label", path=path)
        for record in reader:
            sid = record["subject_id"]
            if sid in labels:
                raise ValidationError(f"duplicate subject {sid} in labels", path=path)
            if record["label"] not in ("0", "1"):
                raise ValidationError(
                    f"subject {sid}: label must be 0 or 1, got {record['label']!r}", path=path
                )
            labels[sid] = int(record["label"])
    return labels


def _cmd_auc(args) -> int:
    rows = read_features_csv(args.features)
    labels = _read_labels_csv(args.labels)
    missing = [r.subject_id for r in rows if r.subject_id not in labels]
    if missing:
        raise ValidationError(f"subjects missing from labels file: {missing}")
    lines = ["feature,auc,n"]
    for name in FEATURE_NAMES:
        pairs = [(r.values[name], labels[r.subject_id]) for r in rows if r.values[name] is not None]
        try:
            auc = eval_mod.roc_auc([p[0] for p in pairs], [p[1] for p in pairs])
            lines.append(f"{name},{auc!r},{len(pairs)}")
        except ValidationError as exc:
            log.warning("feature %s: AUC unavailable (%s)", name, exc)
            lines.append(f"{name},,{len(pairs)}")
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    log.info("auc: written to %s", args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    """Argument errors surface as validation failures, not SystemExit."""

    def error(self, message):
        raise ConfigError(message)


def _add_common(sub, jobs: bool = True):
    sub.add_argument("--config", default=None, help="JSON config file")
    sub.add_argument("-v", "--verbose", action="count", default=0)
    if jobs:
        sub.add_argument("--jobs", type=int, default=default_jobs(), help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcenorm", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_phantom)

    p = commands.add_parser("segment", help="produce tissue masks per subject")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_segment)

    p = commands.add_parser("train", help="select the archetype subject and save the model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-anchors", default=None)
    p.add_argument("--masks", default=None, help="directory of <subject>_mask files")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = commands.add_parser("normalize", help="apply the model's mapping to every subject")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--emit-mapping", default=None, help="directory for mapping curve CSVs")
    p.add_argument("--masks", default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_normalize)

    p = commands.add_parser("features", help="extract the 15-feature vector per subject")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--denoise-median", type=int, default=None, metavar="R")
    p.add_argument("--masks", default=None)
    p.add_argument("--normalized", action="store_true", help="mark rows as post-normalization")
    _add_common(p)
    p.set_defaults(func=_cmd_features)

    p = commands.add_parser("evaluate", help="compare feature distributions across groups")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--group-by", choices=list(eval_mod.GROUP_KEYS), default=None)
    p.add_argument("--manifest-after", default=None, help="normalized-dataset manifest")
    p.add_argument("--out", required=True)
    _add_common(p, jobs=False)
    p.set_defaults(func=_cmd_evaluate)

    p = commands.add_parser("auc", help="single-feature ROC AUC against binary labels")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    _add_common(p, jobs=False)
    p.set_defaults(func=_cmd_auc)

    return parser


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2),
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except MissingInputError as exc:
        print(f"error[io]: {_one_line(exc)}", file=sys.stderr)
        return 2
    except DcenormError as exc:
        print(f"error[validation]: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[io]: {_one_line(exc)}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
