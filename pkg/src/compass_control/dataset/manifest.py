"""JSON-lines manifests: validation, compilation, review flags."""

from __future__ import annotations

import json
import os

import numpy as np

from .. import geometry as geo
from ..errors import ConfigError, ValidationError
from .scenes import SceneRecord


def write_manifest(records: list[SceneRecord], path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_manifest(path: str) -> list[SceneRecord]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(SceneRecord.from_json(json.loads(line)))
    return records


def validate_records(records: list[SceneRecord]) -> list[str]:
    """Return human-readable violations; empty means all records pass."""
    problems = []
    ids = set()
    for r in records:
        where = r.record_id
        if r.record_id in ids:
            problems.append(f"{where}: duplicate record id")
        ids.add(r.record_id)
        if not r.objects:
            problems.append(f"{where}: record has no objects")
        image = geo.Box2D(0, 0, r.image_size, r.image_size)
        for o in r.objects:
            if not (0.0 <= o.theta < 2.0 * np.pi):
                problems.append(f"{where}: theta {o.theta} out of range")
            if not image.contains_box(o.box):
                problems.append(f"{where}: box {o.box.to_json()} outside image")
        if len(r.objects) == 2:
            if geo.iou(r.objects[0].box, r.objects[1].box) > 0.0:
                problems.append(f"{where}: two-object boxes overlap")
        if len(r.objects) > 2:
            problems.append(f"{where}: more than two objects in a training record")
        if r.provenance == "augmented" and not r.source_id:
            problems.append(f"{where}: augmented record lacks source_id")
    return problems


def compile_manifest(
    records: list[SceneRecord],
    out_prefix: str,
    stage: int,
    split: tuple[float, float] = (0.9, 0.1),
    seed: int = 0,
) -> dict:
    """Validate, filter and split records into train/val JSONL manifests.

    Stage 1 keeps only single-object records; stage 2 keeps the full
    mixture. Only records flagged "keep" are compiled: rejected and
    still-unreviewed records are excluded (and counted).
    """
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    if abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {split}")
    problems = validate_records(records)
    if problems:
        raise ValidationError(
            f"{len(problems)} manifest violations", offenders=problems
        )
    excluded = {"rejected": 0, "unreviewed": 0, "stage_filtered": 0}
    kept = []
    for r in records:
        if r.filter_flag == "reject":
            excluded["rejected"] += 1
            continue
        if r.filter_flag == "unreviewed":
            excluded["unreviewed"] += 1
            continue
        if stage == 1 and r.n_objects != 1:
            excluded["stage_filtered"] += 1
            continue
        kept.append(r)
    if not kept:
        raise ValidationError("no records left after filtering", offenders=[])
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(kept))
    n_train = max(1, int(round(split[0] * len(kept))))
    if n_train == len(kept) and len(kept) > 1 and split[1] > 0:
        n_train -= 1
    train = [kept[i] for i in order[:n_train]]
    val = [kept[i] for i in order[n_train:]]
    paths = {"train": out_prefix + ".train.jsonl"}
    write_manifest(train, paths["train"])
    if val:
        paths["val"] = out_prefix + ".val.jsonl"
        write_manifest(val, paths["val"])
    return {
        "paths": paths,
        "counts": {"train": len(train), "val": len(val)},
        "excluded": excluded,
        "stage": stage,
    }


def set_filter_flag(manifest_path: str, record_id: str, flag: str) -> SceneRecord:
    """Persist a review decision for one record (keep | reject)."""
    if flag not in ("keep", "reject", "unreviewed"):
        raise ConfigError(f"bad filter flag {flag!r}")
    records = read_manifest(manifest_path)
    hit = None
    for r in records:
        if r.record_id == record_id:
            r.filter_flag = flag
            hit = r
    if hit is None:
        raise ConfigError(f"record {record_id!r} not found in {manifest_path}")
    write_manifest(records, manifest_path)
    return hit


def set_all_flags(manifest_path: str, flag: str,
                  only_provenance: str | None = None) -> int:
    """Bulk review helper; returns the number of flipped records."""
    if flag not in ("keep", "reject", "unreviewed"):
        raise ConfigError(f"bad filter flag {flag!r}")
    records = read_manifest(manifest_path)
    n = 0
    for r in records:
        if only_provenance and r.provenance != only_provenance:
            continue
        if r.filter_flag != flag:
            r.filter_flag = flag
            n += 1
    write_manifest(records, manifest_path)
    return n
