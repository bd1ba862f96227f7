"""Image -> feature-map export.

Reads a labels CSV (filename, person_id, camera_id, split), pushes each
image through the truncated backbone at 384 x 128, and writes one "RIDF"
file per image plus a manifest the training pipeline loads directly.
Unreadable images are skipped with a warning and left out of the manifest.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .backbone import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    INPUT_HEIGHT,
    INPUT_WIDTH,
    build_feature_extractor,
)
from .formats import SPLITS, manifest_line, write_feature_map

log = logging.getLogger(__name__)

_REQUIRED_COLUMNS = ("filename", "person_id", "camera_id", "split")


@dataclass
class ExportJob:
    image_dir: str
    labels_csv: str
    out_dir: str
    weights: str = "pretrained"
    batch_size: int = 8
    input_size: tuple[int, int] = (INPUT_HEIGHT, INPUT_WIDTH)
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD


@dataclass
class ExportResult:
    manifest_path: str
    exported: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def read_labels(path: str) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(_REQUIRED_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing CSV columns {sorted(missing)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if row["split"] not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {row['split']!r}")
            rows.append({
                "filename": row["filename"],
                "person_id": int(row["person_id"]),
                "camera_id": int(row["camera_id"]),
                "split": row["split"],
            })
    return rows


def _load_image(path: str, size: tuple[int, int], mean, std) -> torch.Tensor:
    with Image.open(path) as img:
        img = img.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))


def export_features(job: ExportJob) -> ExportResult:
    rows = read_labels(job.labels_csv)
    model = build_feature_extractor(job.weights)
    feature_dir = os.path.join(job.out_dir, "features")
    os.makedirs(feature_dir, exist_ok=True)

    result = ExportResult(manifest_path=os.path.join(job.out_dir, "manifest.jsonl"))
    lines: list[str] = []
    pending: list[tuple[dict, torch.Tensor]] = []

    def flush():
        if not pending:
            return
        batch = torch.stack([t for _, t in pending])
        with torch.no_grad():
            maps = model(batch)  # [N, C, H, W]
        maps = maps.permute(0, 2, 3, 1).numpy()  # -> H x W x C
        for (row, _), volume in zip(pending, maps):
            stem = os.path.splitext(os.path.basename(row["filename"]))[0]
            rel = os.path.join("features", stem + ".ridf")
            write_feature_map(os.path.join(job.out_dir, rel), volume)
            lines.append(manifest_line(stem, rel, row["person_id"],
                                       row["camera_id"], row["split"]))
            result.exported.append(row["filename"])
        pending.clear()

    for row in rows:
        path = os.path.join(job.image_dir, row["filename"])
        try:
            tensor = _load_image(path, job.input_size, job.mean, job.std)
        except (OSError, ValueError) as e:
            log.warning("skipping unreadable image %s: %s", path, e)
            result.skipped.append(row["filename"])
            continue
        pending.append((row, tensor))
        if len(pending) >= job.batch_size:
            flush()
    flush()

    with open(result.manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    log.info("exported %d maps to %s (%d skipped)",
             len(result.exported), job.out_dir, len(result.skipped))
    return result
