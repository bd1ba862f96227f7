"""Writers for the retrieval pipeline's interchange formats.

Implements the published wire formats directly (this package talks to the
training pipeline only through files): "RIDF" feature maps (magic, version
u32 LE, H/W/C u32 LE, float32 LE payload in row-major order) and the JSON
Lines manifest with {id, feature_path, person_id, camera_id, split}.
"""

from __future__ import annotations

import json
import struct

import numpy as np

FEATURE_MAGIC = b"RIDF"
FORMAT_VERSION = 1
SPLITS = ("train", "query", "gallery")


def write_feature_map(path: str, values: np.ndarray):
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 3:
        raise ValueError(f"feature map must be H x W x C, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise ValueError(f"refusing to write non-finite values to {path}")
    h, w, c = values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, h, w, c))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def manifest_line(image_id: str, feature_path: str, person_id: int, camera_id: int,
                  split: str) -> str:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    return json.dumps({
        "id": image_id,
        "feature_path": feature_path,
        "person_id": int(person_id),
        "camera_id": int(camera_id),
        "split": split,
    }, sort_keys=True)
