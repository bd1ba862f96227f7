"""Deterministic synthetic feature-map datasets.

Each identity owns six per-band prototype vectors; with some probability a
band prototype is swapped for one from a small pool shared across
identities, so distinct identities can collide on individual parts exactly
the way same-looking clothing does. Images tile the prototypes over the row
bands and add noise; individual rows may be replaced by clutter vectors and
whole bands may be blanked out, giving the relation and contrast branches a
measurable signal at desk scale.

Train identities contribute ceil(M/2) training images each; evaluation
identities contribute one query plus M-1 gallery images, with round-robin
camera ids so a cross-camera match always exists.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .dataio import write_feature
from .errors import ConfigError

_BANDS = 6  # prototype bands per identity; maps must split this way


@dataclass
class SynthSpec:
    n_ids: int                        # training identities
    imgs_per_id: int = 12
    n_eval_ids: int = 10
    height: int = 12
    width: int = 4
    channels: int = 64
    noise_sigma: float = 0.25
    shared_attribute_prob: float = 0.3
    shared_pool_size: int = 4         # shared prototypes per row band
    clutter_row_prob: float = 0.15
    occlusion_band_prob: float = 0.1
    n_cameras: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_ids < 1 or self.imgs_per_id < 1:
            raise ConfigError("need at least one identity and one image per identity")
        if self.height % _BANDS != 0:
            raise ConfigError(f"height {self.height} must be divisible by {_BANDS}")
        for name in ("noise_sigma",):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("shared_attribute_prob", "clutter_row_prob", "occlusion_band_prob"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.shared_pool_size < 1:
            raise ConfigError("shared_pool_size must be positive")
        if self.n_eval_ids > 0 and (self.n_cameras < 2 or self.imgs_per_id < 2):
            raise ConfigError("evaluation identities need n_cameras >= 2 and imgs_per_id >= 2 "
                              "so cross-camera matches exist")


def _render_image(rng: np.random.Generator, protos: np.ndarray, spec: SynthSpec) -> np.ndarray:
    h, w, c = spec.height, spec.width, spec.channels
    band_h = h // _BANDS
    values = np.repeat(protos, band_h, axis=0)[:, None, :] + rng.standard_normal((h, w, c)) * spec.noise_sigma
    for row in range(h):
        if rng.random() < spec.clutter_row_prob:
            values[row, :, :] = rng.standard_normal(c)[None, :]
    for band in range(_BANDS):
        if rng.random() < spec.occlusion_band_prob:
            values[band * band_h:(band + 1) * band_h, :, :] = 0.0
    return values.astype(np.float32)


def generate(spec: SynthSpec, out_dir: str, overwrite: bool = False) -> str:
    """Write feature files plus manifest.jsonl; returns the manifest path.

    Fully deterministic: the same spec produces byte-identical trees.
    """
    if os.path.exists(out_dir) and os.listdir(out_dir) and not overwrite:
        raise ConfigError(f"output directory {out_dir!r} is not empty (use overwrite)")
    feature_dir = os.path.join(out_dir, "features")
    os.makedirs(feature_dir, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    pool = rng.standard_normal((_BANDS, spec.shared_pool_size, spec.channels))

    lines = []
    total_ids = spec.n_ids + spec.n_eval_ids
    for pid in range(total_ids):
        is_train = pid < spec.n_ids
        protos = rng.standard_normal((_BANDS, spec.channels))
        for band in range(_BANDS):
            if rng.random() < spec.shared_attribute_prob:
                protos[band] = pool[band, rng.integers(spec.shared_pool_size)]
        n_images = (spec.imgs_per_id + 1) // 2 if is_train else spec.imgs_per_id
        for j in range(n_images):
            values = _render_image(rng, protos, spec)
            name = f"p{pid:04d}_i{j:02d}"
            rel_path = os.path.join("features", name + ".ridf")
            write_feature(os.path.join(out_dir, rel_path), values)
            if is_train:
                split = "train"
            else:
                split = "query" if j == 0 else "gallery"
            lines.append(json.dumps({
                "id": name,
                "feature_path": rel_path,
                "person_id": pid,
                "camera_id": j % spec.n_cameras,
                "split": split,
            }, sort_keys=True))

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest_path
