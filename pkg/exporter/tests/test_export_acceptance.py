"""Exporter acceptance: shape contract and cross-component max equality."""

import csv
import os

import numpy as np
from PIL import Image

from reidexport.export import ExportJob, export_features
from relreid.dataio import load_manifest, read_feature
from relreid.head import part_pool, part_statistics, split_parts
from relreid.tensor import constant


def report(name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name}" + (f"  ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


def test_exporter_shape_and_max_contract(tmp_path):
    images = tmp_path / "images"
    images.mkdir()
    rng = np.random.default_rng(11)
    Image.fromarray(rng.integers(0, 256, (384, 128, 3), dtype=np.uint8)).save(
        str(images / "probe.png"))
    labels = str(tmp_path / "labels.csv")
    with open(labels, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "person_id", "camera_id", "split"])
        writer.writerow(["probe.png", 0, 0, "gallery"])

    job = ExportJob(image_dir=str(images), labels_csv=labels,
                    out_dir=str(tmp_path / "out"), weights="random")
    result = export_features(job)

    manifest = load_manifest(result.manifest_path)
    values = read_feature(manifest.entries[0].feature_path)
    shape_ok = values.shape == (24, 8, 2048)

    fmap = constant(values)
    pooled = [part_pool(band, "GMP") for band in split_parts(fmap, 6)]
    _, part_max, _ = part_statistics(pooled)
    gap = float(np.abs(part_max.data - values.max(axis=(0, 1))).max())

    report("exporter: 384x128 image -> 24x8x2048 RIDF readable by the pipeline, "
           "whole-map GMP == part max (P=6)",
           shape_ok and gap < 1e-5,
           f"shape={values.shape}, max abs gap {gap:.2e}")
