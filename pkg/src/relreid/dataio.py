"""Binary interchange formats and dataset manifests.

All multi-byte values are little-endian; all payloads are float32. Three
magics share the same conventions:

  RIDF  feature maps     magic, version u32, H/W/C u32, then H*W*C floats
                         in row-major order ((h*W + w)*C + c)
  RIDC  checkpoints      magic, version u32, record count u32, records of
                         {name: u32 length + UTF-8, rank u32, dims u32[rank],
                         float32 values}, then a u32-length-prefixed UTF-8
                         JSON config blob, then the epoch as u32
  RIDE  embeddings       magic, count u32, dim u32, float32 rows; metadata
                         (ids, person/camera ids, split, config) lives in a
                         JSON sidecar next to the file

Readers locate errors by byte offset; writers refuse non-finite values.
Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ManifestError

FEATURE_MAGIC = b"RIDF"
CHECKPOINT_MAGIC = b"RIDC"
EMBEDDING_MAGIC = b"RIDE"
FORMAT_VERSION = 1

SPLITS = ("train", "query", "gallery")


def worker_count() -> int:
    """Worker cap from RRID_THREADS (0 or unset = one per CPU)."""
    raw = os.environ.get("RRID_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"RRID_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise ValueError(f"RRID_THREADS must be >= 0, got {n}")
    return n if n > 0 else (os.cpu_count() or 1)


def _read_exact(fh, n: int, what: str) -> bytes:
    offset = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}", offset=offset + len(buf))
    return buf


# ---------------------------------------------------------------------------
# feature maps


def write_feature(path: str, values: np.ndarray):
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 3:
        raise ValueError(f"feature map must be H x W x C, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise ValueError(f"refusing to write non-finite feature values to {path}")
    h, w, c = values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, h, w, c))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_feature(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}", offset=0)
        version, h, w, c = struct.unpack("<IIII", _read_exact(fh, 16, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}", offset=4)
        payload = _read_exact(fh, 4 * h * w * c, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()


# ---------------------------------------------------------------------------
# embeddings


def write_embeddings(path: str, matrix: np.ndarray, metadata: dict):
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got shape {matrix.shape}")
    count, dim = matrix.shape
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", count, dim))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(metadata, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_embeddings(path: str) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != EMBEDDING_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}", offset=0)
        count, dim = struct.unpack("<II", _read_exact(fh, 8, "header"))
        payload = _read_exact(fh, 4 * count * dim, "payload")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()
    side = sidecar_path(path)
    if not os.path.exists(side):
        raise FormatError(f"missing embedding sidecar {side}")
    with open(side, "r", encoding="utf-8") as fh:
        metadata = json.load(fh)
    return matrix, metadata


def sidecar_path(path: str) -> str:
    return path + ".json"


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, records: dict[str, np.ndarray], config_doc: dict, epoch: int):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(records)))
        for name, values in records.items():
            encoded = name.encode("utf-8")
            values = np.asarray(values, dtype=np.float32)
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", values.ndim))
            fh.write(struct.pack(f"<{values.ndim}I", *values.shape))
            fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
        blob = json.dumps(config_doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", epoch))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict, int]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}", offset=4)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        records: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            n = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 4 * n, f"values of {name}")
            records[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config_doc = json.loads(_read_exact(fh, blob_len, "config blob").decode("utf-8"))
        (epoch,) = struct.unpack("<I", _read_exact(fh, 4, "epoch"))
    return records, config_doc, epoch


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    id: str
    feature_path: str    # resolved, absolute or relative to cwd
    person_id: int
    camera_id: int
    split: str


class Manifest:
    def __init__(self, entries: list[ManifestEntry]):
        self.entries = entries
        self.by_split: dict[str, list[int]] = {s: [] for s in SPLITS}
        for i, e in enumerate(entries):
            self.by_split[e.split].append(i)
        train_pids = sorted({entries[i].person_id for i in self.by_split["train"]})
        # dense labels for classifier sizing
        self.train_label_map: dict[int, int] = {pid: k for k, pid in enumerate(train_pids)}

    def counts(self) -> dict[str, int]:
        return {s: len(ix) for s, ix in self.by_split.items()}

    def split_entries(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [self.entries[i] for i in self.by_split[split]]

    def train_groups(self) -> dict[int, list[int]]:
        """person_id -> indices into entries, train split only."""
        groups: dict[int, list[int]] = {}
        for i in self.by_split["train"]:
            groups.setdefault(self.entries[i].person_id, []).append(i)
        return groups


_REQUIRED_FIELDS = {"id": str, "feature_path": str, "person_id": int, "camera_id": int, "split": str}


def load_manifest(path: str) -> Manifest:
    """Parse a JSON Lines manifest, validating every entry.

    Feature paths are resolved relative to the manifest's directory and must
    exist. Errors carry the 1-based line number.
    """
    base = os.path.dirname(os.path.abspath(path))
    entries: list[ManifestEntry] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                doc = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON: {e.msg}", line=lineno) from e
            if not isinstance(doc, dict):
                raise ManifestError("entry must be a JSON object", line=lineno)
            for field_name, typ in _REQUIRED_FIELDS.items():
                if field_name not in doc:
                    raise ManifestError(f"missing field {field_name!r}", line=lineno)
                value = doc[field_name]
                if not isinstance(value, typ) or isinstance(value, bool):
                    raise ManifestError(
                        f"field {field_name!r} must be {typ.__name__}", line=lineno)
            extra = set(doc) - set(_REQUIRED_FIELDS)
            if extra:
                raise ManifestError(f"unknown fields {sorted(extra)}", line=lineno)
            if doc["split"] not in SPLITS:
                raise ManifestError(f"unknown split tag {doc['split']!r}", line=lineno)
            if doc["id"] in seen_ids:
                raise ManifestError(f"duplicate id {doc['id']!r}", line=lineno)
            seen_ids.add(doc["id"])
            resolved = os.path.join(base, doc["feature_path"])
            if not os.path.exists(resolved):
                raise ManifestError(f"feature path {doc['feature_path']!r} does not resolve",
                                    line=lineno)
            if doc["split"] == "train" and doc["person_id"] < 0:
                raise ManifestError("train entries cannot carry the junk person_id -1",
                                    line=lineno)
            entries.append(ManifestEntry(id=doc["id"], feature_path=resolved,
                                         person_id=doc["person_id"],
                                         camera_id=doc["camera_id"], split=doc["split"]))
    return Manifest(entries)
