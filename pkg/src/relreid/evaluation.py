"""Embedding extraction, Euclidean ranking, CMC/mAP, and the ablation grid.

The protocol is the standard single-query one: for each query, gallery
entries sharing both its person id and camera id are excluded, junk entries
(person_id -1) are excluded, the remainder is ranked by ascending distance
with ties broken by gallery index, and queries left with no relevant entry
are dropped from both metrics. AP averages precision at the relevant ranks
without interpolation.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass

import numpy as np

from . import dataio
from .config import RunConfig
from .errors import ConfigError
from .head import HeadParams, multiscale_forward, representation_dim
from .tensor import ShapeError, constant, no_grad


@dataclass
class EmbeddingSet:
    ids: list[str]
    features: np.ndarray          # one row per image
    person_ids: np.ndarray
    camera_ids: np.ndarray
    split: str


def embed_all(cfg: RunConfig, params: HeadParams, manifest: dataio.Manifest, split: str,
              batch_size: int = 64) -> EmbeddingSet:
    """One representation per manifest row of the split, in manifest order."""
    entries = manifest.split_entries(split)
    params.set_mode("inference")
    dim = representation_dim(cfg.head)
    features = np.zeros((len(entries), dim), dtype=np.float32)

    def load(entry: dataio.ManifestEntry) -> np.ndarray:
        values = dataio.read_feature(entry.feature_path)
        h, _, c = values.shape
        if c != cfg.head.channels:
            raise ConfigError(
                f"{entry.feature_path}: {c} channels, head expects {cfg.head.channels}")
        for p in cfg.head.scales:
            if h % p != 0:
                raise ConfigError(
                    f"{entry.feature_path}: height {h} not divisible by scale {p}")
        return values

    workers = dataio.worker_count()
    pool = (concurrent.futures.ThreadPoolExecutor(max_workers=workers)
            if workers > 1 and len(entries) > 1 else None)
    try:
        for start in range(0, len(entries), batch_size):
            chunk = entries[start:start + batch_size]
            maps = list(pool.map(load, chunk)) if pool else [load(e) for e in chunk]
            with no_grad():
                _, rep = multiscale_forward(constant(np.stack(maps)), cfg.head, params)
            features[start:start + len(chunk)] = rep.data
    finally:
        if pool:
            pool.shutdown()

    return EmbeddingSet(
        ids=[e.id for e in entries],
        features=features,
        person_ids=np.asarray([e.person_id for e in entries], dtype=np.int64),
        camera_ids=np.asarray([e.camera_id for e in entries], dtype=np.int64),
        split=split,
    )


def distance_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Unsquared Euclidean distances, float64, row-by-row from differences."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if queries.ndim != 2 or gallery.ndim != 2 or queries.shape[1] != gallery.shape[1]:
        raise ShapeError(f"embedding lengths disagree: {queries.shape} vs {gallery.shape}")
    out = np.empty((queries.shape[0], gallery.shape[0]), dtype=np.float64)
    for i in range(queries.shape[0]):
        diff = gallery - queries[i]
        out[i] = np.sqrt(np.einsum("nd,nd->n", diff, diff))
    return out


@dataclass
class EvalResult:
    map_score: float
    cmc: np.ndarray               # rank-1..rank-K accuracies
    per_query_ap: list[float]
    n_valid_queries: int

    def to_dict(self, config: dict | None = None) -> dict:
        doc = {
            "mAP": self.map_score,
            "cmc": [float(v) for v in self.cmc],
            "n_valid_queries": self.n_valid_queries,
        }
        if config is not None:
            doc["config"] = config
        return doc


def evaluate(dist: np.ndarray, query_pids, query_cams, gallery_pids, gallery_cams,
             max_rank: int = 50) -> EvalResult:
    """Single-query CMC and mAP with the cross-camera and junk filters."""
    dist = np.asarray(dist, dtype=np.float64)
    query_pids = np.asarray(query_pids)
    query_cams = np.asarray(query_cams)
    gallery_pids = np.asarray(gallery_pids)
    gallery_cams = np.asarray(gallery_cams)
    n_q, n_g = dist.shape
    if query_pids.shape != (n_q,) or query_cams.shape != (n_q,):
        raise ShapeError(f"query metadata does not align with distance rows ({n_q})")
    if gallery_pids.shape != (n_g,) or gallery_cams.shape != (n_g,):
        raise ShapeError(f"gallery metadata does not align with distance columns ({n_g})")

    cmc_hits = np.zeros(max_rank, dtype=np.float64)
    aps: list[float] = []
    for q in range(n_q):
        keep = ~((gallery_pids == query_pids[q]) & (gallery_cams == query_cams[q]))
        keep &= gallery_pids != -1
        if not keep.any():
            continue
        order = np.argsort(dist[q, keep], kind="stable")  # ties by gallery index
        relevant = (gallery_pids[keep][order] == query_pids[q])
        n_rel = int(relevant.sum())
        if n_rel == 0:
            continue  # invalid query: no cross-camera match in the gallery
        hits = np.flatnonzero(relevant)
        precision = (np.arange(1, len(hits) + 1)) / (hits + 1.0)
        aps.append(float(precision.sum() / n_rel))
        first = hits[0]
        if first < max_rank:
            cmc_hits[first:] += 1.0

    n_valid = len(aps)
    if n_valid == 0:
        return EvalResult(0.0, np.zeros(max_rank), [], 0)
    return EvalResult(float(np.mean(aps)), cmc_hits / n_valid, aps, n_valid)


def evaluate_sets(queries: EmbeddingSet, gallery: EmbeddingSet, max_rank: int = 50) -> EvalResult:
    dist = distance_matrix(queries.features, gallery.features)
    return evaluate(dist, queries.person_ids, queries.camera_ids,
                    gallery.person_ids, gallery.camera_ids, max_rank)


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class AblationRow:
    use_global: bool
    use_local: bool
    relation: bool
    multiscale: bool
    global_pool: str              # "-" when the global feature is off
    part_pool: str                # "-" when local features are off
    fdim: int = 0
    map_score: float = 0.0
    rank1: float = 0.0


def default_grid() -> list[AblationRow]:
    """Baselines plus the full {global pooling} x {relation} x {scales} cross."""
    rows = [
        AblationRow(True, False, False, False, "GAP", "-"),
        AblationRow(False, True, False, False, "-", "GAP"),
    ]
    for multiscale in (False, True):
        for rel in (False, True):
            for mode in ("GAP", "GMP", "GAP+GMP", "GCP"):
                rows.append(AblationRow(True, True, rel, multiscale, mode, "GMP"))
    return rows


def _variant_config(base: RunConfig, row: AblationRow) -> RunConfig:
    doc = base.to_dict()
    doc.update({
        "use_global": row.use_global,
        "use_local": row.use_local,
        "relation": row.relation,
        "parts": [2, 4, 6] if row.multiscale else [6],
        "global_mode": row.global_pool if row.use_global else "GCP",
        "part_pool": row.part_pool if row.use_local else "GMP",
    })
    return RunConfig.from_dict(doc)


def ablation_run(base: RunConfig, manifest: dataio.Manifest,
                 grid: list[AblationRow] | None = None, max_rank: int = 50) -> list[AblationRow]:
    """Train and evaluate every grid variant with the base config's seed."""
    from .training import train

    rows = grid if grid is not None else default_grid()
    for row in rows:
        cfg = _variant_config(base, row)
        result = train(cfg, manifest, out_path=None)
        row.fdim = representation_dim(cfg.head)
        queries = embed_all(cfg, result.params, manifest, "query")
        gallery = embed_all(cfg, result.params, manifest, "gallery")
        scored = evaluate_sets(queries, gallery, max_rank)
        row.map_score = scored.map_score
        row.rank1 = float(scored.cmc[0]) if len(scored.cmc) else 0.0
    return rows


def render_ablation_table(rows: list[AblationRow]) -> str:
    def mark(flag: bool) -> str:
        return "x" if flag else " "

    header = (f"{'GF':<3}{'LF':<3}{'RM':<3}{'Ext':<4}"
              f"{'GF-pool':<9}{'LF-pool':<9}{'F-dim':>6}  {'mAP':>7}  {'rank-1':>7}")
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{mark(r.use_global):<3}{mark(r.use_local):<3}{mark(r.relation):<3}"
            f"{mark(r.multiscale):<4}{r.global_pool if r.use_global else '-':<9}"
            f"{r.part_pool if r.use_local else '-':<9}{r.fdim:>6}  "
            f"{r.map_score:>7.4f}  {r.rank1:>7.4f}")
    return "\n".join(lines) + "\n"


def ablation_rows_to_dicts(rows: list[AblationRow]) -> list[dict]:
    return [{
        "gf": r.use_global, "lf": r.use_local, "rm": r.relation, "ext": r.multiscale,
        "gf_pool": r.global_pool if r.use_global else "-",
        "lf_pool": r.part_pool if r.use_local else "-",
        "fdim": r.fdim, "mAP": r.map_score, "rank1": r.rank1,
    } for r in rows]
