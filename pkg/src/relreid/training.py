"""Identity-balanced sampling, SGD with momentum, and the training loop.

Batches hold n_k identities with n_m images each. The optimizer is classic
momentum SGD with the weight decay added to the gradient before the
velocity update; batch-norm running statistics are not parameters and are
never touched by it. The learning rate stays at its base value through the
schedule's start epoch and is then multiplied by the decay factor once per
period. Given a seed, the whole run is deterministic down to the checkpoint
bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import dataio
from .config import DecaySchedule, RunConfig, TrainConfig
from .errors import ConfigError
from .head import HeadParams, feature_count, multiscale_forward
from .objectives import ClassifierBank, combined_loss
from .tensor import ShapeError, Tensor, constant

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# sampling and schedule


def pk_sample(groups: dict[int, list[int]], n_k: int, n_m: int,
              rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Choose n_k identities and n_m images each; returns (indices, person_ids).

    Identities are drawn uniformly without replacement. Images are drawn
    without replacement when the identity has at least n_m of them,
    otherwise with replacement.
    """
    ids = sorted(groups)
    if len(ids) < n_k:
        raise ValueError(f"need at least {n_k} identities to sample, found {len(ids)}")
    chosen = rng.choice(np.asarray(ids), size=n_k, replace=False)
    indices: list[int] = []
    pids: list[int] = []
    for pid in chosen.tolist():
        pool = groups[pid]
        replace = len(pool) < n_m
        picks = rng.choice(len(pool), size=n_m, replace=replace)
        indices.extend(pool[k] for k in picks.tolist())
        pids.extend([pid] * n_m)
    return indices, pids


def lr_at(epoch: int, schedule: DecaySchedule, base_lr: float) -> float:
    """Learning rate for a 1-based epoch under the step-decay schedule."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    if epoch <= schedule.start_epoch:
        return base_lr
    steps = (epoch - schedule.start_epoch - 1) // schedule.period + 1
    return base_lr * schedule.factor ** steps


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def sgd_step(named_params: list[tuple[str, Tensor]], grads: dict[str, np.ndarray],
             state: OptimizerState, lr: float, momentum: float, weight_decay: float):
    """v <- momentum*v + g + weight_decay*w; w <- w - lr*v (in place)."""
    for name, param in named_params:
        g = np.asarray(grads[name], dtype=param.data.dtype)
        if g.shape != param.data.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, "
                             f"parameter has {param.data.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(param.data)
        v = momentum * v + g + weight_decay * param.data
        param.data = param.data - lr * v
        state.velocity[name] = v
    state.step_count += 1


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: HeadParams
    bank: ClassifierBank
    history: list[dict]
    checkpoint_path: str | None
    n_classes: int


class FeatureCache:
    """Loads feature files once, validating dimensions against the head."""

    def __init__(self, manifest: dataio.Manifest, channels: int, scales: tuple[int, ...]):
        self.manifest = manifest
        self.channels = channels
        self.scales = scales
        self._maps: dict[int, np.ndarray] = {}

    def load(self, index: int) -> np.ndarray:
        cached = self._maps.get(index)
        if cached is not None:
            return cached
        entry = self.manifest.entries[index]
        values = dataio.read_feature(entry.feature_path)
        h, _, c = values.shape
        if c != self.channels:
            raise ConfigError(f"{entry.feature_path}: {c} channels, head expects {self.channels}")
        for p in self.scales:
            if h % p != 0:
                raise ConfigError(f"{entry.feature_path}: height {h} not divisible by scale {p}")
        self._maps[index] = values
        return values

    def batch(self, indices: list[int]) -> np.ndarray:
        return np.stack([self.load(i) for i in indices])


def rng_digest(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha256(state.encode("utf-8")).hexdigest()


def checkpoint_records(params: HeadParams, bank: ClassifierBank) -> dict[str, np.ndarray]:
    records = {name: t.data for name, t in params.named_parameters()}
    records.update({name: arr for name, arr in params.named_stats()})
    records.update({name: t.data for name, t in bank.named_parameters()})
    return records


def save_trained(path: str, params: HeadParams, bank: ClassifierBank, cfg: RunConfig,
                 epoch: int, digest: str):
    doc = {"config": cfg.to_dict(), "n_classes": bank.n_classes, "rng_digest": digest}
    dataio.save_checkpoint(path, checkpoint_records(params, bank), doc, epoch)


def load_trained(path: str) -> tuple[RunConfig, HeadParams, ClassifierBank, int]:
    records, doc, epoch = dataio.load_checkpoint(path)
    cfg = RunConfig.from_dict(doc["config"])
    n_classes = int(doc["n_classes"])
    rng = np.random.default_rng(0)  # structure only; values overwritten below
    params = HeadParams(cfg.head, rng)
    bank = ClassifierBank(cfg.head.embed_dim, n_classes, feature_count(cfg.head), rng)
    head_names = {name for name, _ in params.named_parameters()}
    head_names.update(name for name, _ in params.named_stats())
    params.load_arrays({k: v for k, v in records.items() if k in head_names})
    bank.load_arrays({k: v for k, v in records.items() if k not in head_names})
    return cfg, params, bank, epoch


def train(cfg: RunConfig, manifest: dataio.Manifest, out_path: str | None = None) -> TrainResult:
    """Run the full training recipe; deterministic for a fixed seed."""
    tc: TrainConfig = cfg.train
    groups = manifest.train_groups()
    n_train = len(manifest.by_split["train"])
    if n_train == 0:
        raise ConfigError("manifest has no train split")
    if len(groups) < tc.n_k:
        raise ConfigError(f"train split has {len(groups)} identities, need n_k={tc.n_k}")

    cache = FeatureCache(manifest, cfg.head.channels, cfg.head.scales)
    # surface dataset/config violations before the first step
    cache.load(manifest.by_split["train"][0])

    rng = np.random.default_rng(tc.seed)
    params = HeadParams(cfg.head, rng)
    bank = ClassifierBank(cfg.head.embed_dim, len(groups), feature_count(cfg.head), rng)
    named = params.named_parameters() + bank.named_parameters()
    state = OptimizerState()
    label_map = manifest.train_label_map

    batches_per_epoch = math.ceil(n_train / tc.batch_size)
    history: list[dict] = []
    params.set_mode("training")
    for epoch in range(1, tc.epochs + 1):
        lr = lr_at(epoch, tc.decay, tc.lr)
        sums = {"total": 0.0, "triplet": 0.0, "cross_entropy": 0.0}
        for _ in range(batches_per_epoch):
            indices, pids = pk_sample(groups, tc.n_k, tc.n_m, rng)
            labels = np.asarray([label_map[p] for p in pids], dtype=np.int64)
            fmap = constant(cache.batch(indices))
            feats, rep = multiscale_forward(fmap, cfg.head, params)
            loss, terms = combined_loss(feats, rep, labels, bank, tc.margin, tc.ce_weight)
            if not np.isfinite(terms["total"]):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}: {terms}")
            loss.backward()
            grads = {}
            for name, t in named:
                if t.grad is None:
                    raise RuntimeError(f"parameter {name} received no gradient")
                grads[name] = t.grad
                t.grad = None
            sgd_step(named, grads, state, lr, tc.momentum, tc.weight_decay)
            for key in sums:
                sums[key] += terms[key]
        record = {"epoch": epoch, "lr": lr}
        record.update({k: sums[k] / batches_per_epoch for k in sums})
        history.append(record)
        log.info("epoch %3d  lr %.2e  loss %.4f (triplet %.4f, ce %.4f)",
                 epoch, lr, record["total"], record["triplet"], record["cross_entropy"])

    checkpoint_path = None
    if out_path is not None:
        save_trained(out_path, params, bank, cfg, tc.epochs, rng_digest(rng))
        checkpoint_path = out_path
    return TrainResult(params=params, bank=bank, history=history,
                       checkpoint_path=checkpoint_path, n_classes=len(groups))
