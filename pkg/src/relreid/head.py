"""Part-based retrieval head.

A backbone feature map of shape H x W x C is cut into P horizontal bands,
each band is pooled to a C-vector, and two branches turn the pooled parts
into the person representation:

  * a one-vs-rest relation branch producing one local feature per part,
    where each part is mixed with the mean of all the other parts and the
    mixed residual is added back onto the projected part;
  * a global branch, by default global contrastive pooling: the elementwise
    max over parts carries the most discriminative responses, the
    (average - max) contrast carries what the max leaves out, and a learned
    residual folds the contrast back onto the max.

The representation is the concatenation of the global feature and the local
features, optionally repeated over several part counts (scales) with
independent parameters per part and per scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import (
    BatchNormState,
    Tensor,
    batchnorm,
    concat,
    linear,
    reduce_max,
    reduce_mean,
    relu,
    reshape,
    scale,
    slice_axis,
    sub,
)

PART_POOL_MODES = ("GMP", "GAP")
GLOBAL_MODES = ("GAP", "GMP", "GAP+GMP", "GCP")


@dataclass
class HeadConfig:
    scales: tuple[int, ...] = (6,)
    channels: int = 2048          # C, backbone output channels
    embed_dim: int = 256          # c, per-feature width after reduction
    part_pool: str = "GMP"
    global_mode: str = "GCP"
    relation: bool = True
    use_global: bool = True
    use_local: bool = True

    def __post_init__(self):
        self.scales = tuple(int(p) for p in self.scales)
        if not self.scales or any(p < 1 for p in self.scales):
            raise ConfigError(f"scales must be positive part counts, got {self.scales}")
        if len(set(self.scales)) != len(self.scales):
            raise ConfigError(f"duplicate scales in {self.scales}")
        if self.embed_dim >= self.channels:
            raise ConfigError(
                f"embed_dim must be smaller than channels ({self.embed_dim} >= {self.channels})")
        if self.part_pool not in PART_POOL_MODES:
            raise ConfigError(f"unknown part pooling mode {self.part_pool!r}")
        if self.global_mode not in GLOBAL_MODES:
            raise ConfigError(f"unknown global pooling mode {self.global_mode!r}")
        if not (self.use_global or self.use_local):
            raise ConfigError("head produces no features: global and local both disabled")


def representation_dim(cfg: HeadConfig) -> int:
    per_scale = [(1 if cfg.use_global else 0) + (p if cfg.use_local else 0) for p in cfg.scales]
    return sum(per_scale) * cfg.embed_dim


def feature_count(cfg: HeadConfig) -> int:
    return representation_dim(cfg) // cfg.embed_dim


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Affine:
    w: Tensor
    b: Tensor


@dataclass
class ResidualMix:
    """Affine 2c -> c, batch norm, relu: the learned residual sub-network."""

    fc: Affine
    bn: BatchNormState


@dataclass
class PartParams:
    proj: Affine                       # C -> c for the part vector itself
    proj_rest: Affine | None = None    # C -> c for the rest-of-parts mean
    mix: ResidualMix | None = None


@dataclass
class GlobalParams:
    proj: Affine                           # C -> c for the pooled vector
    proj_contrast: Affine | None = None    # GCP only
    mix: ResidualMix | None = None         # GCP only


@dataclass
class ScaleParams:
    parts: list[PartParams] = field(default_factory=list)
    global_: GlobalParams | None = None


def _init_affine(rng: np.random.Generator, d_in: int, d_out: int) -> Affine:
    # zero-mean uniform scaled by 1/sqrt(fan_in); biases zero
    limit = 1.0 / np.sqrt(d_in)
    w = rng.uniform(-limit, limit, size=(d_in, d_out)).astype(np.float32)
    return Affine(w=Tensor(w, requires_grad=True),
                  b=Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True))


def _init_mix(rng: np.random.Generator, c: int) -> ResidualMix:
    return ResidualMix(fc=_init_affine(rng, 2 * c, c), bn=BatchNormState.create(c))


class HeadParams:
    """All learnable tensors of the head, unshared per part and per scale."""

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.scales: dict[int, ScaleParams] = {}
        C, c = cfg.channels, cfg.embed_dim
        for p_count in cfg.scales:
            sp = ScaleParams()
            if cfg.use_local:
                for _ in range(p_count):
                    part = PartParams(proj=_init_affine(rng, C, c))
                    if cfg.relation:
                        part.proj_rest = _init_affine(rng, C, c)
                        part.mix = _init_mix(rng, c)
                    sp.parts.append(part)
            if cfg.use_global:
                gp = GlobalParams(proj=_init_affine(rng, C, c))
                if cfg.global_mode == "GCP":
                    gp.proj_contrast = _init_affine(rng, C, c)
                    gp.mix = _init_mix(rng, c)
                sp.global_ = gp
            self.scales[p_count] = sp

    def _walk(self):
        """Yield (prefix, Affine | ResidualMix) in a fixed order."""
        for p_count in self.cfg.scales:
            sp = self.scales[p_count]
            for i, part in enumerate(sp.parts):
                yield f"s{p_count}.part{i}.proj", part.proj
                if part.proj_rest is not None:
                    yield f"s{p_count}.part{i}.proj_rest", part.proj_rest
                if part.mix is not None:
                    yield f"s{p_count}.part{i}.mix", part.mix
            if sp.global_ is not None:
                gp = sp.global_
                yield f"s{p_count}.global.proj", gp.proj
                if gp.proj_contrast is not None:
                    yield f"s{p_count}.global.proj_contrast", gp.proj_contrast
                if gp.mix is not None:
                    yield f"s{p_count}.global.mix", gp.mix

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, node in self._walk():
            if isinstance(node, Affine):
                out.append((f"{prefix}.w", node.w))
                out.append((f"{prefix}.b", node.b))
            else:
                out.append((f"{prefix}.fc.w", node.fc.w))
                out.append((f"{prefix}.fc.b", node.fc.b))
                out.append((f"{prefix}.bn.gamma", node.bn.gamma))
                out.append((f"{prefix}.bn.beta", node.bn.beta))
        return out

    def named_stats(self) -> list[tuple[str, np.ndarray]]:
        """Batch-norm running statistics: serialized, never optimized."""
        out = []
        for prefix, node in self._walk():
            if isinstance(node, ResidualMix):
                out.append((f"{prefix}.bn.running_mean", node.bn.running_mean))
                out.append((f"{prefix}.bn.running_var", node.bn.running_var))
        return out

    def bn_states(self) -> list[BatchNormState]:
        return [node.bn for _, node in self._walk() if isinstance(node, ResidualMix)]

    def set_mode(self, mode: str):
        if mode not in ("training", "inference"):
            raise ConfigError(f"unknown batchnorm mode {mode!r}")
        for bn in self.bn_states():
            bn.mode = mode

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        """Overwrite parameters and running stats from named arrays."""
        expected = dict(self.named_parameters())
        stats = dict(self.named_stats())
        for name, value in arrays.items():
            if name in expected:
                if expected[name].data.shape != value.shape:
                    raise ConfigError(
                        f"parameter {name}: shape {value.shape} != {expected[name].data.shape}")
                expected[name].data = value.astype(np.float32)
            elif name in stats:
                stats[name][...] = value
            else:
                raise ConfigError(f"unknown parameter {name!r} for this head configuration")
        missing = (set(expected) | set(stats)) - set(arrays)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)[:5]}...")


# ---------------------------------------------------------------------------
# forward operations


def _height_axis(fmap: Tensor) -> int:
    if fmap.data.ndim == 3:
        return 0
    if fmap.data.ndim == 4:
        return 1
    raise ConfigError(f"feature map must be [H,W,C] or [N,H,W,C], got rank {fmap.data.ndim}")


def split_parts(fmap: Tensor, parts: int) -> list[Tensor]:
    """Cut the map into ``parts`` equal horizontal bands, top to bottom."""
    axis = _height_axis(fmap)
    height = fmap.data.shape[axis]
    if height % parts != 0:
        raise ConfigError(f"part count {parts} does not divide map height {height}")
    band = height // parts
    return [slice_axis(fmap, axis, i * band, (i + 1) * band) for i in range(parts)]


def _flatten_spatial(fmap: Tensor) -> Tensor:
    shape = fmap.data.shape
    if fmap.data.ndim == 3:
        return reshape(fmap, (shape[0] * shape[1], shape[2]))
    return reshape(fmap, (shape[0], shape[1] * shape[2], shape[3]))


def part_pool(band: Tensor, mode: str = "GMP") -> Tensor:
    """Pool one band over its spatial cells, per channel."""
    flat = _flatten_spatial(band)
    axis = flat.data.ndim - 2
    if mode == "GMP":
        return reduce_max(flat, axis)
    if mode == "GAP":
        return reduce_mean(flat, axis)
    raise ConfigError(f"unknown part pooling mode {mode!r}")


def one_vs_rest(parts: list[Tensor]) -> list[Tensor]:
    """For each part, the mean of all the other parts.

    Computed as (total - part) / (P - 1), so the reconstruction identity
    (P-1) * rest_i + part_i == total holds up to rounding.
    """
    p = len(parts)
    if p < 2:
        raise ValueError(f"one-vs-rest needs at least 2 parts, got {p}")
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return [scale(sub(total, part), 1.0 / (p - 1)) for part in parts]


def _stack_parts(parts: list[Tensor]) -> tuple[Tensor, int]:
    """Stack part vectors along a new axis just before the channel axis."""
    nd = parts[0].data.ndim
    axis = nd - 1
    shape = list(parts[0].data.shape)
    shape.insert(axis, 1)
    return concat([reshape(p, tuple(shape)) for p in parts], axis), axis


def part_statistics(parts: list[Tensor], stacked: Tensor | None = None,
                    ) -> tuple[Tensor, Tensor, Tensor]:
    """(average, maximum, contrast) over the part vectors, per channel.

    The contrast (average minus maximum) is computed as the mean of the
    per-part gaps (p_i - max): algebraically the same, but each gap is a
    difference of floats that is exactly zero for identical parts and never
    positive, so the sign and the degenerate case survive rounding.

    ``stacked`` may pass the parts already stacked along the axis before the
    channel axis, saving the restacking.
    """
    if stacked is None:
        stacked, axis = _stack_parts(parts)
    else:
        axis = stacked.data.ndim - 2
    avg = reduce_mean(stacked, axis)
    mx = reduce_max(stacked, axis)
    total_gap = None
    for p in parts:
        gap = sub(p, mx)
        total_gap = gap if total_gap is None else total_gap + gap
    return avg, mx, scale(total_gap, 1.0 / len(parts))


def _pool_all_parts(fmap: Tensor, parts: int, mode: str) -> tuple[list[Tensor], Tensor]:
    """Pool every band of a batch [N,H,W,C] in one fused reduction.

    Equivalent to split_parts + part_pool per band (same values, same
    argmax tie-break: the band rows stay in row-major order), but a single
    graph node does the reduction. Returns the per-part vectors and the
    stacked [N,P,C] tensor they were sliced from.
    """
    n, h, w, c = fmap.data.shape
    if h % parts != 0:
        raise ConfigError(f"part count {parts} does not divide map height {h}")
    band = h // parts
    grouped = reshape(fmap, (n, parts, band * w, c))
    if mode == "GMP":
        stacked = reduce_max(grouped, 2)
    elif mode == "GAP":
        stacked = reduce_mean(grouped, 2)
    else:
        raise ConfigError(f"unknown part pooling mode {mode!r}")
    pooled = [reshape(slice_axis(stacked, 1, i, i + 1), (n, c)) for i in range(parts)]
    return pooled, stacked


def relation_feature(part: Tensor, rest: Tensor, prm: PartParams) -> Tensor:
    """One local relational feature: projected part plus mixed residual."""
    if prm.proj_rest is None or prm.mix is None:
        raise ConfigError("relation_feature needs relation parameters (relation disabled?)")
    reduced = linear(part, prm.proj.w, prm.proj.b)
    reduced_rest = linear(rest, prm.proj_rest.w, prm.proj_rest.b)
    joint = concat([reduced, reduced_rest], axis=reduced.data.ndim - 1)
    residual = relu(batchnorm(linear(joint, prm.mix.fc.w, prm.mix.fc.b), prm.mix.bn))
    return reduced + residual


def contrastive_pool(parts: list[Tensor], prm: GlobalParams,
                     stacked: Tensor | None = None) -> Tensor:
    """Global contrastive feature from the pooled parts."""
    if prm.proj_contrast is None or prm.mix is None:
        raise ConfigError("contrastive_pool needs contrast parameters")
    _, mx, contrast = part_statistics(parts, stacked=stacked)
    reduced_max = linear(mx, prm.proj.w, prm.proj.b)
    reduced_contrast = linear(contrast, prm.proj_contrast.w, prm.proj_contrast.b)
    joint = concat([reduced_max, reduced_contrast], axis=reduced_max.data.ndim - 1)
    residual = relu(batchnorm(linear(joint, prm.mix.fc.w, prm.mix.fc.b), prm.mix.bn))
    return reduced_max + residual


def global_variant(fmap: Tensor, parts: list[Tensor], mode: str, prm: GlobalParams,
                   stacked: Tensor | None = None) -> Tensor:
    """One of the global pooling variants, reduced to the embedding width."""
    if mode == "GCP":
        return contrastive_pool(parts, prm, stacked=stacked)
    flat = _flatten_spatial(fmap)
    axis = flat.data.ndim - 2
    if mode == "GAP":
        pooled = reduce_mean(flat, axis)
    elif mode == "GMP":
        pooled = reduce_max(flat, axis)
    elif mode == "GAP+GMP":
        pooled = reduce_mean(flat, axis) + reduce_max(flat, axis)
    else:
        raise ConfigError(f"unknown global pooling mode {mode!r}")
    return linear(pooled, prm.proj.w, prm.proj.b)


def forward(fmap: Tensor, cfg: HeadConfig, params: HeadParams, parts: int,
            ) -> tuple[list[Tensor], Tensor]:
    """Run one scale of the head over a batch of maps [N,H,W,C].

    Returns the feature list (global first when enabled, then the local
    features top to bottom) and their concatenation.
    """
    if fmap.data.ndim != 4:
        raise ConfigError(f"forward expects a batch [N,H,W,C], got shape {fmap.data.shape}")
    if fmap.data.shape[3] != cfg.channels:
        raise ConfigError(
            f"feature map has {fmap.data.shape[3]} channels, head expects {cfg.channels}")
    if parts not in params.scales:
        raise ConfigError(f"no parameters for scale {parts}; configured scales {cfg.scales}")
    sp = params.scales[parts]

    pooled = stacked = None
    if cfg.use_local or cfg.global_mode == "GCP":
        pooled, stacked = _pool_all_parts(fmap, parts, cfg.part_pool)

    features: list[Tensor] = []
    if cfg.use_global:
        features.append(global_variant(fmap, pooled, cfg.global_mode, sp.global_,
                                       stacked=stacked))
    if cfg.use_local:
        if cfg.relation:
            rests = one_vs_rest(pooled)
            features.extend(relation_feature(pooled[i], rests[i], sp.parts[i])
                            for i in range(parts))
        else:
            features.extend(linear(pooled[i], sp.parts[i].proj.w, sp.parts[i].proj.b)
                            for i in range(parts))
    return features, concat(features, axis=1)


def multiscale_forward(fmap: Tensor, cfg: HeadConfig, params: HeadParams,
                       ) -> tuple[list[Tensor], Tensor]:
    """Run every configured scale and concatenate the representations."""
    features: list[Tensor] = []
    reps = []
    for p_count in cfg.scales:
        fs, rep = forward(fmap, cfg, params, p_count)
        features.extend(fs)
        reps.append(rep)
    return features, (reps[0] if len(reps) == 1 else concat(reps, axis=1))
