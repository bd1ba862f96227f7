"""Finite-difference verification suites for the engine and the full head.

Used by the ``gradcheck`` CLI command and the acceptance tests. Inputs are
drawn with comfortable margins from relu/max ties so the central-difference
oracle stays valid at its 1e-3 step.
"""

from __future__ import annotations

import numpy as np

from .head import HeadConfig, HeadParams, multiscale_forward
from .head import feature_count as head_feature_count
from .objectives import ClassifierBank, combined_loss
from .tensor import (
    BatchNormState,
    GradCheckReport,
    Tensor,
    batchnorm,
    concat,
    constant,
    cross_entropy_logits,
    grad_check,
    linear,
    pairwise_distances,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    slice_axis,
    sub,
    walk_graph,
)


def tie_margin(loss) -> float:
    """Distance of the recorded graph from its nearest relu/max tie.

    Over all parameter-dependent relu nodes: the smallest |pre-activation|.
    Over all parameter-dependent max reductions: the smallest gap between
    the top two candidates of any reduced slice. Central differences are
    only trustworthy when this margin comfortably exceeds the step times
    the local sensitivity.
    """
    worst = np.inf
    for node in walk_graph(loss):
        if not node._parents:
            continue
        if node.op == "relu":
            worst = min(worst, float(np.abs(node._parents[0].data).min()))
        elif node.op == "max":
            parent = node._parents[0].data
            axis = next(i for i in range(parent.ndim)
                        if parent.shape[:i] + parent.shape[i + 1:] == node.data.shape)
            n = parent.shape[axis]
            if n < 2:
                continue
            ranked = np.partition(parent, (n - 2, n - 1), axis=axis)
            gap = np.take(ranked, n - 1, axis=axis) - np.take(ranked, n - 2, axis=axis)
            worst = min(worst, float(gap.min()))
    return worst


def head_gradient_check(channels: int = 64, embed_dim: int = 32, batch: int = 8,
                        parts: int = 6, height: int = 6, width: int = 2,
                        n_ids: int = 2, seed: int = 11, tolerance: float = 1e-4,
                        min_margin: float = 4e-3, max_resample: int = 1000,
                        ) -> GradCheckReport:
    """Full head forward (one scale, GCP + relation) plus combined loss,
    differentiated with respect to every trainable parameter.

    Inputs sitting within ``min_margin`` of a relu/max tie would break the
    central-difference oracle, so seeds are advanced deterministically until
    the sampled parameters and maps clear the margin.
    """
    if batch % n_ids != 0:
        raise ValueError("batch must be divisible by n_ids")
    cfg = HeadConfig(scales=(parts,), channels=channels, embed_dim=embed_dim)
    labels = np.repeat(np.arange(n_ids), batch // n_ids)

    for candidate in range(seed, seed + max_resample):
        rng = np.random.default_rng(candidate)
        params = HeadParams(cfg, rng)
        bank = ClassifierBank(embed_dim, n_ids, head_feature_count(cfg), rng)
        params.set_mode("training")
        maps = rng.standard_normal((batch, height, width, channels)).astype(np.float32)
        fmap = constant(maps)

        def build():
            feats, rep = multiscale_forward(fmap, cfg, params)
            loss, _ = combined_loss(feats, rep, labels, bank, margin=0.3, ce_weight=2.0)
            return loss

        if tie_margin(build()) > min_margin:
            leaves = dict(params.named_parameters() + bank.named_parameters())
            return grad_check(build, leaves, tolerance=tolerance)
    raise RuntimeError(f"no tie-free inputs found in {max_resample} seeds from {seed}")


def op_smoke_checks(seed: int = 5, tolerance: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    """One randomized finite-difference check per engine operation."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, GradCheckReport]] = []

    def run(name, build, leaves):
        checks.append((name, grad_check(build, leaves, tolerance=tolerance)))

    x = Tensor(rng.standard_normal((4, 5)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((5, 3)).astype(np.float32), requires_grad=True)
    b = Tensor(rng.standard_normal(3).astype(np.float32), requires_grad=True)
    run("linear", lambda: reduce_sum(linear(x, w, b)), {"x": x, "w": w, "b": b})

    bn_x = Tensor(rng.standard_normal((6, 4)).astype(np.float32), requires_grad=True)
    bn = BatchNormState.create(4)
    bn.gamma.data = rng.uniform(0.5, 1.5, 4).astype(np.float32)
    bn.beta.data = rng.standard_normal(4).astype(np.float32)
    bn.mode = "training"
    run("batchnorm(training)", lambda: reduce_sum(relu(batchnorm(bn_x, bn))),
        {"x": bn_x, "gamma": bn.gamma, "beta": bn.beta})
    bn.running_mean[...] = rng.standard_normal(4)
    bn.running_var[...] = rng.uniform(0.5, 2.0, 4)
    bn.mode = "inference"
    run("batchnorm(inference)", lambda: reduce_sum(batchnorm(bn_x, bn)),
        {"x": bn_x, "gamma": bn.gamma, "beta": bn.beta})

    # relu inputs kept away from the kink
    signs = rng.choice([-1.0, 1.0], size=(3, 4))
    r_x = Tensor((signs * rng.uniform(0.2, 1.5, (3, 4))).astype(np.float32), requires_grad=True)
    run("relu", lambda: reduce_sum(relu(r_x)), {"x": r_x})

    a = Tensor(rng.standard_normal((2, 6)).astype(np.float32), requires_grad=True)
    c = Tensor(rng.standard_normal((2, 6)).astype(np.float32), requires_grad=True)
    run("add/sub/scale", lambda: reduce_sum(scale(sub(a, c), 0.7) + a), {"a": a, "c": c})

    s_x = Tensor(rng.standard_normal((3, 8)).astype(np.float32), requires_grad=True)
    run("concat/slice/reshape",
        lambda: reduce_sum(concat([reshape(slice_axis(s_x, 1, 0, 4), (3, 4)),
                                   slice_axis(s_x, 1, 4, 8)], axis=1)),
        {"x": s_x})

    # well-separated values so the step cannot flip an argmax
    m_vals = rng.permutation(24).reshape(4, 6) + rng.uniform(-0.2, 0.2, (4, 6))
    m_x = Tensor(m_vals.astype(np.float32), requires_grad=True)
    run("reduce_max", lambda: reduce_sum(reduce_max(m_x, axis=1)), {"x": m_x})
    run("reduce_mean", lambda: reduce_sum(reduce_mean(m_x, axis=0)), {"x": m_x})

    logits = Tensor(rng.standard_normal((5, 4)).astype(np.float32), requires_grad=True)
    labels = rng.integers(0, 4, size=5)
    run("cross_entropy_logits", lambda: cross_entropy_logits(logits, labels), {"logits": logits})

    e = Tensor((rng.standard_normal((6, 3)) * 2.0).astype(np.float32), requires_grad=True)
    run("pairwise_distances", lambda: reduce_sum(reduce_max(pairwise_distances(e), axis=1)),
        {"e": e})

    return checks
