"""Dense tensors with reverse-mode differentiation.

Deliberately small: exactly the operations the retrieval head, the losses
and the optimizer need. Values are float32 by default; gradient checking
promotes to float64 copies so the finite-difference oracle stays sharp.

The computation graph is recorded implicitly: every result tensor keeps its
operand tensors and a globally increasing sequence number. ``backward()``
visits the recorded nodes in exact reverse sequence order, so gradients are
bit-deterministic for a fixed graph. Leaf tensors are the ones created
directly with ``requires_grad=True``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


_seq = itertools.count()

# When False, operations compute values but record nothing. Used by the
# finite-difference loop where thousands of throwaway forwards are run.
_grad_enabled = True


class no_grad:
    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def backward(self):
        """Populate ``.grad`` on every ancestor, leaves included.

        The loss must be a scalar (shape ``()``). Nodes are processed in
        exact reverse recording order, which is a valid topological order
        and is the same on every run.
        """
        if self.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {self.data.shape}")
        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._seq not in nodes:
                nodes[t._seq] = t
                stack.extend(t._parents)
        for t in nodes.values():
            if t._backward is not None:
                t.grad = None
        self.grad = np.ones((), dtype=self.data.dtype)
        for s in sorted(nodes, reverse=True):
            t = nodes[s]
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def walk_graph(loss: Tensor) -> list[Tensor]:
    """All recorded ancestors of ``loss`` (itself included), any order."""
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._seq not in nodes:
            nodes[t._seq] = t
            stack.extend(t._parents)
    return list(nodes.values())


def _accum(t: Tensor, g: np.ndarray):
    t.grad = g if t.grad is None else t.grad + g


def _result(data, op, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn()
    else:
        out.requires_grad = False
        out.op = op
        out._parents = ()
        out._backward = None
    return out


def constant(data, dtype=None) -> Tensor:
    """Wrap an array as a non-trainable graph input."""
    if dtype is None:
        dtype = data.dtype if isinstance(data, np.ndarray) else np.float32
    return Tensor(data, requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")

    def bw():
        def run(g):
            _accum(a, g)
            _accum(b, g)
        return run

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes differ: {a.data.shape} vs {b.data.shape}")

    def bw():
        def run(g):
            _accum(a, g)
            _accum(b, -g)
        return run

    return _result(a.data - b.data, "sub", (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw():
        def run(g):
            _accum(x, g * s)
        return run

    return _result(x.data * np.asarray(s, dtype=x.data.dtype), "scale", (x,), bw)


def relu(x: Tensor) -> Tensor:
    def bw():
        def run(g):
            _accum(x, g * (x.data > 0))
        return run

    return _result(np.maximum(x.data, 0), "relu", (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape

    def bw():
        def run(g):
            _accum(x, g.reshape(old))
        return run

    return _result(x.data.reshape(shape), "reshape", (x,), bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis (a view of x)."""
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"slice axis {axis} invalid for rank {x.data.ndim}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw():
        def run(g):
            full = np.zeros_like(x.data)
            full[idx] = g
            _accum(x, full)
        return run

    return _result(x.data[idx], "slice", (x,), bw)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty list")
    datas = [p.data for p in parts]

    def bw():
        offsets = np.cumsum([0] + [d.shape[axis] for d in datas])

        def run(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(p, g[tuple(idx)])
        return run

    return _result(np.concatenate(datas, axis=axis), "concat", parts, bw)


# ---------------------------------------------------------------------------
# reductions


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max over one axis. The gradient flows to the single argmax element
    per reduced slice; ties go to the lowest flat index."""
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"reduction axis {axis} invalid for rank {x.data.ndim}")

    def bw():
        amax = np.expand_dims(np.argmax(x.data, axis=axis), axis)

        def run(g):
            full = np.zeros_like(x.data)
            np.put_along_axis(full, amax, np.expand_dims(g, axis), axis)
            _accum(x, full)
        return run

    return _result(x.data.max(axis=axis), "max", (x,), bw)


def reduce_mean(x: Tensor, axis: int) -> Tensor:
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"reduction axis {axis} invalid for rank {x.data.ndim}")
    n = x.data.shape[axis]

    def bw():
        def run(g):
            _accum(x, np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape).copy())
        return run

    return _result(x.data.mean(axis=axis), "mean", (x,), bw)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar."""

    def bw():
        def run(g):
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
        return run

    return _result(np.sum(x.data), "sum", (x,), bw)


# ---------------------------------------------------------------------------
# affine map and batch normalization


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``out[n, j] = sum_i x[n, i] * w[i, j] + b[j]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"linear wants x[N,d_in], w[d_in,d_out], b[d_out]; got "
            f"{x.data.shape}, {w.data.shape}, {b.data.shape}")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"linear dimensions disagree: x {x.data.shape} vs w {w.data.shape} vs b {b.data.shape}")

    def bw():
        def run(g):
            _accum(x, g @ w.data.T)
            _accum(w, x.data.T @ g)
            _accum(b, g.sum(axis=0))
        return run

    out = x.data @ w.data
    out += b.data
    return _result(out, "linear", (x, w, b), bw)


@dataclass
class BatchNormState:
    """Per-channel batch normalization parameters and running statistics.

    ``gamma``/``beta`` are trainable leaves; the running statistics are
    plain arrays updated only in training mode and never touched by the
    optimizer. Inference output depends on the running statistics alone,
    making it an affine per-channel function of the input.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "training"

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=np.float32), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True),
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """Normalize per channel, then scale/shift by gamma/beta.

    Training mode uses batch statistics (biased variance) and updates the
    running statistics; inference mode uses the running statistics only.
    A single-row training batch has zero variance, so the output is beta.
    Under ``no_grad()`` the running statistics are left untouched, so
    throwaway forwards (finite differences) do not drift the state.
    """
    if x.data.ndim != 2 or x.data.shape[1] != state.gamma.data.shape[0]:
        raise ShapeError(
            f"batchnorm wants x[N,{state.gamma.data.shape[0]}], got {x.data.shape}")
    gamma, beta = state.gamma, state.beta
    eps = state.epsilon

    if state.mode == "training":
        n = x.data.shape[0]
        if n < 2:
            warnings.warn("batchnorm over a single-row batch: variance is zero, output equals beta")
        mu = x.data.mean(axis=0)
        centered = x.data - mu
        var = np.einsum("nc,nc->c", centered, centered) / n
        inv = 1.0 / np.sqrt(var + eps)
        if not _grad_enabled:
            # Throwaway forward (finite differences, inference sweeps):
            # skip graph bookkeeping and leave the running stats alone.
            out = centered * (gamma.data * inv)
            out += beta.data
            return _result(out, "batchnorm", (), None)
        xhat = centered * inv
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu
        state.running_var[...] = (1 - m) * state.running_var + m * var

        def bw():
            def run(g):
                dxhat = g * gamma.data
                _accum(gamma, (g * xhat).sum(axis=0))
                _accum(beta, g.sum(axis=0))
                _accum(x, (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)))
            return run

        return _result(gamma.data * xhat + beta.data, "batchnorm", (x, gamma, beta), bw)

    if state.mode == "inference":
        inv = 1.0 / np.sqrt(state.running_var + eps)
        centered = x.data - state.running_mean

        def bw():
            def run(g):
                _accum(x, g * (gamma.data * inv))
                _accum(gamma, (g * centered * inv).sum(axis=0))
                _accum(beta, g.sum(axis=0))
            return run

        return _result(gamma.data * centered * inv + beta.data, "batchnorm", (x, gamma, beta), bw)

    raise ValueError(f"unknown batchnorm mode {state.mode!r}")


# ---------------------------------------------------------------------------
# fused loss kernels


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Summed softmax cross-entropy, ``-sum_n log softmax(logits[n])[labels[n]]``.

    Fused for numerical stability; the backward is the usual
    softmax-minus-onehot form.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_logits wants [N,K] logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = np.sum(lse - shifted[np.arange(n), labels])

    def bw():
        def run(g):
            soft = np.exp(shifted)
            soft /= soft.sum(axis=1, keepdims=True)
            soft[np.arange(n), labels] -= 1.0
            _accum(logits, g * soft)
        return run

    return _result(np.asarray(loss, dtype=logits.data.dtype), "cross_entropy", (logits,), bw)


def pairwise_distances(x: Tensor) -> Tensor:
    """All-pairs unsquared Euclidean distances of the rows of ``x``.

    Computed in float64 via the Gram matrix; the diagonal is exactly zero
    by construction. Zero distances get a zero gradient (the standard
    subgradient choice for the root at the origin).
    """
    if x.data.ndim != 2:
        raise ShapeError(f"pairwise_distances wants [N,d] rows, got {x.data.shape}")
    rows = x.data.astype(np.float64, copy=False)
    gram = rows @ rows.T
    norms = np.diagonal(gram)
    sq = norms[:, None] + norms[None, :] - 2.0 * gram  # exactly 0 on the diagonal
    np.maximum(sq, 0.0, out=sq)
    d64 = np.sqrt(sq)

    def bw():
        def run(g):
            safe = np.where(d64 > 0, d64, 1.0)
            w = np.where(d64 > 0, (g + g.T) / safe, 0.0)
            grad = w.sum(axis=1, keepdims=True) * rows - w @ rows
            _accum(x, grad.astype(x.data.dtype, copy=False))
        return run

    return _result(d64.astype(x.data.dtype, copy=False), "pairwise_distances", (x,), bw)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    per_leaf: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"grad check {status}: max rel err {self.max_rel_err:.3e} (tolerance {self.tolerance:.1e})"


def grad_check(build, leaves: dict[str, Tensor], tolerance: float = 1e-4,
               step: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of ``build()`` against central differences.

    ``build`` rebuilds and returns the scalar loss from the (live) ``leaves``
    tensors on every call. Both the analytic pass and the numeric sweep run
    on float64 copies of the leaf data; originals are restored afterwards.

    Every coordinate is perturbed by a relative step, ``h_j = step * |x_j|``
    (plain ``step`` for coordinates that are exactly zero), so the probe
    stays proportional to the parameter scale instead of jumping over
    relu/max kinks. Per leaf, the assembled numeric gradient is compared to
    the analytic one by the magnitude ratio ``|a - n| / max(|a|, |n|, 1e-8)``
    (Euclidean magnitudes); when both magnitudes sit at or below the 1e-8
    floor the gradients agree to numerical noise and the error is zero,
    which covers parameters with structurally zero gradients (a bias feeding
    straight into batch normalization, for instance).

    The caller must pick inputs away from relu/max ties (within the step's
    reach); resample on a different seed if a tie is suspected.
    """
    originals = {name: t.data for name, t in leaves.items()}
    try:
        for t in leaves.values():
            t.data = t.data.astype(np.float64)
            t.grad = None
        loss = build()
        loss.backward()
        analytic = {}
        for name, t in leaves.items():
            if t.grad is None:
                raise ValueError(f"leaf {name!r} is unreachable from the loss")
            analytic[name] = np.asarray(t.grad, dtype=np.float64).copy()
            t.grad = None

        per_leaf = {}
        worst = 0.0
        with no_grad():
            for name, t in leaves.items():
                flat = t.data.reshape(-1)
                numeric = np.empty(flat.size)
                for j in range(flat.size):
                    saved = flat[j]
                    h = step * abs(saved) if saved != 0.0 else step
                    flat[j] = saved + h
                    hi = float(build().data)
                    flat[j] = saved - h
                    lo = float(build().data)
                    flat[j] = saved
                    numeric[j] = (hi - lo) / (2.0 * h)
                ana = analytic[name].reshape(-1)
                gap = float(np.linalg.norm(ana - numeric))
                scale_ = max(float(np.linalg.norm(ana)), float(np.linalg.norm(numeric)))
                rel = 0.0 if scale_ <= 1e-8 else gap / max(scale_, 1e-8)
                per_leaf[name] = rel
                worst = max(worst, rel)
    finally:
        for name, t in leaves.items():
            t.data = originals[name]
            t.grad = None

    return GradCheckReport(max_rel_err=worst, passed=worst < tolerance,
                           per_leaf=per_leaf, tolerance=tolerance)
