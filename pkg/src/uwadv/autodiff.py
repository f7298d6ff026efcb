"""A small tape-based reverse-mode differentiator for image tensors.

Only the handful of primitives needed by the reference models and the
attack/defence losses are provided. Tensors are ``(C, H, W)`` images, an
optional leading batch axis ``(N, C, H, W)``, or the vectors/scalars that
reductions produce. There is no general broadcasting.

Typical use::

    tape = Tape()
    x = tape.variable(img, "x")
    loss = reduce(relu(x), "sum")
    report = backward(loss)
    report.grads["x"]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from uwadv.imagecore import RGB_TO_YUV

__all__ = [
    "Tape",
    "Tensor",
    "GradReport",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "activation",
    "conv2d",
    "channel_affine",
    "color_transform",
    "reduce",
    "backward",
    "grad_check",
]


class Tensor:
    """A value array, optionally attached to a :class:`Tape`."""

    __slots__ = ("value", "tape", "requires_grad", "grad", "name")

    def __init__(self, value, tape: Tape | None = None, requires_grad: bool = False, name=None):
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"non-finite values in tensor {name or ''}".strip())
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward: Callable
    kind: str = ""


class Tape:
    """Append-only record of primitive ops; insertion order is topological."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, Tensor] = {}

    def variable(self, value, name: str) -> Tensor:
        """Register a named leaf whose gradient will be reported."""
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        t = Tensor(value, tape=self, requires_grad=True, name=name)
        self.leaves[name] = t
        return t

    def __len__(self):
        return len(self.nodes)


@dataclass
class GradReport:
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    max_rel_error: float | None = None

    def __getitem__(self, name):
        return self.grads[name]


def constant(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents, backward_fn, kind: str = "") -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = p.tape
    needs = any(p.requires_grad for p in parents)
    out = Tensor(value, tape=tape if needs else None, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, tuple(parents), backward_fn, kind))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _result(a.value * a.value.dtype.type(s), (a,), lambda g: (g * s,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    on = x.value > 0  # relu'(0) = 0
    return _result(np.where(on, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * on,), "relu")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # tanh form stays finite for large |x|
    s = (0.5 * (1.0 + np.tanh(0.5 * x.value))).astype(x.value.dtype)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def _batched(v: np.ndarray):
    if v.ndim == 3:
        return v[None], True
    if v.ndim == 4:
        return v, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {v.shape}")


def _padded_flat(x4: np.ndarray, p: int) -> np.ndarray:
    # zero-pad H and W by p, flatten each plane row-major and append 2p zeros
    # so every kernel tap is one contiguous slice of length H * (W + 2p)
    n, c, h, w = x4.shape
    hp, wp = h + 2 * p, w + 2 * p
    buf = np.zeros((n, c, hp * wp + 2 * p), dtype=x4.dtype)
    buf[:, :, : hp * wp].reshape(n, c, hp, wp)[:, :, p : p + h, p : p + w] = x4
    return buf


def conv2d(x, weights, bias) -> Tensor:
    """Stride-1, zero 'same' padded cross-correlation plus bias.

    ``weights`` has layout ``(k, k, C_in, C_out)`` with odd ``k``; ``bias`` is
    ``(C_out,)``. Each kernel tap is a matrix product against a shifted view
    of the flattened padded input, so no im2col buffer is built.
    """
    x, weights, bias = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    if weights.ndim != 4 or weights.shape[0] != weights.shape[1] or weights.shape[0] % 2 == 0:
        raise ValueError(f"conv2d: weights must be (k, k, Cin, Cout) with odd k, got {weights.shape}")
    k, _, cin, cout = weights.shape
    x4, squeeze = _batched(x.value)
    n, c, h, w = x4.shape
    if c != cin:
        raise ValueError(f"conv2d: input has {c} channels, weights expect {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")

    dtype = x4.dtype
    p = k // 2
    wp = w + 2 * p
    span = h * wp
    shifts = [(i, j, i * wp + j) for i in range(k) for j in range(k)]
    wv = weights.value.astype(dtype, copy=False)
    w_out_in = np.ascontiguousarray(wv.transpose(0, 1, 3, 2))
    buf = _padded_flat(x4, p)

    acc = np.zeros((n, cout, span), dtype=dtype)
    for i, j, s in shifts:
        acc += np.matmul(w_out_in[i, j], buf[:, :, s : s + span])
    out = acc.reshape(n, cout, h, wp)[..., :w] + bias.value.astype(dtype, copy=False)[:, None, None]
    if squeeze:
        out = out[0]

    def back(g):
        g4 = g[None] if squeeze else g
        gext = np.zeros((n, cout, h, wp), dtype=g4.dtype)
        gext[..., :w] = g4
        gext = gext.reshape(n, cout, span)
        gx = gw = gb = None
        if x.requires_grad:
            wg = wv.astype(gext.dtype, copy=False)
            gbuf = np.zeros((n, cin, buf.shape[-1]), dtype=gext.dtype)
            for i, j, s in shifts:
                gbuf[:, :, s : s + span] += np.matmul(wg[i, j], gext)
            gx = gbuf[:, :, : (h + 2 * p) * wp].reshape(n, cin, h + 2 * p, wp)[:, :, p : p + h, p : p + w]
            if squeeze:
                gx = gx[0]
        if weights.requires_grad:
            gt = gext.transpose(0, 2, 1)
            gw = np.empty((k, k, cin, cout), dtype=np.float64)
            for i, j, s in shifts:
                gw[i, j] = np.matmul(buf[:, :, s : s + span], gt).sum(axis=0, dtype=np.float64)
        if bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3), dtype=np.float64)
        return gx, gw, gb

    return _result(out, (x, weights, bias), back)


def channel_affine(x, a, b) -> Tensor:
    """Per-channel ``a_c * x_c + b_c`` with ``a``, ``b`` of shape ``(C,)``."""
    x, a, b = _as_tensor(x), _as_tensor(a), _as_tensor(b)
    c = x.shape[-3] if x.ndim >= 3 else None
    if c is None or a.shape != (c,) or b.shape != (c,):
        raise ValueError(f"channel_affine: need (C,) coefficients for input {x.shape}")
    dtype = x.value.dtype
    av = a.value.astype(dtype, copy=False)[:, None, None]
    bv = b.value.astype(dtype, copy=False)[:, None, None]
    sum_axes = tuple(i for i in range(x.ndim) if i != x.ndim - 3)

    def back(g):
        ga = (g * x.value).sum(axis=sum_axes, dtype=np.float64)
        gb = g.sum(axis=sum_axes, dtype=np.float64)
        return g * av, ga, gb

    return _result(av * x.value + bv, (x, a, b), back)


def color_transform(x) -> Tensor:
    """Differentiable RGB -> YUV on the channel axis (third from last)."""
    x = _as_tensor(x)
    if x.ndim < 3 or x.shape[-3] != 3:
        raise ValueError(f"color_transform: expected 3 channels, got shape {x.shape}")
    m = RGB_TO_YUV.astype(x.value.dtype)
    axis = x.ndim - 3

    def apply(mat, v):
        return np.moveaxis(np.tensordot(mat, v, axes=([1], [axis])), 0, axis)

    return _result(apply(m, x.value), (x,), lambda g: (apply(m.T, g),))


def _axes_for(x: Tensor, region) -> tuple:
    if region == "all":
        return tuple(range(x.ndim))
    if region == "channel":
        if x.ndim < 3:
            raise ValueError("per-channel reduction needs a (.., C, H, W) tensor")
        return (x.ndim - 2, x.ndim - 1)
    return tuple(a % x.ndim for a in region)


def reduce(x, kind: str, region="all") -> Tensor:
    """Sum, mean or Euclidean norm over ``region``.

    ``region`` is ``"all"``, ``"channel"`` (over H and W, one value per
    channel) or an explicit tuple of axes. Accumulation is in float64.
    """
    x = _as_tensor(x)
    axes = _axes_for(x, region)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if x.value.size == 0 or count == 0:
        raise ValueError("reduce over an empty region")
    v = x.value
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def spread(g):
        return np.broadcast_to(np.reshape(g, kept), x.shape)

    if kind == "sum":
        out = v.sum(axis=axes, dtype=np.float64)
        return _result(out, (x,), lambda g: (spread(g),))
    if kind == "mean":
        out = v.sum(axis=axes, dtype=np.float64) / count
        return _result(out, (x,), lambda g: (spread(g) / count,))
    if kind == "l2norm":
        out = np.sqrt(np.square(v, dtype=np.float64).sum(axis=axes))

        def back(g):
            norm = np.reshape(out, kept)
            safe = np.where(norm > 0, norm, 1.0)
            # zero subgradient at the origin
            return (np.where(norm > 0, spread(g) * v / safe, 0.0),)

        return _result(out, (x,), back)
    raise ValueError(f"unknown reduction {kind!r}")


def backward(loss: Tensor) -> GradReport:
    """Reverse sweep from a scalar ``loss``; returns gradients of all named leaves."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        return GradReport()
    for node in tape.nodes:
        node.out.grad = None
    for leaf in tape.leaves.values():
        leaf.grad = None
    loss.grad = np.ones_like(loss.value, dtype=np.float64)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.value.dtype)
            parent.grad = pg if parent.grad is None else parent.grad + pg
    grads = {}
    for name, leaf in tape.leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return GradReport(grads)


def _relu_pattern(tape: Tape) -> np.ndarray:
    masks = [node.out.value.ravel() > 0 for node in tape.nodes if node.kind == "relu"]
    return np.concatenate(masks) if masks else np.zeros(0, dtype=bool)


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-3,
    coords=None,
    skip_kinks: bool = False,
    details: bool = False,
):
    """Max relative error between autodiff and central differences.

    ``fn`` takes a leaf tensor and returns a scalar tensor. Evaluation runs in
    float64; the relative error per coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``. ``coords`` restricts the check to
    the given flat indices.

    Central differences are meaningless across a relu kink. With
    ``skip_kinks`` a coordinate is excluded when the relu on/off pattern at
    either stencil point differs from the pattern at ``point``. With
    ``details`` the return value is ``(max_rel_error, n_checked, n_skipped)``.
    """
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    leaf = tape.variable(point, "p")
    analytic = backward(fn(leaf))["p"].ravel()
    base_pattern = _relu_pattern(tape)

    def value_at(p):
        t = Tape()
        v = float(fn(t.variable(p, "p")).value)
        if not np.isfinite(v):
            raise ValueError("non-finite function value during grad_check")
        return v, _relu_pattern(t)

    flat = point.ravel()
    indices = np.arange(flat.size) if coords is None else np.asarray(coords).ravel()
    worst = 0.0
    checked = skipped = 0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        up, pat_up = value_at(point)
        flat[i] = orig - h
        down, pat_down = value_at(point)
        flat[i] = orig
        if skip_kinks and not (np.array_equal(pat_up, base_pattern) and np.array_equal(pat_down, base_pattern)):
            skipped += 1
            continue
        numeric = (up - down) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
        checked += 1
    if details:
        return worst, checked, skipped
    return worst
