"""White-box l-inf attacks on enhancement models.

The attack ascends a loss between the model output and the ground truth
with signed gradient steps::

    x0      = clamp01(x + U(-eps, eps) * M)
    x_{t+1} = clamp01(P(x_t + alpha * M * sgn(grad L(f(x_t), y))))

where ``M`` is an optional single-channel mask and ``P`` is either the
projection onto the eps-ball around ``x`` ("cumulative") or a clip of the
per-step increment to [-eps, eps] ("step-clip").

Losses: ``pixel`` (per-channel RGB l2 distance), ``color-shift`` (l2 distance
of the U and V chroma planes) and ``mse``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from uwadv import autodiff as ad
from uwadv.imagecore import check_image
from uwadv.models import Model, forward

LOSSES = ("pixel", "color-shift", "mse")
MASKS = ("none", "R", "G", "B")
PROJECTIONS = ("cumulative", "step-clip")
INITS = ("uniform", "zero")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Settings of one attack run. ``epsilon`` and ``alpha`` are in [0, 1] units."""

    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iters: int = 20
    loss: str = "pixel"
    mask: str = "none"
    projection: str = "cumulative"
    init: str = "uniform"
    seed: int = 42

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise AttackError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.alpha < 0:
            raise AttackError(f"alpha must be >= 0, got {self.alpha}")
        if int(self.iters) != self.iters or self.iters < 1:
            raise AttackError(f"iters must be a positive integer, got {self.iters}")
        for value, allowed, name in (
            (self.loss, LOSSES, "loss"),
            (self.mask, MASKS, "mask"),
            (self.projection, PROJECTIONS, "projection"),
            (self.init, INITS, "init"),
        ):
            if value not in allowed:
                raise AttackError(f"{name} must be one of {allowed}, got {value!r}")

    def with_seed(self, seed: int) -> AttackConfig:
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    loss_trace: list[float] = field(default_factory=list)
    linf: float = 0.0
    seed: int = 0


def _plane_count(t: ad.Tensor) -> int:
    return t.shape[-1] * t.shape[-2]


def _per_item_sum(t: ad.Tensor, batched: bool) -> ad.Tensor:
    # (N, C) -> (N,) or (C,) -> ()
    return ad.reduce(t, "sum", (1,) if batched else "all")


def pixel_loss(out, y) -> ad.Tensor:
    """Sum over RGB of the per-channel l2 distance, divided by 3WH.

    Accepts ``(3, H, W)`` (scalar result) or ``(N, 3, H, W)`` (one value per
    item).
    """
    out, y = ad._as_tensor(out), ad._as_tensor(y)
    if out.shape != y.shape:
        raise ValueError(f"pixel_loss: shape mismatch {out.shape} vs {y.shape}")
    norms = ad.reduce(ad.sub(out, y), "l2norm", "channel")
    return ad.scale(_per_item_sum(norms, out.ndim == 4), 1.0 / (3 * _plane_count(out)))


def color_shift_loss(out, y) -> ad.Tensor:
    """l2 distance of the U and V planes after RGB->YUV, divided by 2WH."""
    out, y = ad._as_tensor(out), ad._as_tensor(y)
    if out.shape != y.shape:
        raise ValueError(f"color_shift_loss: shape mismatch {out.shape} vs {y.shape}")
    diff = ad.color_transform(ad.sub(out, y))
    norms = ad.reduce(diff, "l2norm", "channel")
    batched = out.ndim == 4
    # drop the luma plane by weighting it with zero
    chroma = np.array([0.0, 1.0, 1.0])
    if batched:
        chroma = np.broadcast_to(chroma, norms.shape)
    picked = ad.mul(norms, ad.Tensor(np.array(chroma, dtype=np.float64)))
    return ad.scale(_per_item_sum(picked, batched), 1.0 / (2 * _plane_count(out)))


def mse_loss(out, y) -> ad.Tensor:
    """Mean squared error per item (scalar for a single image)."""
    out, y = ad._as_tensor(out), ad._as_tensor(y)
    if out.shape != y.shape:
        raise ValueError(f"mse_loss: shape mismatch {out.shape} vs {y.shape}")
    d = ad.sub(out, y)
    if out.ndim == 4:
        return ad.reduce(ad.mul(d, d), "mean", (1, 2, 3))
    return ad.reduce(ad.mul(d, d), "mean")


LOSS_FUNCTIONS = {"pixel": pixel_loss, "color-shift": color_shift_loss, "mse": mse_loss}


def channel_mask(mask: str, shape) -> np.ndarray:
    m = np.ones(shape, dtype=np.float32)
    if mask != "none":
        keep = "RGB".index(mask)
        m[..., [c for c in range(3) if c != keep], :, :] = 0.0
    return m


def _loss_and_grad(model: Model, x: np.ndarray, y: np.ndarray, loss: str):
    out, tape = forward(model, x, record=True, grad_params=False)
    per_item = LOSS_FUNCTIONS[loss](out, ad.Tensor(y))
    total = ad.reduce(per_item, "sum") if per_item.ndim else per_item
    grad = ad.backward(total)["x"]
    return np.atleast_1d(per_item.value).astype(np.float64), grad


def _attack_stack(model, xs, ys, cfg: AttackConfig, seeds):
    """Run the attack on a stack of images, one RNG stream per image."""
    n = xs.shape[0]
    dtype = xs.dtype
    eps = dtype.type(cfg.epsilon)
    alpha = dtype.type(cfg.alpha)
    mask = channel_mask(cfg.mask, xs.shape).astype(dtype)
    lower = xs - eps
    upper = xs + eps

    if cfg.init == "uniform" and cfg.epsilon > 0:
        noise = np.stack(
            [np.random.default_rng(int(s)).uniform(-cfg.epsilon, cfg.epsilon, size=xs.shape[1:]) for s in seeds]
        ).astype(dtype)
        xt = np.clip(xs + noise * mask, 0, 1)
    else:
        xt = xs.copy()

    traces = [[] for _ in range(n)]
    for _ in range(cfg.iters):
        values, grad = _loss_and_grad(model, xt, ys, cfg.loss)
        if not np.all(np.isfinite(grad)):
            raise AttackError("non-finite input gradient during attack")
        for i in range(n):
            traces[i].append(float(values[i]))
        step = alpha * np.sign(grad).astype(dtype) * mask
        if cfg.projection == "cumulative":
            xt = np.clip(np.clip(xt + step, lower, upper), 0, 1)
        else:
            xt = np.clip(xt + np.clip(step, -eps, eps), 0, 1)
    final, _ = _loss_and_grad(model, xt, ys, cfg.loss)
    for i in range(n):
        traces[i].append(float(final[i]))
    results = []
    for i in range(n):
        linf = float(np.max(np.abs(xt[i].astype(np.float64) - xs[i]))) if xt[i].size else 0.0
        results.append(AttackResult(xt[i], traces[i], linf, int(seeds[i])))
    return results


def pgd_attack(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> AttackResult:
    """Attack one image. ``loss_trace`` holds ``L(f(x_t), y)`` for t = 0..T."""
    x = check_image(x, "x").astype(np.float32, copy=False)
    y = check_image(y, "y").astype(np.float32, copy=False)
    if x.shape != y.shape:
        raise AttackError(f"x and y shapes differ: {x.shape} vs {y.shape}")
    if cfg.epsilon == 0:
        trace = [float(np.atleast_1d(_loss_and_grad(model, x[None], y[None], cfg.loss)[0])[0])] * (cfg.iters + 1)
        return AttackResult(x.copy(), trace, 0.0, cfg.seed)
    return _attack_stack(model, x[None], y[None], cfg, [cfg.seed])[0]


def pgd_attack_batch(model: Model, xs: np.ndarray, ys: np.ndarray, cfg: AttackConfig, seeds) -> list[AttackResult]:
    """Attack a stack ``(N, 3, H, W)`` in one vectorised pass.

    Image ``i`` uses ``seeds[i]`` for its initial noise, so the result for an
    image does not depend on which other images share the batch (up to float
    rounding in the batched matrix products).
    """
    xs = np.asarray(xs, dtype=np.float32)
    ys = np.asarray(ys, dtype=np.float32)
    if xs.shape != ys.shape or xs.ndim != 4:
        raise AttackError(f"expected matching (N,3,H,W) stacks, got {xs.shape} and {ys.shape}")
    if len(seeds) != xs.shape[0]:
        raise AttackError("need one seed per image")
    if cfg.epsilon == 0:
        values, _ = _loss_and_grad(model, xs, ys, cfg.loss)
        return [AttackResult(xs[i].copy(), [float(values[i])] * (cfg.iters + 1), 0.0, int(seeds[i])) for i in range(len(xs))]
    return _attack_stack(model, xs, ys, cfg, seeds)


def random_noise(x: np.ndarray, kind: str, epsilon: float, seed: int) -> np.ndarray:
    """Add seeded noise of intensity ``epsilon`` and clamp to [0, 1].

    ``gaussian`` draws N(0, sigma=epsilon); ``uniform`` draws U(-eps, eps).
    """
    x = np.asarray(x)
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if epsilon == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        noise = rng.normal(0.0, epsilon, size=x.shape)
    elif kind == "uniform":
        noise = rng.uniform(-epsilon, epsilon, size=x.shape)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return np.clip(x + noise, 0.0, 1.0).astype(x.dtype)
