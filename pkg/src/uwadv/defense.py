"""Standard and adversarial training.

One adversarial step on a mini-batch ``(x, y)``:

1. ``x_adv`` is generated by the attack engine (treated as data; no
   gradient flows through the attack loop),
2. ``L = L_model(f(x), y) + lam * L_adv(f(x), f(x_adv))`` with ``L_model``
   the MSE and ``L_adv = sum_i ||f(x_i) - f(x_adv_i)||_2``,
3. one Adam update of the parameters.

Standard training is the same step with ``lam = 0`` and no attack.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from uwadv import autodiff as ad
from uwadv.attack import AttackConfig, pgd_attack_batch
from uwadv.dataset import PairedDataset, batch_iter
from uwadv.models import Model, save_checkpoint

log = logging.getLogger(__name__)

# inner attack used during adversarial training (MSE loss, eps 8/255, T=20)
DEFAULT_TRAIN_ATTACK = AttackConfig(epsilon=8 / 255, alpha=2 / 255, iters=20, loss="mse")


ADV_LOSSES = ("norm", "mse")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 6
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lam: float = 1.0
    attack: AttackConfig = DEFAULT_TRAIN_ATTACK
    seed: int = 42
    mode: str = "standard"
    checkpoint_out: str | None = None
    record_time: bool = False
    # "norm": sum of per-item l2 norms; "mse": scale-matched mean squared difference
    adv_loss: str = "norm"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.mode not in ("standard", "adversarial"):
            raise ValueError(f"mode must be 'standard' or 'adversarial', got {self.mode!r}")
        if self.adv_loss not in ADV_LOSSES:
            raise ValueError(f"adv_loss must be one of {ADV_LOSSES}, got {self.adv_loss!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class Adam:
    """Bias-corrected Adam over a model's parameter dict (float64 moments)."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = (p - update).astype(p.dtype)


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)

    def to_csv(self, include_time: bool = False) -> str:
        cols = ["epoch", "l_model", "l_adv", "rng_digest"] + (["seconds"] if include_time else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for e in self.entries:
            w.writerow([e["epoch"], repr(e["l_model"]), repr(e["l_adv"]), e["rng_digest"]] + ([f"{e['seconds']:.3f}"] if include_time else []))
        return buf.getvalue()


def model_loss(out, y) -> ad.Tensor:
    """Mean squared error over every element (the whole batch)."""
    out, y = ad._as_tensor(out), ad._as_tensor(y)
    if out.shape != y.shape:
        raise ValueError(f"model_loss: shape mismatch {out.shape} vs {y.shape}")
    d = ad.sub(out, y)
    return ad.reduce(ad.mul(d, d), "mean")


def adv_regularizer(f_x, f_xadv) -> ad.Tensor:
    """Sum over batch items of the l2 norm of the output difference."""
    f_x, f_xadv = ad._as_tensor(f_x), ad._as_tensor(f_xadv)
    if f_x.shape != f_xadv.shape:
        raise ValueError(f"adv_regularizer: shape mismatch {f_x.shape} vs {f_xadv.shape}")
    d = ad.sub(f_x, f_xadv)
    if d.ndim == 3:
        return ad.reduce(d, "l2norm")
    return ad.reduce(ad.reduce(d, "l2norm", (1, 2, 3)), "sum")


def attack_seeds(seed: int, epoch: int, batch_index: int, n: int) -> list[int]:
    ss = np.random.SeedSequence([seed, epoch, batch_index])
    return [int(s) for s in ss.generate_state(n, dtype=np.uint32)]


def train_step(model: Model, xs: np.ndarray, ys: np.ndarray, cfg: TrainConfig, opt: Adam, seeds=None) -> dict:
    """One optimiser update on a batch; mutates ``model.params`` in place.

    Returns the step losses ``{"l_model", "l_adv", "loss"}``.
    """
    xs = np.asarray(xs, dtype=np.float32)
    ys = np.asarray(ys, dtype=np.float32)
    adversarial = cfg.mode == "adversarial"
    lam = cfg.lam if adversarial else 0.0

    x_adv = None
    if adversarial:
        if seeds is None:
            seeds = attack_seeds(cfg.seed, 0, 0, len(xs))
        results = pgd_attack_batch(model, xs, ys, cfg.attack, seeds)
        x_adv = np.stack([r.x_adv for r in results])

    tape = ad.Tape()
    params = {k: tape.variable(v, k) for k, v in model.params.items()}
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            out = model.graph(ad.Tensor(xs), params)
            l_model = model_loss(out, ad.Tensor(ys))
            total = l_model
            l_adv_value = 0.0
            if adversarial:
                out_adv = model.graph(ad.Tensor(x_adv), params)
                l_adv = adv_regularizer(out, out_adv) if cfg.adv_loss == "norm" else model_loss(out, out_adv)
                l_adv_value = float(l_adv.value)
                total = ad.add(l_model, ad.scale(l_adv, lam))
    except ValueError as exc:
        # tensors refuse non-finite values, so a diverged forward lands here
        raise TrainingError(f"non-finite loss at optimiser step {opt.t + 1}: {exc}") from exc
    loss_value = float(total.value)
    grads = ad.backward(total).grads
    opt.step(model.params, grads)
    return {"l_model": float(l_model.value), "l_adv": l_adv_value, "loss": loss_value}


def train(model: Model, dataset: PairedDataset | tuple, cfg: TrainConfig, opt: Adam | None = None):
    """Train for ``cfg.epochs`` epochs; returns ``(model, TrainLog)``.

    ``dataset`` is a :class:`PairedDataset` or an ``(xs, ys)`` array pair.
    When ``cfg.checkpoint_out`` is set the checkpoint and ``train_log.csv``
    are written there at the end.
    """
    xs, ys = dataset.arrays() if isinstance(dataset, PairedDataset) else dataset
    if len(xs) == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = opt or Adam(model.params, cfg.lr, cfg.betas, cfg.adam_eps)
    tlog = TrainLog()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        digest = hashlib.sha256()
        sums = np.zeros(2)
        batches = batch_iter(len(xs), cfg.batch_size, cfg.seed, epoch)
        for b, idx in enumerate(batches):
            digest.update(np.asarray(idx, dtype=np.int64).tobytes())
            seeds = attack_seeds(cfg.seed, epoch, b, len(idx)) if cfg.mode == "adversarial" else None
            step = train_step(model, xs[idx], ys[idx], cfg, opt, seeds)
            sums += (step["l_model"], step["l_adv"])
        entry = {
            "epoch": epoch + 1,
            "l_model": float(sums[0] / len(batches)),
            "l_adv": float(sums[1] / len(batches)),
            "seconds": time.perf_counter() - t0,
            "rng_digest": digest.hexdigest()[:16],
        }
        tlog.entries.append(entry)
        log.info("epoch %d/%d l_model=%.6f l_adv=%.4f (%.1fs)", epoch + 1, cfg.epochs, entry["l_model"], entry["l_adv"], entry["seconds"])

    history = list(model.meta.get("training", []))
    history.append(
        {
            "mode": cfg.mode,
            "epochs": cfg.epochs,
            "lambda": cfg.lam,
            "lambda_note": "adversarial coefficient; called gamma in the training settings, assumed identical",
            "seed": cfg.seed,
            "adv_loss": cfg.adv_loss,
            "attack": cfg.attack.to_dict() if cfg.mode == "adversarial" else None,
            "final_l_model": tlog.entries[-1]["l_model"],
        }
    )
    model.meta["training"] = history
    if cfg.checkpoint_out:
        out = Path(cfg.checkpoint_out)
        save_checkpoint(model, out)
        (out / "train_log.csv").write_text(tlog.to_csv(cfg.record_time))
    return model, tlog
