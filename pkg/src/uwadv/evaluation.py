"""Robustness estimates and the report files built from them.

Every image gets its own seed derived from ``(base_seed, image_index)``, so
results do not depend on how images are grouped or how many workers run.
Images are processed in fixed chunks of :data:`CHUNK` (attack batching),
and the chunks are the unit of parallel work.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from uwadv.attack import AttackConfig, pgd_attack_batch, random_noise
from uwadv.dataset import PairedDataset
from uwadv.imagecore import MetricValue, histogram256, psnr, rgb_to_yuv, save_image, ssim
from uwadv.models import Model, forward

CHUNK = 8
NOISE_KINDS = ("gaussian", "uniform", "none")
DEFAULT_EPS_GRID = (1, 2, 4, 8)
DEFAULT_ITERS_GRID = (1, 5, 10, 15, 20)
ROW_METRICS = ("psnr_clean", "ssim_clean", "psnr_adv", "ssim_adv", "psnr_x_xadv")
# Gaussian noise of "intensity eps" is read as standard deviation eps
GAUSSIAN_SIGMA_NOTE = "gaussian noise uses standard deviation = epsilon (not variance = epsilon)"


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    kind: str = "gaussian"
    epsilon: float = 8 / 255

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise EvalError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise EvalError(f"epsilon must lie in [0, 1], got {self.epsilon}")

    def to_dict(self) -> dict:
        return asdict(self)


def method_name(cfg: AttackConfig | NoiseConfig) -> str:
    if isinstance(cfg, NoiseConfig):
        return cfg.kind
    if cfg.mask != "none":
        return f"channel-{cfg.mask.lower()}"
    return {"color-shift": "color"}.get(cfg.loss, cfg.loss)


def image_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, dtype=np.uint32)[0])


def to_255(v: float) -> int | float:
    """Express a [0, 1] budget in 1/255 units; integral values print as ints."""
    u = v * 255
    return int(round(u)) if abs(u - round(u)) < 1e-9 else u


def model_digest(model: Model) -> str:
    h = hashlib.sha256(model.arch.encode())
    for name, p in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return h.hexdigest()


def _as_stack(ds) -> tuple[list[str], np.ndarray, np.ndarray]:
    if isinstance(ds, PairedDataset):
        if len(ds) == 0:
            raise EvalError("evaluation split is empty")
        xs, ys = ds.arrays()
        ids = [xp.stem for xp, _ in ds.pairs]
    else:
        xs, ys = (np.asarray(a, dtype=np.float32) for a in ds)
        if len(xs) == 0:
            raise EvalError("evaluation split is empty")
        ids = [f"{i:04d}" for i in range(len(xs))]
    if xs.shape != ys.shape or xs.ndim != 4:
        raise EvalError(f"expected matching (N,3,H,W) stacks, got {xs.shape} and {ys.shape}")
    return ids, xs, ys


def _perturb(model, xs, ys, cfg, seeds) -> np.ndarray:
    if isinstance(cfg, NoiseConfig):
        if cfg.kind == "none":
            return xs.copy()
        return np.stack([random_noise(x, cfg.kind, cfg.epsilon, s) for x, s in zip(xs, seeds)])
    return np.stack([r.x_adv for r in pgd_attack_batch(model, xs, ys, cfg, seeds)])


def _map_chunks(fn, n: int, jobs: int) -> list:
    chunks = [range(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)]
    if jobs <= 1 or len(chunks) == 1:
        parts = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(fn, chunks))
    return [item for part in parts for item in part]


def _mean_finite(values: list[MetricValue]) -> tuple[float, int]:
    finite = [v.value for v in values if not v.infinite]
    mean = math.fsum(finite) / len(finite) if finite else math.nan
    return mean, len(values) - len(finite)


@dataclass
class RobustnessReport:
    """Per-image rows plus means over the finite entries of each metric."""

    rows: list[dict]
    config: dict
    meta: dict = field(default_factory=dict)
    adversarial: np.ndarray | None = None
    outputs: np.ndarray | None = None

    def means(self) -> dict[str, tuple[float, int]]:
        """``metric -> (mean over finite rows, number of infinite rows)``."""
        return {k: _mean_finite([r[k] for r in self.rows]) for k in ROW_METRICS}

    def mean(self, metric: str) -> float:
        return self.means()[metric][0]


def evaluate(
    model: Model,
    ds,
    cfg: AttackConfig | NoiseConfig,
    seed: int = 42,
    jobs: int = 1,
    keep_images: bool = False,
) -> RobustnessReport:
    """Clean vs perturbed quality of ``model`` over every pair of ``ds``.

    ``ds`` is a :class:`PairedDataset` or an ``(xs, ys)`` pair of stacks.
    """
    if not isinstance(cfg, (AttackConfig, NoiseConfig)):
        raise EvalError(f"unsupported evaluation config {type(cfg).__name__}")
    ids, xs, ys = _as_stack(ds)
    seeds = [image_seed(seed, i) for i in range(len(xs))]
    is_attack = isinstance(cfg, AttackConfig)

    def run(idx):
        idx = list(idx)
        x, y = xs[idx], ys[idx]
        x_adv = _perturb(model, x, y, cfg, [seeds[i] for i in idx])
        f_x = forward(model, x)
        f_adv = forward(model, x_adv)
        out = []
        for k, i in enumerate(idx):
            row = {
                "image_id": ids[i],
                "method": method_name(cfg),
                "eps": to_255(cfg.epsilon),
                "alpha": to_255(cfg.alpha) if is_attack else "",
                "iters": cfg.iters if is_attack else "",
                "projection": cfg.projection if is_attack else "",
                "seed": seeds[i],
                "psnr_clean": psnr(f_x[k], y[k]),
                "ssim_clean": ssim(f_x[k], y[k]),
                "psnr_adv": psnr(f_adv[k], y[k]),
                "ssim_adv": ssim(f_adv[k], y[k]),
                "psnr_x_xadv": psnr(x[k], x_adv[k]),
            }
            out.append((row, x_adv[k], f_adv[k]))
        return out

    results = _map_chunks(run, len(xs), jobs)
    report = RobustnessReport(
        rows=[r for r, _, _ in results],
        config={"method": method_name(cfg), **cfg.to_dict()},
        meta={"base_seed": seed, "image_seeds": seeds, "checkpoint_digest": model_digest(model)},
    )
    if keep_images:
        report.adversarial = np.stack([a for _, a, _ in results])
        report.outputs = np.stack([o for _, _, o in results])
    return report


@dataclass
class SweepGrid:
    """Mean adversarial PSNR/SSIM for each ``(eps, iters)`` cell."""

    eps: list[float]
    iters: list[int]
    psnr: np.ndarray
    ssim: np.ndarray
    n_inf: np.ndarray
    config: dict = field(default_factory=dict)

    def cell(self, eps: float, iters: int) -> tuple[float, float]:
        i, j = self.eps.index(eps), self.iters.index(iters)
        return float(self.psnr[i, j]), float(self.ssim[i, j])


def sweep(
    model: Model,
    ds,
    eps_list,
    iters_list,
    alpha: float = 2 / 255,
    loss: str = "pixel",
    base: AttackConfig | None = None,
    seed: int = 42,
    jobs: int = 1,
) -> SweepGrid:
    """One :func:`evaluate` per grid cell, all with the same base seed."""
    eps_list, iters_list = list(eps_list), list(iters_list)
    if not eps_list or not iters_list:
        raise EvalError("sweep needs non-empty epsilon and iteration lists")
    base = base or AttackConfig(alpha=alpha, loss=loss)
    shape = (len(eps_list), len(iters_list))
    grid = SweepGrid(eps_list, iters_list, np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=int))
    for i, e in enumerate(eps_list):
        for j, t in enumerate(iters_list):
            rep = evaluate(model, ds, replace(base, epsilon=e, iters=t, alpha=alpha, loss=loss), seed, jobs)
            m = rep.means()
            grid.psnr[i, j] = m["psnr_adv"][0]
            grid.ssim[i, j] = m["ssim_adv"][0]
            grid.n_inf[i, j] = m["psnr_adv"][1]
    grid.config = {**replace(base, alpha=alpha, loss=loss).to_dict(), "seed": seed}
    return grid


def quartiles(values) -> dict[str, float]:
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return {k: math.nan for k in ("min", "q1", "median", "q3", "max", "mean")}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"min": float(v.min()), "q1": float(q1), "median": float(med), "q3": float(q3), "max": float(v.max()), "mean": float(v.mean())}


@dataclass
class NoiseComparison:
    """Per-image adversarial-output quality under each perturbation condition."""

    ids: list[str]
    psnr: dict[str, list[MetricValue]]
    ssim: dict[str, list[MetricValue]]
    epsilon: float

    def summary(self) -> dict[str, dict[str, dict[str, float]]]:
        return {
            c: {"psnr": quartiles([float(v) for v in self.psnr[c]]), "ssim": quartiles([float(v) for v in self.ssim[c]])}
            for c in self.psnr
        }


def noise_compare(model: Model, ds, epsilon: float = 8 / 255, attack: AttackConfig | None = None, seed: int = 42, jobs: int = 1) -> NoiseComparison:
    """Adversarial attack vs Gaussian vs uniform noise vs nothing, at one budget."""
    attack = replace(attack or AttackConfig(), epsilon=epsilon)
    conds = {
        "adversarial": attack,
        "gaussian": NoiseConfig("gaussian", epsilon),
        "uniform": NoiseConfig("uniform", epsilon),
        "none": NoiseConfig("none", epsilon),
    }
    out_p, out_s, ids = {}, {}, []
    for name, cfg in conds.items():
        rep = evaluate(model, ds, cfg, seed, jobs)
        ids = [r["image_id"] for r in rep.rows]
        out_p[name] = [r["psnr_adv"] for r in rep.rows]
        out_s[name] = [r["ssim_adv"] for r in rep.rows]
    return NoiseComparison(ids, out_p, out_s, epsilon)


def displacement(reference: np.ndarray, other: np.ndarray) -> tuple[float, float]:
    """Mean ``|dY|`` and mean ``|dU| + |dV|`` between two RGB images."""
    d = rgb_to_yuv(np.asarray(other, dtype=np.float64)) - rgb_to_yuv(np.asarray(reference, dtype=np.float64))
    d = np.abs(d)
    return float(d[0].mean()), float(d[1].mean() + d[2].mean())


def chroma_luma_ratio(reference, other, floor: float = 1e-12) -> float:
    luma, chroma = displacement(reference, other)
    return chroma / max(luma, floor)


@dataclass
class HistogramReport:
    histograms: dict[str, np.ndarray]
    displacement: dict[str, tuple[float, float]]


def histogram_report(model: Model, x: np.ndarray, y: np.ndarray, base: AttackConfig | None = None, seed: int = 42) -> HistogramReport:
    """256-bin histograms of f(x) and of the outputs under pixel and color-shift attacks."""
    base = base or AttackConfig()
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    clean = forward(model, x)
    hists = {"clean": histogram256(clean)}
    disp = {"clean": (0.0, 0.0)}
    for name, loss in (("pixel", "pixel"), ("color", "color-shift")):
        cfg = replace(base, loss=loss, mask="none")
        x_adv = pgd_attack_batch(model, x[None], y[None], cfg, [image_seed(seed, 0)])[0].x_adv
        out = forward(model, x_adv)
        hists[name] = histogram256(out)
        disp[name] = displacement(clean, out)
    return HistogramReport(hists, disp)


def psnr_floor(cfg: AttackConfig) -> float:
    """Analytic lower bound on PSNR(x, x_adv) implied by the budget."""
    if cfg.projection == "cumulative":
        bound = cfg.epsilon
    else:
        start = cfg.epsilon if cfg.init == "uniform" else 0.0
        bound = min(cfg.iters * min(cfg.alpha, cfg.epsilon) + start, 1.0)
    return math.inf if bound == 0 else -20.0 * math.log10(bound)


def imperceptibility_report(
    model: Model,
    ds,
    eps_list=tuple(e / 255 for e in DEFAULT_EPS_GRID),
    iters: int = 5,
    projection: str = "cumulative",
    base: AttackConfig | None = None,
    seed: int = 42,
    jobs: int = 1,
) -> list[dict]:
    """One row per budget: mean and min PSNR(x, x_adv) next to the analytic floor."""
    base = base or AttackConfig()
    rows = []
    for e in eps_list:
        cfg = replace(base, epsilon=e, iters=iters, projection=projection)
        rep = evaluate(model, ds, cfg, seed, jobs)
        vals = [r["psnr_x_xadv"] for r in rep.rows]
        mean, n_inf = _mean_finite(vals)
        finite = [v.value for v in vals if not v.infinite]
        rows.append(
            {
                "eps": to_255(e),
                "iters": iters,
                "projection": projection,
                "init": cfg.init,
                "loss": cfg.loss,
                "mean_psnr": mean,
                "min_psnr": min(finite) if finite else math.inf,
                "floor_psnr": psnr_floor(cfg),
                "n_inf": n_inf,
                "values": vals,
            }
        )
    return rows


def _fmt(v) -> str:
    if isinstance(v, MetricValue):
        return v.to_csv()
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


PER_IMAGE_COLUMNS = ("image_id", "method", "eps", "alpha", "iters", "projection", "seed") + ROW_METRICS


def write_reports(
    out_dir: str | Path,
    report: RobustnessReport | None = None,
    grid: SweepGrid | None = None,
    noise: NoiseComparison | None = None,
    hist: HistogramReport | None = None,
    impercept: list[dict] | None = None,
    meta: dict | None = None,
    save_pngs: bool = False,
) -> list[Path]:
    """Write whichever artifacts are given plus ``meta.json``; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    if report is not None:
        files["per_image.csv"] = _csv(PER_IMAGE_COLUMNS, ([r[c] for c in PER_IMAGE_COLUMNS] for r in report.rows))
        files["summary.csv"] = _csv(
            ("metric", "mean", "n_finite", "n_inf"),
            ((k, m, len(report.rows) - n, n) for k, (m, n) in report.means().items()),
        )
    if grid is not None:
        files["sweep.csv"] = _csv(
            ("eps", "iters", "mean_psnr", "mean_ssim", "n_inf"),
            (
                (to_255(e), t, float(grid.psnr[i, j]), float(grid.ssim[i, j]), int(grid.n_inf[i, j]))
                for i, e in enumerate(grid.eps)
                for j, t in enumerate(grid.iters)
            ),
        )
    if noise is not None:
        rows = [(c, iid, noise.psnr[c][k], noise.ssim[c][k]) for c in noise.psnr for k, iid in enumerate(noise.ids)]
        for c, s in noise.summary().items():
            rows += [(c, stat, s["psnr"][stat], s["ssim"][stat]) for stat in s["psnr"]]
        files["noise.csv"] = _csv(("condition", "row", "psnr", "ssim"), rows)
    if hist is not None:
        rows = [
            (c, b, int(h[0, b]), int(h[1, b]), int(h[2, b]))
            for c, h in hist.histograms.items()
            for b in range(256)
        ]
        files["hist.csv"] = _csv(("condition", "bin", "r", "g", "b"), rows)
    if impercept is not None:
        cols = ("eps", "iters", "projection", "init", "loss", "mean_psnr", "min_psnr", "floor_psnr", "n_inf")
        files["impercept.csv"] = _csv(cols, ([r[c] for c in cols] for r in impercept))

    meta = dict(meta or {})
    meta["gaussian_noise"] = GAUSSIAN_SIGMA_NOTE
    if report is not None:
        meta.setdefault("report", {"config": report.config, **report.meta})
    if grid is not None:
        meta.setdefault("sweep", grid.config)
    if hist is not None:
        meta.setdefault("displacement", {k: {"luma": v[0], "chroma": v[1]} for k, v in hist.displacement.items()})
    files["meta.json"] = json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n"

    written = []
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        written.append(p)
    if save_pngs and report is not None and report.adversarial is not None:
        for r, xa, fo in zip(report.rows, report.adversarial, report.outputs):
            save_image(xa, out / "adv" / f"{r['image_id']}.png")
            save_image(fo, out / "out" / f"{r['image_id']}.png")
    return written


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, MetricValue):
        return o.to_csv()
    raise TypeError(f"cannot serialise {type(o).__name__}")

