"""Synthetic underwater pairs and paired-directory loading.

Clean images are procedural scenes (gradient background plus a handful of
flat-coloured ellipses and rectangles). Degraded inputs follow a simple
attenuation/backscatter model::

    x_c = y_c * exp(-beta_c * d) + B_c * (1 - exp(-beta_c * d))

optionally followed by a 3x3 box blur and Gaussian sensor noise, then
clamped to [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from uwadv.imagecore import check_image, clamp01, load_image, save_image


@dataclass(frozen=True)
class DegradationParams:
    beta: tuple[float, float, float] = (1.2, 0.6, 0.3)
    backscatter: tuple[float, float, float] = (0.05, 0.25, 0.35)
    depth_range: tuple[float, float] = (0.3, 0.6)
    blur: bool = False
    noise_sigma: float = 0.01

    def __post_init__(self):
        if len(self.beta) != 3 or min(self.beta) < 0:
            raise ValueError(f"attenuation must be three non-negative values, got {self.beta}")
        if len(self.backscatter) != 3 or not all(0 <= b <= 1 for b in self.backscatter):
            raise ValueError(f"backscatter must be three values in [0, 1], got {self.backscatter}")
        lo, hi = self.depth_range
        if lo < 0 or hi < lo:
            raise ValueError(f"depth range must satisfy 0 <= d_min <= d_max, got {self.depth_range}")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> DegradationParams:
        return cls(
            beta=tuple(d["beta"]),
            backscatter=tuple(d["backscatter"]),
            depth_range=tuple(d["depth_range"]),
            blur=bool(d["blur"]),
            noise_sigma=float(d["noise_sigma"]),
        )


WATER_TYPES = {
    "I": DegradationParams(beta=(0.8, 0.4, 0.2)),
    "II": DegradationParams(beta=(1.2, 0.6, 0.3)),
    "III": DegradationParams(beta=(1.8, 0.9, 0.45)),
}


@dataclass
class PairedDataset:
    """Filename-aligned (degraded, clean) image paths."""

    pairs: list[tuple[Path, Path]]
    split: str = "all"
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i) -> tuple[np.ndarray, np.ndarray]:
        xp, yp = self.pairs[i]
        return load_image(xp), load_image(yp)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All pairs stacked as (N, 3, H, W) float32 arrays."""
        xs, ys = zip(*(self[i] for i in range(len(self))))
        return np.stack(xs), np.stack(ys)

    def subset(self, names, split: str) -> PairedDataset:
        index = {xp.name: (xp, yp) for xp, yp in self.pairs}
        return PairedDataset([index[n] for n in names], split, self.manifest)


def synth_clean(seed: int, size: int = 64) -> np.ndarray:
    """Procedural clean scene; deterministic per ``seed``."""
    if size < 16:
        raise ValueError("synthetic images need size >= 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)

    c0, c1 = rng.uniform(0.0, 1.0, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    for _ in range(int(rng.integers(3, 9))):
        color = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.06, 0.3, size=2)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[:, mask] = color[:, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _box_blur3(img: np.ndarray) -> np.ndarray:
    # edge-replicated 3x3 mean
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(p, (3, 3), axis=(1, 2))
    return win.mean(axis=(-2, -1))


def degrade(y: np.ndarray, depth: float, params: DegradationParams, seed: int) -> np.ndarray:
    y = check_image(y, "clean image").astype(np.float64)
    trans = np.exp(-np.asarray(params.beta, dtype=np.float64) * depth)[:, None, None]
    back = np.asarray(params.backscatter, dtype=np.float64)[:, None, None]
    x = y * trans + back * (1.0 - trans)
    if params.blur:
        x = _box_blur3(x)
    if params.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        x = x + rng.normal(0.0, params.noise_sigma, size=x.shape)
    return clamp01(x).astype(np.float32)


def _split_counts(count: int, fractions) -> list[int]:
    fractions = list(fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    n_train = int(round(count * fractions[0]))
    return [n_train, count - n_train]


def generate_dataset(
    out_dir: str | Path,
    count: int,
    size: int = 64,
    params: DegradationParams = WATER_TYPES["II"],
    seed: int = 42,
    split_fractions=(0.8, 0.2),
    water_type: str | None = None,
) -> PairedDataset:
    """Write ``clean/NNNN.png``, ``degraded/NNNN.png`` and ``manifest.json``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "degraded").mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)
    names, depths = [], []
    lo, hi = params.depth_range
    for i, s in enumerate(seeds):
        rng = np.random.default_rng([int(s), 1])
        depth = float(rng.uniform(lo, hi))
        y = synth_clean(int(s), size)
        x = degrade(y, depth, params, seed=int(rng.integers(2**31)))
        name = f"{i:04d}.png"
        save_image(y, out_dir / "clean" / name)
        save_image(x, out_dir / "degraded" / name)
        names.append(name)
        depths.append(round(depth, 12))

    n_train, _ = _split_counts(count, split_fractions)
    order = np.random.default_rng([seed, 2]).permutation(count)
    train = sorted(names[i] for i in order[:n_train])
    test = sorted(names[i] for i in order[n_train:])
    manifest = {
        "seed": seed,
        "count": count,
        "size": size,
        "water_type": water_type,
        "params": asdict(params),
        "depths": depths,
        "split_fractions": list(split_fractions),
        "splits": {"train": train, "test": test},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return load_paired_dir(out_dir)


def load_paired_dir(directory: str | Path, split: str | None = None) -> PairedDataset:
    """Load a ``clean/`` + ``degraded/`` folder pair, sorted by filename.

    With ``split`` set to ``"train"`` or ``"test"`` the manifest's split list
    selects the subset; folders without a manifest only support ``None``.
    """
    directory = Path(directory)
    cdir, ddir = directory / "clean", directory / "degraded"
    if not cdir.is_dir() or not ddir.is_dir():
        raise FileNotFoundError(f"{directory} must contain clean/ and degraded/ subdirectories")
    clean = {p.name for p in cdir.iterdir() if p.is_file()}
    degraded = {p.name for p in ddir.iterdir() if p.is_file()}
    if not clean and not degraded:
        raise ValueError(f"{directory} contains no images")
    for name in sorted(clean ^ degraded):
        side = "clean" if name in clean else "degraded"
        raise ValueError(f"unmatched file {side}/{name} in {directory}")

    pairs = [(ddir / n, cdir / n) for n in sorted(clean)]
    shape = None
    from PIL import Image as PILImage

    for xp, yp in pairs:
        for p in (xp, yp):
            with PILImage.open(p) as im:
                if shape is None:
                    shape = im.size
                elif im.size != shape:
                    raise ValueError(f"size mismatch: {p} is {im.size}, dataset is {shape}")

    manifest = {}
    mpath = directory / "manifest.json"
    if mpath.is_file():
        manifest = json.loads(mpath.read_text())
    ds = PairedDataset(pairs, "all", manifest)
    if split is None:
        return ds
    if split not in manifest.get("splits", {}):
        raise ValueError(f"{directory} has no {split!r} split in its manifest")
    return ds.subset(manifest["splits"][split], split)


def batch_iter(ds_len: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch, shuffled by ``(seed, epoch)``; last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(ds_len)
    return [order[i : i + batch_size] for i in range(0, ds_len, batch_size)]
