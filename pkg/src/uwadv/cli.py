"""Command-line entry point.

Every setting has a flat dotted key (``attack.eps``, ``train.epochs`` ...)
that can come from ``--config FILE`` (JSON) or from the matching inline
flag; inline flags win. The merged tree is validated before anything is
written, and the normalized config is stored as ``meta.json`` next to the
outputs.

Exit codes: 0 success, 1 invalid arguments or config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from uwadv import dataset as ds_mod
from uwadv.attack import AttackConfig, pgd_attack_batch, random_noise
from uwadv.defense import ADV_LOSSES, TrainConfig, TrainingError, train
from uwadv.evaluation import (
    DEFAULT_EPS_GRID,
    DEFAULT_ITERS_GRID,
    NoiseConfig,
    evaluate,
    histogram_report,
    image_seed,
    imperceptibility_report,
    model_digest,
    noise_compare,
    sweep,
    write_reports,
)
from uwadv.imagecore import ImageError, load_image, psnr, save_image
from uwadv.models import ARCHITECTURES, CheckpointError, build_affine, build_tiny_enhancer, load_checkpoint

log = logging.getLogger("uwadv")

ATTACK_METHODS = ("pixel", "color", "mse", "channel-r", "channel-g", "channel-b")
NOISE_METHODS = ("gaussian", "uniform")
METHODS = ATTACK_METHODS + NOISE_METHODS
EVAL_REPORTS = ("noise", "hist", "impercept")
EPS_MAX = 64
ITERS_MAX = 1000


class ConfigError(ValueError):
    """Invalid flags or config values (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# key -> (type, default). ``None`` defaults mean "required" or "not set".
COMMON = {"seed": (int, 42), "jobs": (int, 1)}
ATTACK_KEYS = {
    "attack.method": (str, None),
    "attack.eps": (float, 8.0),
    "attack.alpha": (float, None),
    "attack.iters": (int, None),
    "attack.proj": (str, "cumulative"),
    "attack.init": (str, "uniform"),
}
KEYS = {
    "gen-data": {
        "out": (str, None),
        "data.count": (int, None),
        "data.size": (int, 64),
        "data.water_type": (str, "II"),
        "data.blur": (bool, False),
        "data.noise_sigma": (float, 0.01),
        "data.train_fraction": (float, 0.8),
    },
    "train": {
        "out": (str, None),
        "data.dir": (str, None),
        "data.split": (str, "train"),
        "model.arch": (str, "tiny-enhancer"),
        "model.init": (str, None),
        "train.epochs": (int, 50),
        "train.batch_size": (int, 6),
        "train.lr": (float, 1e-3),
        "train.adv": (bool, False),
        "train.lambda": (float, 1.0),
        "train.eps": (float, 8.0),
        "train.alpha": (float, 2.0),
        "train.iters": (int, 20),
        "train.record_time": (bool, False),
        "train.adv_loss": (str, "norm"),
    },
    "attack": {
        "out": (str, None),
        "model.checkpoint": (str, None),
        "input": (str, None),
        "target": (str, None),
        **ATTACK_KEYS,
    },
    "eval": {
        "out": (str, None),
        "model.checkpoint": (str, None),
        "data.dir": (str, None),
        "data.split": (str, "test"),
        "eval.reports": (list, []),
        "eval.save_pngs": (bool, False),
        "eval.impercept_iters": (int, 5),
        **ATTACK_KEYS,
    },
    "sweep": {
        "out": (str, None),
        "model.checkpoint": (str, None),
        "data.dir": (str, None),
        "data.split": (str, "test"),
        "sweep.eps": (list, list(DEFAULT_EPS_GRID)),
        "sweep.iters": (list, list(DEFAULT_ITERS_GRID)),
        **ATTACK_KEYS,
    },
}
REQUIRED = {
    "gen-data": ("out", "data.count"),
    "train": ("out", "data.dir"),
    "attack": ("out", "model.checkpoint", "input", "attack.method"),
    "eval": ("out", "model.checkpoint", "data.dir"),
    "sweep": ("out", "model.checkpoint", "data.dir"),
}


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self) -> dict:
        # the output location is left out so that identical runs written to
        # different directories produce identical trees
        return {"command": self.command, "config": {k: v for k, v in sorted(self.values.items()) if k != "out"}}


def _add_attack_flags(p, with_method=True):
    if with_method:
        p.add_argument("--method", dest="attack.method", help="|".join(METHODS))
    p.add_argument("--eps", dest="attack.eps", type=float, help="budget in 1/255 units (default 8)")
    p.add_argument("--alpha", dest="attack.alpha", type=float, help="step size in 1/255 units (default 2)")
    p.add_argument("--iters", dest="attack.iters", type=int, help="iterations T (default 20)")
    p.add_argument("--proj", dest="attack.proj", help="cumulative|step-clip")
    p.add_argument("--init", dest="attack.init", help="uniform|zero")


def _csv_list(text):
    return [float(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted keys; inline flags override it")
    common.add_argument("--seed", dest="seed", type=int)
    common.add_argument("--jobs", dest="jobs", type=int)
    common.add_argument("--out", dest="out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="uwadv", description="Adversarial attacks and defenses for image enhancement models.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic paired dataset")
    g.add_argument("--count", dest="data.count", type=int)
    g.add_argument("--size", dest="data.size", type=int)
    g.add_argument("--water-type", dest="data.water_type", choices=sorted(ds_mod.WATER_TYPES))
    g.add_argument("--blur", dest="data.blur", action="store_const", const=True)
    g.add_argument("--noise-sigma", dest="data.noise_sigma", type=float)
    g.add_argument("--train-fraction", dest="data.train_fraction", type=float)

    t = sub.add_parser("train", parents=[common], help="standard or adversarial training")
    t.add_argument("--data", dest="data.dir")
    t.add_argument("--split", dest="data.split")
    t.add_argument("--arch", dest="model.arch")
    t.add_argument("--init-from", dest="model.init", help="checkpoint to finetune")
    t.add_argument("--epochs", dest="train.epochs", type=int)
    t.add_argument("--batch-size", dest="train.batch_size", type=int)
    t.add_argument("--lr", dest="train.lr", type=float)
    t.add_argument("--adv", dest="train.adv", action="store_const", const=True)
    t.add_argument("--lambda", dest="train.lambda", type=float)
    t.add_argument("--eps", dest="train.eps", type=float)
    t.add_argument("--alpha", dest="train.alpha", type=float)
    t.add_argument("--iters", dest="train.iters", type=int)
    t.add_argument("--record-time", dest="train.record_time", action="store_const", const=True)
    t.add_argument("--adv-loss", dest="train.adv_loss", help="norm (sum of l2 norms, default) or mse")

    a = sub.add_parser("attack", parents=[common], help="write adversarial or noisy PNGs")
    a.add_argument("--model", dest="model.checkpoint")
    a.add_argument("--input", dest="input", help="degraded PNG or paired dataset directory")
    a.add_argument("--target", dest="target", help="reference PNG for a single-image input")
    _add_attack_flags(a)

    e = sub.add_parser("eval", parents=[common], help="robustness report")
    e.add_argument("--model", dest="model.checkpoint")
    e.add_argument("--data", dest="data.dir")
    e.add_argument("--split", dest="data.split")
    e.add_argument("--reports", dest="eval.reports", type=lambda s: [r for r in s.split(",") if r], help="extra reports: noise,hist,impercept")
    e.add_argument("--save-pngs", dest="eval.save_pngs", action="store_const", const=True)
    e.add_argument("--impercept-iters", dest="eval.impercept_iters", type=int)
    _add_attack_flags(e)

    s = sub.add_parser("sweep", parents=[common], help="epsilon x iterations grid")
    s.add_argument("--model", dest="model.checkpoint")
    s.add_argument("--data", dest="data.dir")
    s.add_argument("--split", dest="data.split")
    s.add_argument("--eps-list", dest="sweep.eps", type=_csv_list)
    s.add_argument("--iters-list", dest="sweep.iters", type=_csv_list)
    _add_attack_flags(s)
    return parser


def _flatten(tree, prefix="") -> dict:
    flat = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def _coerce(key, value, kind):
    if value is None:
        return None
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is list:
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            if not isinstance(value, list):
                raise TypeError
            return value
        if kind is int:
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise TypeError
            return int(float(value))
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def _need_range(key, v, lo, hi=None):
    if v < lo or (hi is not None and v > hi):
        bound = f"[{lo}, {hi}]" if hi is not None else f">= {lo}"
        raise ConfigError(f"{key}: {v} out of range, must be {bound}")


def validate_config(command: str, tree: dict) -> RunConfig:
    """Check keys, types and ranges; fill defaults. Units stay in 1/255 here."""
    if command not in KEYS:
        raise ConfigError(f"unknown subcommand {command!r}")
    schema = {**COMMON, **KEYS[command]}
    unknown = sorted(set(tree) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    vals = {k: _coerce(k, tree.get(k), kind) for k, (kind, _) in schema.items()}
    for k, (_, default) in schema.items():
        if vals[k] is None and default is not None:
            vals[k] = default
    if command in ("eval", "sweep") and vals.get("attack.method") is None:
        vals["attack.method"] = "pixel"
    for k in REQUIRED[command]:
        if vals.get(k) is None:
            raise ConfigError(f"missing required setting {k!r}" + (" (--method)" if k == "attack.method" else ""))

    _need_range("seed", vals["seed"], 0)
    _need_range("jobs", vals["jobs"], 1)
    if "attack.method" in vals:
        _validate_attack(vals, command)
    if command == "gen-data":
        _need_range("data.count", vals["data.count"], 1)
        _need_range("data.size", vals["data.size"], 16)
        _need_range("data.noise_sigma", vals["data.noise_sigma"], 0.0)
        _need_range("data.train_fraction", vals["data.train_fraction"], 0.0, 1.0)
        if vals["data.water_type"] not in ds_mod.WATER_TYPES:
            raise ConfigError(f"data.water_type: must be one of {sorted(ds_mod.WATER_TYPES)}")
    if command == "train":
        _need_range("train.epochs", vals["train.epochs"], 1)
        _need_range("train.batch_size", vals["train.batch_size"], 1)
        _need_range("train.lambda", vals["train.lambda"], 0.0)
        _need_range("train.eps", vals["train.eps"], 0.0, EPS_MAX)
        _need_range("train.alpha", vals["train.alpha"], 0.0)
        _need_range("train.iters", vals["train.iters"], 1, ITERS_MAX)
        if vals["train.lr"] <= 0:
            raise ConfigError("train.lr: must be > 0")
        if vals["model.arch"] not in ARCHITECTURES:
            raise ConfigError(f"model.arch: must be one of {ARCHITECTURES}")
        if vals["train.adv_loss"] not in ADV_LOSSES:
            raise ConfigError(f"train.adv_loss: must be one of {ADV_LOSSES}")
        if not vals["train.adv"]:
            for k in ("train.eps", "train.alpha", "train.iters", "train.lambda", "train.adv_loss"):
                if k in tree:
                    raise ConfigError(f"{k} only applies to adversarial training (--adv)")
    if command == "eval":
        bad = sorted(set(vals["eval.reports"]) - set(EVAL_REPORTS))
        if bad:
            raise ConfigError(f"eval.reports: unknown report(s) {bad}, choose from {EVAL_REPORTS}")
        _need_range("eval.impercept_iters", vals["eval.impercept_iters"], 1, ITERS_MAX)
        if vals["eval.reports"] and vals["attack.method"] in NOISE_METHODS:
            raise ConfigError("eval.reports need an attack method, not noise")
    if command == "attack" and not Path(vals["input"]).is_dir() and vals["target"] is None:
        raise ConfigError("target: a single-image attack needs --target")
    if command == "sweep":
        vals["sweep.eps"] = [_coerce("sweep.eps", v, float) for v in vals["sweep.eps"]]
        vals["sweep.iters"] = [_coerce("sweep.iters", v, int) for v in vals["sweep.iters"]]
        if not vals["sweep.eps"] or not vals["sweep.iters"]:
            raise ConfigError("sweep.eps and sweep.iters must be non-empty")
        for v in vals["sweep.eps"]:
            _need_range("sweep.eps", v, 0.0, EPS_MAX)
        for v in vals["sweep.iters"]:
            _need_range("sweep.iters", v, 1, ITERS_MAX)
        if vals["attack.method"] in NOISE_METHODS:
            raise ConfigError("attack.method: sweep needs an attack method, not noise")
    _check_out(vals["out"])
    return RunConfig(command, vals)


def _validate_attack(vals, command):
    method = vals["attack.method"]
    if method not in METHODS:
        raise ConfigError(f"attack.method: {method!r} is not one of {METHODS}")
    _need_range("attack.eps", vals["attack.eps"], 0.0, EPS_MAX)
    if method in NOISE_METHODS:
        for k in ("attack.alpha", "attack.iters"):
            if vals[k] is not None:
                raise ConfigError(f"{k} cannot be combined with noise method {method!r}")
        return
    vals["attack.alpha"] = 2.0 if vals["attack.alpha"] is None else vals["attack.alpha"]
    vals["attack.iters"] = 20 if vals["attack.iters"] is None else vals["attack.iters"]
    _need_range("attack.alpha", vals["attack.alpha"], 0.0, 255.0)
    _need_range("attack.iters", vals["attack.iters"], 1, ITERS_MAX)
    if vals["attack.proj"] not in ("cumulative", "step-clip"):
        raise ConfigError(f"attack.proj: must be cumulative or step-clip, got {vals['attack.proj']!r}")
    if vals["attack.init"] not in ("uniform", "zero"):
        raise ConfigError(f"attack.init: must be uniform or zero, got {vals['attack.init']!r}")


def _check_out(out):
    p = Path(out)
    while not p.exists():
        if p.parent == p:
            break
        p = p.parent
    if p.exists() and (not p.is_dir() or not os.access(p, os.W_OK)):
        raise ConfigError(f"out: {out} is not a writable directory")


def attack_config(cfg: RunConfig) -> AttackConfig | NoiseConfig:
    """Map the CLI method name and 1/255 units onto a module config."""
    method = cfg["attack.method"]
    eps = cfg["attack.eps"] / 255
    if method in NOISE_METHODS:
        return NoiseConfig(method, eps)
    loss = {"color": "color-shift", "mse": "mse"}.get(method, "pixel")
    mask = method[-1].upper() if method.startswith("channel-") else "none"
    return AttackConfig(
        epsilon=eps,
        alpha=cfg["attack.alpha"] / 255,
        iters=cfg["attack.iters"],
        loss=loss,
        mask=mask,
        projection=cfg["attack.proj"],
        init=cfg["attack.init"],
        seed=cfg["seed"],
    )


def _write_meta(out: Path, cfg: RunConfig, extra: dict | None = None):
    meta = {**cfg.to_dict(), **(extra or {})}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load_split(directory, split):
    d = ds_mod.load_paired_dir(directory)
    if split in d.manifest.get("splits", {}):
        return ds_mod.load_paired_dir(directory, split)
    return d


def cmd_gen_data(cfg: RunConfig):
    base = ds_mod.WATER_TYPES[cfg["data.water_type"]]
    params = ds_mod.DegradationParams(
        beta=base.beta,
        backscatter=base.backscatter,
        depth_range=base.depth_range,
        blur=cfg["data.blur"],
        noise_sigma=cfg["data.noise_sigma"],
    )
    frac = cfg["data.train_fraction"]
    ds_mod.generate_dataset(
        cfg["out"], cfg["data.count"], cfg["data.size"], params, cfg["seed"], (frac, 1.0 - frac), cfg["data.water_type"]
    )
    _write_meta(Path(cfg["out"]), cfg)


def cmd_train(cfg: RunConfig):
    data = _load_split(cfg["data.dir"], cfg["data.split"])
    if cfg["model.init"]:
        model = load_checkpoint(cfg["model.init"])
    elif cfg["model.arch"] == "affine":
        model = build_affine(np.ones(3), np.zeros(3))
    else:
        model = build_tiny_enhancer(cfg["seed"])
    attack = AttackConfig(
        epsilon=cfg["train.eps"] / 255, alpha=cfg["train.alpha"] / 255, iters=cfg["train.iters"], loss="mse", seed=cfg["seed"]
    )
    tc = TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        lam=cfg["train.lambda"],
        attack=attack,
        seed=cfg["seed"],
        mode="adversarial" if cfg["train.adv"] else "standard",
        checkpoint_out=cfg["out"],
        record_time=cfg["train.record_time"],
        adv_loss=cfg["train.adv_loss"],
    )
    train(model, data, tc)
    _write_meta(Path(cfg["out"]), cfg, {"checkpoint_digest": model_digest(model)})


def cmd_attack(cfg: RunConfig):
    model = load_checkpoint(cfg["model.checkpoint"])
    src = Path(cfg["input"])
    if src.is_dir():
        data = ds_mod.load_paired_dir(src)
        xs, ys = data.arrays()
        names = [xp.name for xp, _ in data.pairs]
    else:
        xs, ys = load_image(src)[None], load_image(cfg["target"])[None]
        names = [src.name]
    acfg = attack_config(cfg)
    seeds = [image_seed(cfg["seed"], i) for i in range(len(xs))]
    if isinstance(acfg, NoiseConfig):
        adv = [random_noise(x, acfg.kind, acfg.epsilon, s) for x, s in zip(xs, seeds)]
    elif acfg.epsilon == 0:
        adv = [x.copy() for x in xs]
    else:
        adv = [r.x_adv for r in pgd_attack_batch(model, xs, ys, acfg, seeds)]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    lines = ["image,seed,linf_255,psnr_x_xadv"]
    for name, x, xa, s in zip(names, xs, adv, seeds):
        save_image(xa, out / name)
        linf = float(np.max(np.abs(xa.astype(np.float64) - x))) * 255
        lines.append(f"{name},{s},{linf!r},{psnr(x, xa).to_csv()}")
    (out / "attack.csv").write_text("\n".join(lines) + "\n")
    _write_meta(out, cfg, {"checkpoint_digest": model_digest(model), "image_seeds": seeds})


def cmd_eval(cfg: RunConfig):
    model = load_checkpoint(cfg["model.checkpoint"])
    data = _load_split(cfg["data.dir"], cfg["data.split"])
    acfg = attack_config(cfg)
    seed, jobs = cfg["seed"], cfg["jobs"]
    report = evaluate(model, data, acfg, seed, jobs, keep_images=cfg["eval.save_pngs"])
    extras = {}
    reports = cfg["eval.reports"]
    if isinstance(acfg, AttackConfig):
        if "noise" in reports:
            extras["noise"] = noise_compare(model, data, acfg.epsilon, acfg, seed, jobs)
        if "hist" in reports:
            x, y = data[0]
            extras["hist"] = histogram_report(model, x, y, acfg, seed)
        if "impercept" in reports:
            extras["impercept"] = imperceptibility_report(
                model, data, [e / 255 for e in DEFAULT_EPS_GRID], cfg["eval.impercept_iters"], acfg.projection, acfg, seed, jobs
            )
    write_reports(cfg["out"], report, meta=cfg.to_dict(), save_pngs=cfg["eval.save_pngs"], **extras)


def cmd_sweep(cfg: RunConfig):
    model = load_checkpoint(cfg["model.checkpoint"])
    data = _load_split(cfg["data.dir"], cfg["data.split"])
    acfg = attack_config(cfg)
    grid = sweep(
        model,
        data,
        [e / 255 for e in cfg["sweep.eps"]],
        cfg["sweep.iters"],
        acfg.alpha,
        acfg.loss,
        acfg,
        cfg["seed"],
        cfg["jobs"],
    )
    write_reports(cfg["out"], grid=grid, meta={**cfg.to_dict(), "checkpoint_digest": model_digest(model)})


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "sweep": cmd_sweep}


def parse(argv) -> RunConfig:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise ConfigError("missing subcommand: one of " + ", ".join(COMMANDS))
    inline = {k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config", "verbose")}
    tree = {}
    if args.config:
        try:
            tree = _flatten(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from exc
    tree.update(inline)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return validate_config(args.command, tree)


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse(argv)
    except ConfigError as exc:
        print(f"uwadv: error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"uwadv: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ImageError, CheckpointError, TrainingError) as exc:
        print(f"uwadv: {cfg.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())
