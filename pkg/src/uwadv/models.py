"""Reference enhancement models and their on-disk checkpoint format.

Two architectures are available:

``affine``
    ``f(x)_c = a_c * x_c + b_c``. Closed-form gradients make it the subject
    of analytic tests.
``tiny-enhancer``
    conv3x3(3->16) -> relu -> conv3x3(16->16) -> relu -> conv3x3(16->3) ->
    sigmoid. The sigmoid head keeps outputs inside (0, 1) without clamping.

Checkpoints are a ``model.json`` manifest next to a ``model.bin`` blob of
little-endian float32 values, concatenated in manifest order.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from uwadv import autodiff as ad

ARCHITECTURES = ("affine", "tiny-enhancer")
FORMAT_VERSION = "1"
TINY_WIDTH = 16
TINY_MIN_SIZE = 3


class CheckpointError(ValueError):
    """Unreadable, inconsistent or unsupported checkpoint."""


def _expected_shapes(arch: str) -> dict[str, tuple]:
    if arch == "affine":
        return {"a": (3,), "b": (3,)}
    if arch == "tiny-enhancer":
        w = TINY_WIDTH
        return {
            "conv1.w": (3, 3, 3, w),
            "conv1.b": (w,),
            "conv2.w": (3, 3, w, w),
            "conv2.b": (w,),
            "conv3.w": (3, 3, w, 3),
            "conv3.b": (3,),
        }
    raise CheckpointError(f"unknown architecture id {arch!r}")


class Model:
    """A named, parameterised differentiable map from degraded to enhanced images.

    ``params`` is an insertion-ordered dict of float32 arrays; that order is the
    checkpoint blob order.
    """

    def __init__(self, arch: str, params: dict[str, np.ndarray], meta: dict | None = None):
        shapes = _expected_shapes(arch)
        if list(params) != list(shapes):
            raise ValueError(f"{arch}: expected parameters {list(shapes)}, got {list(params)}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f"{arch}: parameter {name} has shape {params[name].shape}, expected {shape}")
        self.arch = arch
        self.params = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in params.items()}
        self.meta = dict(meta or {})

    def __repr__(self):
        n = sum(p.size for p in self.params.values())
        return f"Model(arch={self.arch!r}, n_params={n})"

    def copy(self) -> Model:
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()}, self.meta)

    def graph(self, x: ad.Tensor, params: dict[str, ad.Tensor]) -> ad.Tensor:
        """Build the forward computation from tensor inputs."""
        if self.arch == "affine":
            return ad.channel_affine(x, params["a"], params["b"])
        h = ad.relu(ad.conv2d(x, params["conv1.w"], params["conv1.b"]))
        h = ad.relu(ad.conv2d(h, params["conv2.w"], params["conv2.b"]))
        return ad.sigmoid(ad.conv2d(h, params["conv3.w"], params["conv3.b"]))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


def build_affine(a, b) -> Model:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (3,) or b.shape != (3,):
        raise ValueError("affine model needs three gains and three offsets")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("affine coefficients must be finite")
    return Model("affine", {"a": a, "b": b})


def build_tiny_enhancer(seed: int) -> Model:
    """He-uniform weights (bound sqrt(6/fan_in)) and zero biases from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _expected_shapes("tiny-enhancer").items():
        if name.endswith(".w"):
            fan_in = shape[0] * shape[1] * shape[2]
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return Model("tiny-enhancer", params)


def _check_input(model: Model, x: np.ndarray):
    if x.ndim not in (3, 4) or x.shape[-3] != 3:
        raise ValueError(f"model input must be (3,H,W) or (N,3,H,W), got {x.shape}")
    if model.arch == "tiny-enhancer" and min(x.shape[-2:]) < TINY_MIN_SIZE:
        raise ValueError(f"tiny-enhancer needs H, W >= {TINY_MIN_SIZE}, got {x.shape[-2:]}")


def forward(model: Model, x, record: bool = False, grad_input: bool = True, grad_params: bool = True):
    """Run the model.

    Without ``record`` this returns the output array. With ``record`` it
    returns ``(output_tensor, tape)``; the tape's leaves are ``"x"`` (when
    ``grad_input``) and every parameter name (when ``grad_params``).
    Parameters are cast to the input's float dtype, so a float64 input gives
    a float64 forward pass.
    """
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float32)
    _check_input(model, x)
    dtype = x.dtype
    if not record:
        params = {k: ad.Tensor(v.astype(dtype, copy=False)) for k, v in model.params.items()}
        return model.graph(ad.Tensor(x), params).value

    tape = ad.Tape()
    xt = tape.variable(x, "x") if grad_input else ad.Tensor(x)
    params = {}
    for k, v in model.params.items():
        v = v.astype(dtype, copy=False)
        params[k] = tape.variable(v, k) if grad_params else ad.Tensor(v)
    out = model.graph(xt, params)
    if out.tape is None:
        out.tape = tape
    return out, tape


def save_checkpoint(model: Model, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, value in model.params.items():
        entries.append({"name": name, "shape": list(value.shape), "offset": offset, "count": int(value.size)})
        offset += value.size
        blobs.append(value.astype("<f4").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": model.arch,
        "dtype": "float32-le",
        "parameters": entries,
        "total_count": offset,
        "meta": model.meta,
    }
    (directory / "model.bin").write_bytes(b"".join(blobs))
    (directory / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> Model:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "model.json").read_text())
        blob = (directory / "model.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc

    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('format_version')!r} (expected {FORMAT_VERSION!r})"
        )
    arch = manifest.get("architecture")
    shapes = _expected_shapes(arch)
    entries = manifest.get("parameters", [])
    if [e["name"] for e in entries] != list(shapes):
        raise CheckpointError(f"{arch}: manifest lists parameters {[e['name'] for e in entries]}, expected {list(shapes)}")

    total = sum(int(np.prod(s)) for s in shapes.values())
    if len(blob) != 4 * total:
        raise CheckpointError(f"corrupt checkpoint blob: {len(blob)} bytes, expected {4 * total}")
    flat = np.frombuffer(blob, dtype="<f4")
    params = {}
    offset = 0
    for e in entries:
        shape = tuple(e["shape"])
        if shape != shapes[e["name"]] or e["offset"] != offset:
            raise CheckpointError(f"{arch}: bad layout for parameter {e['name']}")
        n = int(np.prod(shape))
        params[e["name"]] = flat[offset : offset + n].reshape(shape).astype(np.float32)
        offset += n
    return Model(arch, params, manifest.get("meta", {}))
