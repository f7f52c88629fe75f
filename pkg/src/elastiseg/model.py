"""Small promptable ViT-style segmenter with elastic depth and MLP width.

The encoder is a stack of pre-LN transformer layers whose MLP blocks can
run at a reduced intermediate width w: only the first w rows of fc1 (and
bias) and the first w columns of fc2 are active. Layers can be skipped
entirely. A SubnetConfig names which layers are kept and each kept layer's
width; the weights themselves always store the full supernet tensors.

The prompt (a point or a box) enters as one extra token produced by a
frozen two-layer map of its normalized coordinates; the mask head turns
each patch token, concatenated with the final prompt token, into one
patch of logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor

FROZEN_PREFIX = "prompt."
HEAD_HIDDEN = 256


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 8
    num_heads: int = 4
    mlp_dim: int = 256
    prompt_mode: str = "point"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.mlp_dim < self.embed_dim:
            raise ConfigError("mlp_dim must be >= embed_dim")
        if self.prompt_mode not in ("point", "box"):
            raise ConfigError(f"unknown prompt_mode {self.prompt_mode!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    def to_json(self) -> dict:
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "embed_dim": self.embed_dim, "num_layers": self.num_layers,
            "num_heads": self.num_heads, "mlp_dim": self.mlp_dim,
            "prompt_mode": self.prompt_mode,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class PromptSpec:
    """A point (x, y) or a box (x0, y0, x1, y1) in pixel coordinates.

    Boxes use an exclusive right/bottom edge, so a box containing a single
    pixel column still satisfies x0 < x1.
    """

    kind: str
    coords: tuple

    @classmethod
    def point(cls, x: float, y: float) -> "PromptSpec":
        return cls("point", (float(x), float(y)))

    @classmethod
    def box(cls, x0: float, y0: float, x1: float, y1: float) -> "PromptSpec":
        return cls("box", (float(x0), float(y0), float(x1), float(y1)))

    def validate(self, image_size: int) -> None:
        if self.kind == "point":
            x, y = self.coords
            if not (0 <= x < image_size and 0 <= y < image_size):
                raise ConfigError(f"point prompt {self.coords} outside image")
        elif self.kind == "box":
            x0, y0, x1, y1 = self.coords
            if not (0 <= x0 < x1 <= image_size and 0 <= y0 < y1 <= image_size):
                raise ConfigError(f"box prompt {self.coords} invalid or outside image")
        else:
            raise ConfigError(f"unknown prompt kind {self.kind!r}")

    def encode(self, image_size: int) -> np.ndarray:
        """6-vector [is_point, is_box, x0, y0, x1, y1] with coords in [0, 1]."""
        s = float(image_size)
        if self.kind == "point":
            x, y = self.coords
            v = [1.0, 0.0, x / s, y / s, x / s, y / s]
        else:
            x0, y0, x1, y1 = self.coords
            v = [0.0, 1.0, x0 / s, y0 / s, x1 / s, y1 / s]
        return np.asarray(v, dtype=np.float32)


@dataclass(frozen=True)
class SubnetConfig:
    """Architecture choice: per-layer keep bit plus active MLP width.

    window holds the active intermediate width for every layer; entries of
    dropped layers are normalized by the search space when the config is
    built there, so equal architectures compare equal.
    """

    keep: tuple
    window: tuple

    def __post_init__(self):
        if len(self.keep) != len(self.window):
            raise ConfigError("keep and window must have one entry per layer")

    def digest(self) -> str:
        bits = ",".join("1" if k else "0" for k in self.keep)
        wins = ",".join(str(w) for w in self.window)
        return f"k{bits}|w{wins}"


class SupernetWeights:
    """All supernet tensors, keyed by name, plus structural metadata.

    layer_widths gives each stored layer's full MLP width; for a supernet
    these all equal config.mlp_dim, while extracted subnets keep the
    sliced widths. fc1 rows, fc1 bias entries, and fc2 columns with the
    same index always describe the same intermediate neuron.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray],
                 layer_widths: Optional[Sequence[int]] = None):
        self.config = config
        self.tensors = tensors
        if layer_widths is None:
            layer_widths = [config.mlp_dim] * config.num_layers
        self.layer_widths = list(layer_widths)

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    def copy(self) -> "SupernetWeights":
        return SupernetWeights(self.config,
                               {k: v.copy() for k, v in self.tensors.items()},
                               list(self.layer_widths))

    def frozen_names(self) -> set:
        return {n for n in self.tensors if n.startswith(FROZEN_PREFIX)}

    def save(self, path: str, extra_meta: Optional[dict] = None) -> None:
        meta = {"model": self.config.to_json(), "layer_widths": self.layer_widths}
        if extra_meta:
            meta.update(extra_meta)
        save_tensors(path, self.tensors, meta)

    @classmethod
    def load(cls, path: str) -> tuple["SupernetWeights", dict]:
        tensors, meta = load_tensors(path)
        if not meta or "model" not in meta:
            raise FormatError(f"{path}: missing model metadata")
        config = ModelConfig.from_json(meta["model"])
        widths = meta.get("layer_widths") or [config.mlp_dim] * config.num_layers
        weights = cls(config, tensors, widths)
        expected = set(_tensor_shapes(config, widths))
        got = set(tensors)
        if got != expected:
            unknown = sorted(got - expected)
            missing = sorted(expected - got)
            raise FormatError(
                f"{path}: header tensors do not match the model: "
                f"unknown={unknown[:4]} missing={missing[:4]}")
        for name, arr in tensors.items():
            want = _tensor_shapes(config, widths)[name]
            if arr.shape != want:
                raise FormatError(f"{path}: {name} has shape {arr.shape}, expected {want}")
        return weights, {k: v for k, v in meta.items() if k not in ("model", "layer_widths")}


def _tensor_shapes(cfg: ModelConfig, widths: Sequence[int]) -> dict[str, tuple]:
    d, p2 = cfg.embed_dim, cfg.patch_size ** 2
    shapes = {
        "patch_embed.w": (d, p2), "patch_embed.b": (d,),
        "pos_embed": (cfg.num_patches, d),
        "prompt.fc1.w": (d, 6), "prompt.fc1.b": (d,),
        "prompt.fc2.w": (d, d), "prompt.fc2.b": (d,),
        "final_ln.g": (d,), "final_ln.b": (d,),
        "head.fc1.w": (HEAD_HIDDEN, 2 * d), "head.fc1.b": (HEAD_HIDDEN,),
        "head.fc2.w": (p2, HEAD_HIDDEN), "head.fc2.b": (p2,),
    }
    for i in range(cfg.num_layers):
        D = widths[i]
        pre = f"layers.{i}."
        shapes[pre + "ln1.g"] = (d,)
        shapes[pre + "ln1.b"] = (d,)
        for part in ("wq", "wk", "wv", "wo"):
            shapes[pre + "attn." + part] = (d, d)
        for part in ("bq", "bk", "bv", "bo"):
            shapes[pre + "attn." + part] = (d,)
        shapes[pre + "ln2.g"] = (d,)
        shapes[pre + "ln2.b"] = (d,)
        shapes[pre + "fc1.w"] = (D, d)
        shapes[pre + "fc1.b"] = (D,)
        shapes[pre + "fc2.w"] = (d, D)
        shapes[pre + "fc2.b"] = (d,)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape: tuple, std: float = 0.02,
                  bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(np.float32)


def init_weights(cfg: ModelConfig, seed: int) -> SupernetWeights:
    """Truncated-normal (std 0.02) matrices, zero biases, identity layernorms."""
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _tensor_shapes(cfg, [cfg.mlp_dim] * cfg.num_layers).items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b") and len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = _trunc_normal(rng, shape)
    return SupernetWeights(cfg, tensors)


def identity_config(weights: SupernetWeights) -> SubnetConfig:
    """The config that runs the stored weights as-is (all layers, full width)."""
    return SubnetConfig(keep=(True,) * weights.num_layers,
                        window=tuple(weights.layer_widths))


class ParamView(NamedTuple):
    name: str
    slices: Optional[tuple]  # None means the full tensor is active
    frozen: bool


def _check_config_dims(num_layers: int, layer_widths: Sequence[int],
                       config: SubnetConfig) -> None:
    if len(config.keep) != num_layers:
        raise ConfigError(f"config has {len(config.keep)} layers, model has {num_layers}")
    for i in range(num_layers):
        if config.keep[i]:
            w = config.window[i]
            if not (1 <= w <= layer_widths[i]):
                raise ConfigError(
                    f"layer {i}: window {w} outside [1, {layer_widths[i]}]")


def _validate_config(weights: SupernetWeights, config: SubnetConfig) -> None:
    _check_config_dims(weights.num_layers, weights.layer_widths, config)


def _subnet_views(num_layers: int, layer_widths: Sequence[int],
                  config: SubnetConfig) -> list[ParamView]:
    _check_config_dims(num_layers, layer_widths, config)
    views = [
        ParamView("patch_embed.w", None, False), ParamView("patch_embed.b", None, False),
        ParamView("pos_embed", None, False),
        ParamView("prompt.fc1.w", None, True), ParamView("prompt.fc1.b", None, True),
        ParamView("prompt.fc2.w", None, True), ParamView("prompt.fc2.b", None, True),
    ]
    for i in range(num_layers):
        if not config.keep[i]:
            continue
        w = int(config.window[i])
        pre = f"layers.{i}."
        for part in ("ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
                     "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g", "ln2.b"):
            views.append(ParamView(pre + part, None, False))
        full = w == layer_widths[i]
        views.append(ParamView(pre + "fc1.w", None if full else (slice(0, w), slice(None)), False))
        views.append(ParamView(pre + "fc1.b", None if full else (slice(0, w),), False))
        views.append(ParamView(pre + "fc2.w", None if full else (slice(None), slice(0, w)), False))
        views.append(ParamView(pre + "fc2.b", None, False))
    views.extend([
        ParamView("final_ln.g", None, False), ParamView("final_ln.b", None, False),
        ParamView("head.fc1.w", None, False), ParamView("head.fc1.b", None, False),
        ParamView("head.fc2.w", None, False), ParamView("head.fc2.b", None, False),
    ])
    return views


def param_views(weights: SupernetWeights, config: SubnetConfig) -> list[ParamView]:
    """Active parameter set: for each kept layer, fc1 rows/bias [0, w) and
    fc2 columns [0, w); everything else either fully active or absent."""
    return _subnet_views(weights.num_layers, weights.layer_widths, config)


def build_param_tensors(weights: SupernetWeights, config: SubnetConfig,
                        trainable: bool = False) -> tuple[dict[str, Tensor], list[ParamView]]:
    """Materialize the active slices as autodiff leaves.

    Sliced tensors are copied to contiguous buffers so the arithmetic is
    byte-identical to running an extracted standalone subnet.
    """
    views = param_views(weights, config)
    params: dict[str, Tensor] = {}
    for view in views:
        arr = weights.tensors[view.name]
        if view.slices is not None:
            arr = np.ascontiguousarray(arr[view.slices])
        params[view.name] = Tensor(arr, requires_grad=trainable and not view.frozen)
    return params, views


def _count_views(shapes: dict[str, tuple], views: list[ParamView]) -> int:
    total = 0
    for view in views:
        shape = shapes[view.name]
        if view.slices is not None:
            shape = tuple(len(range(*sl.indices(dim))) for sl, dim in zip(view.slices, shape))
        total += int(np.prod(shape)) if shape else 1
    return total


def param_count(weights: SupernetWeights, config: SubnetConfig) -> int:
    """Scalars in the active parameter set (embeddings, prompt, head included)."""
    return _count_views(_tensor_shapes(weights.config, weights.layer_widths),
                        param_views(weights, config))


def config_param_count(cfg: ModelConfig, config: SubnetConfig) -> int:
    """param_count against a full-width supernet of the given dimensions."""
    widths = [cfg.mlp_dim] * cfg.num_layers
    return _count_views(_tensor_shapes(cfg, widths),
                        _subnet_views(cfg.num_layers, widths, config))


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, H, W] -> [B, num_patches, patch_size**2], patches in row-major order."""
    b, h, w = images.shape
    g = h // patch_size
    x = images.reshape(b, g, patch_size, g, patch_size)
    x = x.transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(b, g * g, patch_size * patch_size), dtype=np.float32)


def encode_prompts(prompts: Sequence[PromptSpec], image_size: int) -> np.ndarray:
    for p in prompts:
        p.validate(image_size)
    return np.stack([p.encode(image_size) for p in prompts]).astype(np.float32)


class ActivationCapture:
    """Accumulates per-feature sums of squares of MLP inputs across batches."""

    def __init__(self):
        self.sq: dict[tuple, np.ndarray] = {}

    def add(self, layer: int, which: str, acts: np.ndarray) -> None:
        flat = acts.reshape(-1, acts.shape[-1]).astype(np.float64)
        key = (layer, which)
        sq = (flat * flat).sum(axis=0)
        if key in self.sq:
            self.sq[key] += sq
        else:
            self.sq[key] = sq

    def norms(self, layer: int, which: str) -> np.ndarray:
        return np.sqrt(self.sq[(layer, which)]).astype(np.float32)


def _encoder_layer(toks: Tensor, p: dict[str, Tensor], pre: str, num_heads: int,
                   layer: int, capture: Optional[ActivationCapture]) -> Tensor:
    b, t, d = toks.data.shape
    hd = d // num_heads
    a = T.layernorm(toks, p[pre + "ln1.g"], p[pre + "ln1.b"])

    def split_heads(z):
        z = T.reshape(z, (b, t, num_heads, hd))
        return T.transpose(z, (0, 2, 1, 3))

    q = split_heads(T.linear(a, p[pre + "attn.wq"], p[pre + "attn.bq"]))
    k = split_heads(T.linear(a, p[pre + "attn.wk"], p[pre + "attn.bk"]))
    v = split_heads(T.linear(a, p[pre + "attn.wv"], p[pre + "attn.bv"]))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                   Tensor(np.float32(1.0 / math.sqrt(hd))))
    attn = T.softmax_lastdim(scores)
    mix = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
    mix = T.reshape(mix, (b, t, d))
    toks = T.add(toks, T.linear(mix, p[pre + "attn.wo"], p[pre + "attn.bo"]))

    m = T.layernorm(toks, p[pre + "ln2.g"], p[pre + "ln2.b"])
    if capture is not None:
        capture.add(layer, "fc1", m.data)
    h = T.gelu(T.linear(m, p[pre + "fc1.w"], p[pre + "fc1.b"]))
    if capture is not None:
        capture.add(layer, "fc2", h.data)
    return T.add(toks, T.linear(h, p[pre + "fc2.w"], p[pre + "fc2.b"]))


def forward_batch(weights: SupernetWeights, config: Optional[SubnetConfig],
                  images: np.ndarray, prompts: Sequence[PromptSpec],
                  params: Optional[dict[str, Tensor]] = None,
                  capture: Optional[ActivationCapture] = None,
                  space=None) -> Tensor:
    """Mask logits [B, H, W] for a batch of images and one prompt each.

    `params` (from build_param_tensors) supplies the leaves during
    training; otherwise fresh non-trainable leaves are built here.
    """
    cfg = weights.config
    if config is None:
        config = identity_config(weights)
    if space is not None:
        space.validate_config(config)
    _validate_config(weights, config)
    if images.ndim != 3 or images.shape[1:] != (cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"images shape {images.shape} != (B, {cfg.image_size}, {cfg.image_size})")
    if len(prompts) != images.shape[0]:
        raise DimensionError("one prompt per image required")
    if params is None:
        params, _ = build_param_tensors(weights, config)

    b = images.shape[0]
    g, ps, d = cfg.grid, cfg.patch_size, cfg.embed_dim
    n = cfg.num_patches

    x = T.linear(Tensor(patchify(images, ps)), params["patch_embed.w"], params["patch_embed.b"])
    x = T.add(x, params["pos_embed"])
    pe = Tensor(encode_prompts(prompts, cfg.image_size))
    ph = T.gelu(T.linear(pe, params["prompt.fc1.w"], params["prompt.fc1.b"]))
    pt = T.linear(ph, params["prompt.fc2.w"], params["prompt.fc2.b"])
    toks = T.concat([x, T.reshape(pt, (b, 1, d))], axis=1)

    for i in range(weights.num_layers):
        if config.keep[i]:
            toks = _encoder_layer(toks, params, f"layers.{i}.", cfg.num_heads, i, capture)

    toks = T.layernorm(toks, params["final_ln.g"], params["final_ln.b"])
    patch_t = T.narrow(toks, 1, 0, n)
    prompt_t = T.broadcast_to(T.narrow(toks, 1, n, 1), (b, n, d))
    h = T.concat([patch_t, prompt_t], axis=2)
    h = T.gelu(T.linear(h, params["head.fc1.w"], params["head.fc1.b"]))
    logits = T.linear(h, params["head.fc2.w"], params["head.fc2.b"])
    logits = T.reshape(logits, (b, g, g, ps, ps))
    logits = T.transpose(logits, (0, 1, 3, 2, 4))
    return T.reshape(logits, (b, cfg.image_size, cfg.image_size))


def forward(weights: SupernetWeights, config: Optional[SubnetConfig],
            image: np.ndarray, prompt: PromptSpec, space=None) -> np.ndarray:
    """Single-sample mask logits [H, W] (no gradient tracking)."""
    out = forward_batch(weights, config, np.asarray(image, dtype=np.float32)[None],
                        [prompt], space=space)
    return out.data[0]


def extract_subnet(weights: SupernetWeights, config: SubnetConfig) -> SupernetWeights:
    """Materialize a standalone model holding only the active tensors.

    Kept layers are renumbered contiguously; forward on the result is
    bit-identical to running the sliced supernet."""
    _validate_config(weights, config)
    kept = [i for i in range(weights.num_layers) if config.keep[i]]
    new_cfg = ModelConfig(
        image_size=weights.config.image_size, patch_size=weights.config.patch_size,
        embed_dim=weights.config.embed_dim, num_layers=len(kept),
        num_heads=weights.config.num_heads, mlp_dim=weights.config.mlp_dim,
        prompt_mode=weights.config.prompt_mode)
    tensors: dict[str, np.ndarray] = {}
    widths = []
    renumber = {old: new for new, old in enumerate(kept)}
    for view in param_views(weights, config):
        arr = weights.tensors[view.name]
        if view.slices is not None:
            arr = arr[view.slices]
        name = view.name
        if name.startswith("layers."):
            _, idx, rest = name.split(".", 2)
            name = f"layers.{renumber[int(idx)]}.{rest}"
        tensors[name] = np.ascontiguousarray(arr)
    for old in kept:
        widths.append(int(config.window[old]))
    return SupernetWeights(new_cfg, tensors, widths)
