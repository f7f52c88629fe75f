"""Synthetic promptable-segmentation data: noisy grayscale images of 1-3
flat shapes, one of which is the prompted target.

Everything is a pure function of the sample seed, so datasets never need
to ship: the manifest records the seed and counts, the binary file holds
the rendered tensors. Train and validation draw from disjoint seed ranges.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError, FormatError, InputError
from .ioutil import atomic_write_text
from .model import PromptSpec

MIN_MASK_AREA = 16
NOISE_SIGMA = 0.05
BOX_PAD_MAX = 5
GRAY_LEVELS = (0.35, 0.55, 0.75, 0.95)
VAL_SEED_OFFSET = 5_000_000
DATASET_VERSION = 1


@dataclass
class Sample:
    image: np.ndarray        # [S, S] float32 in [0, 1]
    masks: list              # binary [S, S] arrays, one per visible instance
    target_index: int
    prompt: PromptSpec

    @property
    def target_mask(self) -> np.ndarray:
        return self.masks[self.target_index]


def _rect_mask(rng: np.random.Generator, s: int) -> np.ndarray:
    w = int(rng.integers(8, s // 2 + 1))
    h = int(rng.integers(8, s // 2 + 1))
    x0 = int(rng.integers(0, s - w + 1))
    y0 = int(rng.integers(0, s - h + 1))
    m = np.zeros((s, s), dtype=bool)
    m[y0:y0 + h, x0:x0 + w] = True
    return m


def _ellipse_mask(rng: np.random.Generator, s: int) -> np.ndarray:
    cx = rng.uniform(0.2 * s, 0.8 * s)
    cy = rng.uniform(0.2 * s, 0.8 * s)
    rx = rng.uniform(4.0, 0.25 * s)
    ry = rng.uniform(4.0, 0.25 * s)
    yy, xx = np.mgrid[0:s, 0:s]
    return ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0


def _triangle_mask(rng: np.random.Generator, s: int) -> np.ndarray:
    pts = rng.uniform(2.0, s - 2.0, size=(3, 2))
    yy, xx = np.mgrid[0:s, 0:s]
    px, py = xx + 0.5, yy + 0.5
    sides = []
    for i in range(3):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % 3]
        sides.append((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0))
    inside_ccw = (sides[0] >= 0) & (sides[1] >= 0) & (sides[2] >= 0)
    inside_cw = (sides[0] <= 0) & (sides[1] <= 0) & (sides[2] <= 0)
    return inside_ccw | inside_cw


_SHAPE_FNS = (_rect_mask, _ellipse_mask, _triangle_mask)


def point_prompt(mask: np.ndarray, rng: np.random.Generator) -> PromptSpec:
    """Uniform draw over the mask's foreground pixels."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise InputError("cannot place a point prompt on an empty mask")
    i = int(rng.integers(0, len(xs)))
    return PromptSpec.point(int(xs[i]), int(ys[i]))


def box_prompt(mask: np.ndarray, rng: np.random.Generator,
               pad_max: int = BOX_PAD_MAX) -> PromptSpec:
    """Tight bounding box padded per side by uniform [0, pad_max] pixels,
    clipped to the image; right/bottom edges are exclusive."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise InputError("cannot place a box prompt on an empty mask")
    s = mask.shape[1]
    pads = rng.integers(0, pad_max + 1, size=4)
    x0 = max(0, int(xs.min()) - int(pads[0]))
    y0 = max(0, int(ys.min()) - int(pads[1]))
    x1 = min(s, int(xs.max()) + 1 + int(pads[2]))
    y1 = min(mask.shape[0], int(ys.max()) + 1 + int(pads[3]))
    return PromptSpec.box(x0, y0, x1, y1)


def gen_sample(seed: int, image_size: int = 64, prompt_mode: str = "point") -> Sample:
    """Render one sample, fully determined by the seed.

    Later shapes occlude earlier ones; instance masks are the visible
    regions. Layouts where any instance is reduced below MIN_MASK_AREA
    pixels are redrawn from the same stream.
    """
    if prompt_mode not in ("point", "box"):
        raise ConfigError(f"unknown prompt_mode {prompt_mode!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    s = image_size
    while True:
        n = int(rng.integers(1, 4))
        levels = [GRAY_LEVELS[i] for i in rng.permutation(len(GRAY_LEVELS))[:n]]
        background = float(rng.uniform(0.05, 0.2))
        drawn = [_SHAPE_FNS[int(rng.integers(0, 3))](rng, s) for _ in range(n)]
        visible = []
        for i, m in enumerate(drawn):
            vis = m.copy()
            for later in drawn[i + 1:]:
                vis &= ~later
            visible.append(vis)
        if all(int(v.sum()) >= MIN_MASK_AREA for v in visible):
            break
    image = np.full((s, s), background, dtype=np.float32)
    for m, level in zip(drawn, levels):
        image[m] = level
    image = np.clip(image + rng.normal(0.0, NOISE_SIGMA, size=(s, s)), 0.0, 1.0)
    image = image.astype(np.float32)
    target = int(rng.integers(0, n))
    if prompt_mode == "point":
        prompt = point_prompt(visible[target], rng)
    else:
        prompt = box_prompt(visible[target], rng)
    return Sample(image=image, masks=visible, target_index=target, prompt=prompt)


def _sample_seed(dataset_seed: int, split: str, i: int) -> int:
    base = dataset_seed * 10_000_000
    return base + i + (VAL_SEED_OFFSET if split == "val" else 0)


def _pack_split(samples: list, prefix: str, tensors: dict) -> None:
    tensors[prefix + ".images"] = np.stack([s.image for s in samples])
    tensors[prefix + ".gt"] = np.stack(
        [s.target_mask.astype(np.float32) for s in samples])
    kinds, coords = [], []
    for s in samples:
        if s.prompt.kind == "point":
            kinds.append(0.0)
            x, y = s.prompt.coords
            coords.append([x, y, x, y])
        else:
            kinds.append(1.0)
            coords.append(list(s.prompt.coords))
    tensors[prefix + ".prompt_kind"] = np.asarray(kinds, dtype=np.float32)
    tensors[prefix + ".prompt_coords"] = np.asarray(coords, dtype=np.float32)


def make_dataset(out_dir: str, n_train: int, n_val: int, seed: int,
                 prompt_mode: str = "point", image_size: int = 64) -> None:
    """Generate both splits and write manifest.json + samples.bin."""
    if n_train < 0 or n_val < 0 or n_train + n_val == 0:
        raise ConfigError("dataset needs a positive number of samples")
    if max(n_train, n_val) > VAL_SEED_OFFSET:
        raise ConfigError(f"split size exceeds the seed-range width {VAL_SEED_OFFSET}")
    train = [gen_sample(_sample_seed(seed, "train", i), image_size, prompt_mode)
             for i in range(n_train)]
    val = [gen_sample(_sample_seed(seed, "val", i), image_size, prompt_mode)
           for i in range(n_val)]
    tensors: dict[str, np.ndarray] = {}
    if train:
        _pack_split(train, "train", tensors)
    if val:
        _pack_split(val, "val", tensors)
    os.makedirs(out_dir, exist_ok=True)
    save_tensors(os.path.join(out_dir, "samples.bin"), tensors)
    manifest = {"version": DATASET_VERSION, "seed": seed, "n_train": n_train,
                "n_val": n_val, "prompt_mode": prompt_mode, "image_size": image_size}
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _unpack_split(tensors: dict, prefix: str, n: int, image_size: int) -> list:
    try:
        images = tensors[prefix + ".images"]
        gts = tensors[prefix + ".gt"]
        kinds = tensors[prefix + ".prompt_kind"]
        coords = tensors[prefix + ".prompt_coords"]
    except KeyError as exc:
        raise FormatError(f"dataset missing tensor {exc.args[0]!r}") from exc
    if images.shape != (n, image_size, image_size) or gts.shape != images.shape:
        raise FormatError(f"dataset split {prefix!r} has shape {images.shape}, "
                          f"manifest says {(n, image_size, image_size)}")
    samples = []
    for i in range(n):
        c = coords[i]
        if kinds[i] == 0.0:
            prompt = PromptSpec.point(float(c[0]), float(c[1]))
        else:
            prompt = PromptSpec.box(float(c[0]), float(c[1]), float(c[2]), float(c[3]))
        samples.append(Sample(image=images[i], masks=[gts[i] > 0.5],
                              target_index=0, prompt=prompt))
    return samples


def load_dataset(dataset_dir: str) -> tuple[list, list]:
    """Read a generated dataset directory back as (train, val) sample lists.

    Loaded samples carry only the target instance mask."""
    manifest_path = os.path.join(dataset_dir, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: not valid JSON: {exc}") from exc
    for key in ("n_train", "n_val", "image_size"):
        if key not in manifest:
            raise FormatError(f"{manifest_path}: missing key {key!r}")
    tensors, _ = load_tensors(os.path.join(dataset_dir, "samples.bin"))
    size = int(manifest["image_size"])
    train = (_unpack_split(tensors, "train", int(manifest["n_train"]), size)
             if manifest["n_train"] else [])
    val = (_unpack_split(tensors, "val", int(manifest["n_val"]), size)
           if manifest["n_val"] else [])
    return train, val


def collate(samples: list, indices=None) -> tuple[np.ndarray, np.ndarray, list]:
    """Stack samples into (images, gt_masks, prompts) training arrays."""
    if indices is None:
        indices = range(len(samples))
    picked = [samples[int(i)] for i in indices]
    if not picked:
        raise InputError("empty batch")
    images = np.stack([s.image for s in picked])
    gts = np.stack([np.asarray(s.target_mask, dtype=np.float32) for s in picked])
    prompts = [s.prompt for s in picked]
    return images, gts, prompts


def as_batches(samples: list, batch_size: int, limit_batches=None) -> list:
    """Sequential (images, prompts) chunks, e.g. for norm calibration."""
    if batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([s.image for s in chunk])
        out.append((images, [s.prompt for s in chunk]))
        if limit_batches is not None and len(out) >= limit_batches:
            break
    return out
