"""Sandwich-rule supernet training: per batch, the maximal, minimal, and
one random subnet are optimized in sequence, each with its own masked
optimizer update so inactive parameter slices stay bit-identical.

Also houses the dice and cross-entropy losses, the linear-to-1%
learning-rate decay, the mIoU evaluator, and full training-state
checkpointing (weights + Adam moments + rng stream) for
bitwise-reproducible resumption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .data import collate
from .errors import (ConfigError, ContractError, DimensionError, FormatError,
                     InputError, TrainingFault)
from .ioutil import atomic_write_text, fmt_float
from .model import (ModelConfig, SubnetConfig, SupernetWeights, _tensor_shapes,
                    build_param_tensors, forward_batch, identity_config)
from .space import SearchSpace, sample_subnet
from .tensor import (AdamState, Tensor, adam_step, add, backward, mean, mul,
                     reset_tape, sigmoid, softplus, sub, sum_)

DICE_EPS = 1.0


@dataclass
class TrainConfig:
    steps: int
    lr: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    eval_interval: int = 100
    eval_samples: int = 64
    target_metric: Optional[str] = None   # "min_miou" or "max_miou"; stops early
    target_value: Optional[float] = None
    accumulate: bool = False              # one summed update instead of three

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError("steps must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size <= 0 or self.eval_interval <= 0 or self.eval_samples <= 0:
            raise ConfigError("batch_size, eval_interval, eval_samples must be positive")
        if self.target_metric is not None and self.target_metric not in ("min_miou", "max_miou"):
            raise ConfigError(f"unknown target metric {self.target_metric!r}")


@dataclass
class TrainResult:
    train_rows: list = field(default_factory=list)  # {step, role, loss, lr}
    eval_rows: list = field(default_factory=list)   # {step, role, miou}
    iterations_to_target: Optional[int] = None
    final_step: int = 0
    stopped_early: bool = False
    opt_state: Optional[AdamState] = None
    rng: Optional[np.random.Generator] = None


def dice_loss(pred_logits: Tensor, gt_mask: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Soft dice: 1 - (2 sum(sigmoid(pred) * gt) + eps) / (sum(sigmoid(pred))
    + sum(gt) + eps). Batched inputs are averaged over the batch."""
    gt = np.asarray(gt_mask, dtype=np.float32)
    if pred_logits.data.shape != gt.shape:
        raise DimensionError(
            f"dice: prediction {pred_logits.data.shape} vs mask {gt.shape}")
    p = sigmoid(pred_logits)
    axes = None if gt.ndim <= 2 else tuple(range(1, gt.ndim))
    inter = sum_(mul(p, Tensor(gt)), axis=axes)
    psum = sum_(p, axis=axes)
    gsum = gt.sum(axis=axes, dtype=np.float32)
    num = 2.0 * inter + eps
    den = psum + Tensor(gsum + np.float32(eps))
    dice = sub(Tensor(np.ones(num.shape, dtype=np.float32)), num / den)
    return dice if axes is None else mean(dice)


def bce_loss(pred_logits: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Mean per-pixel binary cross-entropy on logits.

    softplus(x) - x*y is the stable form of -[y log s(x) + (1-y) log(1-s(x))]
    for y in {0, 1}.
    """
    gt = np.asarray(gt_mask, dtype=np.float32)
    if pred_logits.data.shape != gt.shape:
        raise DimensionError(
            f"bce: prediction {pred_logits.data.shape} vs mask {gt.shape}")
    return mean(sub(softplus(pred_logits), mul(pred_logits, Tensor(gt))))


def pretrain_loss(pred_logits: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Dice plus pixel-wise cross-entropy, used for from-scratch pretraining.

    Pure dice drives logits to saturation early and its gradient carries a
    p*(1-p) factor, so confidently wrong pixels stop learning; the
    cross-entropy term keeps those gradients alive. Supernet fine-tuning
    sticks to plain dice (see sandwich_step).
    """
    return add(dice_loss(pred_logits, gt_mask), bce_loss(pred_logits, gt_mask))


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """Linear decay from base_lr to 1% of base_lr over the full run."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - 0.99 * step / total_steps)


def evaluate_miou(weights: SupernetWeights, config: Optional[SubnetConfig],
                  eval_set: Sequence, threshold: float = 0.5,
                  batch_size: int = 16, space: Optional[SearchSpace] = None) -> float:
    """Mean IoU of thresholded sigmoid masks against ground truth; the IoU
    of two empty masks counts as 1."""
    if not eval_set:
        raise InputError("evaluation set is empty")
    if not 0.0 < threshold < 1.0:
        raise ContractError("threshold must lie strictly inside (0, 1)")
    logit_th = math.log(threshold / (1.0 - threshold))
    total, count = 0.0, 0
    for start in range(0, len(eval_set), batch_size):
        chunk = eval_set[start:start + batch_size]
        images, gts, prompts = collate(chunk)
        logits = forward_batch(weights, config, images, prompts, space=space).data
        pred = logits > logit_th
        gt = gts > 0.5
        inter = (pred & gt).sum(axis=(1, 2)).astype(np.float64)
        union = (pred | gt).sum(axis=(1, 2)).astype(np.float64)
        iou = np.where(union == 0, 1.0, inter / np.maximum(union, 1.0))
        total += float(iou.sum())
        count += len(chunk)
    return total / count


def _grad_pass(weights: SupernetWeights, config: SubnetConfig, batch: tuple,
               role: str, step, loss_fn: Callable = dice_loss) -> tuple[float, dict, dict, str]:
    """One forward/backward on the active slices; returns (loss, grads,
    active slice map, digest) without touching the optimizer."""
    images, gts, prompts = batch
    params, views = build_param_tensors(weights, config, trainable=True)
    try:
        logits = forward_batch(weights, config, images, prompts, params=params)
        loss = loss_fn(logits, gts)
    except ContractError as exc:
        reset_tape()
        raise TrainingFault(f"step {step} ({role} pass): {exc}") from exc
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        reset_tape()
        raise TrainingFault(f"step {step} ({role} pass): loss is not finite")
    backward(loss)
    grads, active = {}, {}
    for view in views:
        if view.frozen:
            continue
        t = params[view.name]
        grads[view.name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        active[view.name] = view.slices
    return loss_val, grads, active, config.digest()


def _apply_update(weights: SupernetWeights, grads: dict, active: dict,
                  opt_state: AdamState, lr: float) -> None:
    params = {name: weights.tensors[name] for name in grads}
    adam_step(params, grads, opt_state, lr, active=active)


def _merge_into(acc: dict, grads: dict, active: dict, weights: SupernetWeights) -> None:
    """Accumulate slice gradients into full-shape buffers, widening the
    active region to the union (active slices are nested prefixes)."""
    for name, g in grads.items():
        sl = active[name]
        full_shape = weights.tensors[name].shape
        if name not in acc:
            acc[name] = [np.zeros(full_shape, dtype=np.float32), sl, -1]
        buf, best_sl, best_size = acc[name]
        region = sl if sl is not None else tuple(slice(None) for _ in full_shape)
        buf[region] += g
        size = int(np.prod(g.shape)) if g.shape else 1
        if best_size < size:
            acc[name][1] = sl
            acc[name][2] = size
        elif best_size == -1:
            acc[name][2] = size


SANDWICH_ROLES = (("max", "maximal"), ("min", "minimal"), ("random", "random"))


def sandwich_step(weights: SupernetWeights, space: SearchSpace, batch: tuple,
                  opt_state: AdamState, rng: np.random.Generator, lr: float,
                  accumulate: bool = False, step=None) -> list[dict]:
    """Three passes on the same batch, maximal then minimal then random.

    By default each pass applies its own optimizer update before the next
    pass runs. With accumulate=True the three gradients are summed over
    the union of active slices and applied once.
    """
    entries = []
    acc: dict = {}
    for role, mode in SANDWICH_ROLES:
        config = sample_subnet(space, mode, rng)
        loss_val, grads, active, digest = _grad_pass(weights, config, batch, role, step)
        if accumulate:
            _merge_into(acc, grads, active, weights)
        else:
            _apply_update(weights, grads, active, opt_state, lr)
        entries.append({"role": role, "loss": loss_val, "digest": digest,
                        "config": config})
    if accumulate:
        grads = {name: (buf[sl] if sl is not None else buf)
                 for name, (buf, sl, _) in acc.items()}
        active = {name: sl for name, (_, sl, _) in acc.items()}
        _apply_update(weights, grads, active, opt_state, lr)
    return entries


def _train_loop(weights: SupernetWeights, space: Optional[SearchSpace],
                train_set: Sequence, val_set: Sequence, tc: TrainConfig,
                start_step: int = 0, opt_state: Optional[AdamState] = None,
                rng: Optional[np.random.Generator] = None,
                progress: Optional[Callable[[str], None]] = None) -> TrainResult:
    if not train_set:
        raise InputError("training set is empty")
    if not val_set:
        raise InputError("validation set is empty")
    if opt_state is None:
        opt_state = AdamState()
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(tc.seed))
    eval_slice = list(val_set[:tc.eval_samples])
    if space is not None:
        eval_specs = [("max", space.maximal()), ("min", space.minimal())]
    else:
        eval_specs = [("max", identity_config(weights))]
    result = TrainResult(opt_state=opt_state, rng=rng)

    for step in range(start_step, tc.steps):
        lr = lr_schedule(step, tc.steps, tc.lr)
        idx = rng.integers(0, len(train_set), size=tc.batch_size)
        batch = collate(train_set, idx)
        if space is not None:
            entries = sandwich_step(weights, space, batch, opt_state, rng, lr,
                                    accumulate=tc.accumulate, step=step)
        else:
            config = eval_specs[0][1]
            loss_val, grads, active, digest = _grad_pass(weights, config, batch,
                                                         "max", step,
                                                         loss_fn=pretrain_loss)
            _apply_update(weights, grads, active, opt_state, lr)
            entries = [{"role": "max", "loss": loss_val, "digest": digest}]
        now = step + 1
        for e in entries:
            result.train_rows.append({"step": now, "role": e["role"],
                                      "loss": e["loss"], "lr": lr})
        result.final_step = now
        if now % tc.eval_interval == 0 or now == tc.steps:
            for role, cfg in eval_specs:
                miou = evaluate_miou(weights, cfg, eval_slice)
                result.eval_rows.append({"step": now, "role": role, "miou": miou})
                if (result.iterations_to_target is None
                        and tc.target_metric == f"{role}_miou"
                        and tc.target_value is not None
                        and miou >= tc.target_value):
                    result.iterations_to_target = now
            if progress is not None:
                snap = {r["role"]: r["miou"] for r in result.eval_rows
                        if r["step"] == now}
                stats = " ".join(f"{k}_miou={v:.4f}" for k, v in snap.items())
                progress(f"step {now}/{tc.steps} loss={entries[-1]['loss']:.4f} {stats}")
            if result.iterations_to_target is not None:
                result.stopped_early = now < tc.steps
                break
    return result


def pretrain(weights: SupernetWeights, train_set: Sequence, val_set: Sequence,
             tc: TrainConfig,
             progress: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train the full model only (no sampling) with the dice +
    cross-entropy objective; stands in for upstream pretrained weights so
    importance profiling and scoring are meaningful."""
    return _train_loop(weights, None, train_set, val_set, tc, progress=progress)


def train_supernet(weights: SupernetWeights, space: SearchSpace,
                   train_set: Sequence, val_set: Sequence, tc: TrainConfig,
                   start_step: int = 0, opt_state: Optional[AdamState] = None,
                   rng: Optional[np.random.Generator] = None,
                   progress: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Sandwich-train the supernet in place over the space."""
    return _train_loop(weights, space, train_set, val_set, tc, start_step=start_step,
                       opt_state=opt_state, rng=rng, progress=progress)


# ---------------------------------------------------------------------------
# training-state checkpoints


def checkpoint_save(path: str, weights: SupernetWeights, opt_state: AdamState,
                    step: int, rng: np.random.Generator) -> None:
    """Full resumable state: weights, Adam moments, step, rng stream."""
    tensors = dict(weights.tensors)
    for name, arr in opt_state.m.items():
        tensors["opt.m." + name] = arr
    for name, arr in opt_state.v.items():
        tensors["opt.v." + name] = arr
    meta = {"model": weights.config.to_json(), "layer_widths": weights.layer_widths,
            "step": int(step), "adam_t": int(opt_state.t),
            "rng": rng.bit_generator.state}
    save_tensors(path, tensors, meta)


def checkpoint_load(path: str) -> tuple[SupernetWeights, AdamState, int,
                                        np.random.Generator]:
    tensors, meta = load_tensors(path)
    if not meta or "model" not in meta or "rng" not in meta:
        raise FormatError(f"{path}: not a training-state checkpoint (missing metadata)")
    cfg = ModelConfig.from_json(meta["model"])
    widths = meta.get("layer_widths") or [cfg.mlp_dim] * cfg.num_layers
    model_tensors, m, v = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("opt.m."):
            m[name[len("opt.m."):]] = arr
        elif name.startswith("opt.v."):
            v[name[len("opt.v."):]] = arr
        else:
            model_tensors[name] = arr
    expected = _tensor_shapes(cfg, widths)
    if set(model_tensors) != set(expected):
        unknown = sorted(set(model_tensors) - set(expected))
        missing = sorted(set(expected) - set(model_tensors))
        raise FormatError(f"{path}: tensor names do not match the model: "
                          f"unknown={unknown[:4]} missing={missing[:4]}")
    bad = sorted((set(m) | set(v)) - set(model_tensors))
    if bad:
        raise FormatError(f"{path}: optimizer state for unknown tensors: {bad[:4]}")
    weights = SupernetWeights(cfg, model_tensors, widths)
    opt_state = AdamState()
    opt_state.m, opt_state.v = m, v
    opt_state.t = int(meta.get("adam_t", 0))
    rng = np.random.Generator(np.random.PCG64())
    try:
        rng.bit_generator.state = meta["rng"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid rng state: {exc}") from exc
    return weights, opt_state, int(meta.get("step", 0)), rng


# ---------------------------------------------------------------------------
# log files


def write_trainlog(path: str, rows: Sequence[dict]) -> None:
    lines = ["step,role,loss,lr"]
    for r in rows:
        lines.append(f"{r['step']},{r['role']},{fmt_float(r['loss'])},{fmt_float(r['lr'])}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_evals(path: str, rows: Sequence[dict]) -> None:
    lines = ["step,role,miou"]
    for r in rows:
        lines.append(f"{r['step']},{r['role']},{fmt_float(r['miou'])}")
    atomic_write_text(path, "\n".join(lines) + "\n")
