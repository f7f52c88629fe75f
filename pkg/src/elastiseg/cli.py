"""Command-line pipeline: data -> pretrain -> profile -> build-space ->
train-supernet -> sample/search -> extract/pareto/eval.

Every command is deterministic given --seed (falling back to the
ELASTISEG_SEED environment variable, then 0), writes its outputs atomically,
and reports progress on stderr. Exit codes: 0 success, 2 configuration or
contract errors, 3 data or format errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from . import __version__
from .data import as_batches, load_dataset, make_dataset
from .errors import (ConfigError, ContractError, DimensionError, FormatError,
                     InputError, TrainingFault)
from .ioutil import atomic_write_text, fmt_float
from .model import (ModelConfig, SupernetWeights, extract_subnet, identity_config,
                    init_weights, param_count as weights_param_count)
from .plots import pareto_scatter, training_curves
from .search import (SampleRecord, SearchConstraints, encode_genome, pareto_frontier,
                     read_records, search, write_records)
from .space import (build_search_space, config_from_json, config_to_json, load_space,
                    param_count, save_space)
from .train import (TrainConfig, evaluate_miou, pretrain, train_supernet,
                    write_evals, write_trainlog)

_RUN_CONFIG_SECTIONS = {
    "model": {"image_size", "patch_size", "embed_dim", "num_layers", "num_heads",
              "mlp_dim", "prompt_mode"},
    "data": {"train", "val", "seed", "prompt_mode", "image_size"},
    "space": {"scorer", "fractions", "theta", "prunable", "shield",
              "calib_batches", "calib_batch_size"},
    "train": {"steps", "lr", "batch_size", "seed", "eval_interval", "eval_samples"},
    "search": {"budget", "max_params", "min_miou", "seed"},
}


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _resolve_seed(value: Optional[int]) -> int:
    if value is not None:
        return value
    env = os.environ.get("ELASTISEG_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"ELASTISEG_SEED must be an integer, got {env!r}")


def load_run_config(path: Optional[str]) -> dict:
    """Schema-check a {model, data, space, train, search} JSON document;
    unknown sections or keys are rejected before any work starts."""
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    for section, content in doc.items():
        if section not in _RUN_CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(content, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key in content:
            if key not in _RUN_CONFIG_SECTIONS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
    return doc


def _pick(flag, section: dict, key: str, default):
    """Priority: explicit CLI flag, then config file, then default."""
    if flag is not None:
        return flag
    return section.get(key, default)


def _load_weights(path: str) -> SupernetWeights:
    weights, _ = SupernetWeights.load(path)
    return weights


def _load_subnet_config(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read subnet config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if isinstance(doc, dict) and "config" in doc:
        doc = doc["config"]
    return config_from_json(doc)


def _check_space_matches(space, weights) -> None:
    if space.model.to_json() != weights.config.to_json():
        raise ConfigError("space.json and checkpoint describe different models")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    seed = _resolve_seed(args.seed)
    _progress(f"generating {args.train} train / {args.val} val samples (seed {seed})")
    make_dataset(args.out, args.train, args.val, seed,
                 prompt_mode=args.prompt_mode, image_size=args.image_size)
    _progress(f"wrote {os.path.join(args.out, 'manifest.json')}")
    return 0


def cmd_pretrain(args) -> int:
    run_cfg = load_run_config(args.config)
    model_section = run_cfg.get("model", {})
    train_section = run_cfg.get("train", {})
    try:
        model_cfg = ModelConfig(**model_section)
    except TypeError as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc
    seed = _resolve_seed(_pick(args.seed, train_section, "seed", None))
    tc = TrainConfig(
        steps=_pick(args.steps, train_section, "steps", 2000),
        lr=_pick(args.lr, train_section, "lr", 1e-4),
        batch_size=_pick(args.batch_size, train_section, "batch_size", 8),
        seed=seed,
        eval_interval=_pick(args.eval_every, train_section, "eval_interval", 100),
        eval_samples=_pick(args.eval_samples, train_section, "eval_samples", 64))
    train_set, val_set = load_dataset(args.data)
    weights = init_weights(model_cfg, seed)
    _progress(f"pretraining {tc.steps} steps (seed {seed})")
    result = pretrain(weights, train_set, val_set, tc, progress=_progress)
    weights.save(args.out, extra_meta={"step": result.final_step})
    final = [r for r in result.eval_rows if r["role"] == "max"]
    miou = final[-1]["miou"] if final else float("nan")
    print(f"steps={result.final_step} max_miou={fmt_float(miou)}")
    return 0


def cmd_profile_layers(args) -> int:
    from .space import layer_importance

    weights = _load_weights(args.ckpt)
    train_set, _ = load_dataset(args.data)
    shots = train_set[:args.shots]
    if not shots:
        raise InputError("no samples available for profiling")
    _progress(f"profiling {weights.num_layers} layers on {len(shots)} samples")
    base = evaluate_miou(weights, identity_config(weights), shots)
    importance = layer_importance(weights, shots)
    doc = {"importance": [float(x) for x in importance],
           "base_miou": float(base), "shots": len(shots)}
    atomic_write_text(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _progress(f"wrote {args.out}")
    return 0


def _load_importance(path: str, num_layers: int) -> np.ndarray:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read importance file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "importance" not in doc:
        raise FormatError(f"{path}: missing 'importance' list")
    imp = np.asarray(doc["importance"], dtype=np.float64)
    if imp.shape != (num_layers,):
        raise FormatError(f"{path}: importance has length {imp.size}, "
                          f"model has {num_layers} layers")
    return imp


def cmd_build_space(args) -> int:
    weights = _load_weights(args.ckpt)
    importance = _load_importance(args.importance, weights.num_layers)
    try:
        fractions = [float(x) for x in args.fractions.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --fractions value: {exc}") from exc
    k_prunable = args.prunable
    if k_prunable is None:
        k_prunable = max(0, weights.num_layers // 2 - 1)
    calib = []
    if args.scorer == "wanda":
        train_set, _ = load_dataset(args.data)
        calib = as_batches(train_set, args.calib_batch_size,
                           limit_batches=args.calib_batches)
        if not calib:
            raise InputError("no calibration samples available")
    _progress(f"building space: scorer={args.scorer} shield={args.shield} "
              f"prunable={k_prunable} fractions={fractions}")
    space, reordered = build_search_space(
        importance, k_prunable, args.shield, fractions, args.theta,
        args.scorer, weights, calib)
    save_space(args.out, space)
    reordered.save(args.out_ckpt)
    _progress(f"wrote {args.out} and {args.out_ckpt} "
              f"(menu {list(space.menu)}, prunable {list(space.prunable)}, "
              f"shielded {list(space.shielded)})")
    return 0


def cmd_train_supernet(args) -> int:
    space = load_space(args.space)
    weights = _load_weights(args.ckpt)
    _check_space_matches(space, weights)
    train_set, val_set = load_dataset(args.data)
    seed = _resolve_seed(args.seed)
    tc = TrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size,
                     seed=seed, eval_interval=args.eval_every,
                     eval_samples=args.eval_samples,
                     target_metric="min_miou" if args.target_miou is not None else None,
                     target_value=args.target_miou)
    _progress(f"sandwich training {tc.steps} steps (seed {seed})")
    result = train_supernet(weights, space, train_set, val_set, tc, progress=_progress)
    if args.logs:
        os.makedirs(args.logs, exist_ok=True)
        write_trainlog(os.path.join(args.logs, "trainlog.csv"), result.train_rows)
        write_evals(os.path.join(args.logs, "evals.csv"), result.eval_rows)
        training_curves(result.train_rows, result.eval_rows,
                        os.path.join(args.logs, "curves.svg"))
        _progress(f"wrote logs under {args.logs}")
    if args.out:
        weights.save(args.out, extra_meta={"step": result.final_step})
        _progress(f"wrote {args.out}")
    last = {r["role"]: r["miou"] for r in result.eval_rows
            if r["step"] == result.final_step}
    target = (result.iterations_to_target if result.iterations_to_target is not None
              else "none")
    print(f"steps={result.final_step} "
          f"max_miou={fmt_float(last.get('max', float('nan')))} "
          f"min_miou={fmt_float(last.get('min', float('nan')))} "
          f"iterations_to_target={target}")
    return 0


def cmd_sample(args) -> int:
    space = load_space(args.space)
    weights = _load_weights(args.ckpt)
    _check_space_matches(space, weights)
    _, val_set = load_dataset(args.data)
    eval_slice = val_set[:args.eval_samples]
    if not eval_slice:
        raise InputError("validation split is empty")
    seed = _resolve_seed(args.seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    seen = set()
    records = []
    total = space.size()
    _progress(f"sampling up to {args.n} distinct subnets (space size {total})")
    while len(records) < args.n and len(seen) < total:
        config = None
        for _ in range(200):
            candidate = space.random(rng)
            key = tuple(int(g) for g in encode_genome(space, candidate))
            if key not in seen:
                seen.add(key)
                config = candidate
                genome = key
                break
        if config is None:
            break
        miou = evaluate_miou(weights, config, eval_slice)
        records.append(SampleRecord(config=config, genome=genome,
                                    params=param_count(space, config), miou=miou,
                                    technique="random", index=len(records)))
        if (len(records)) % 20 == 0:
            _progress(f"evaluated {len(records)}/{args.n}")
    write_records(args.out, records)
    _progress(f"wrote {args.out} ({len(records)} records)")
    return 0


def cmd_search(args) -> int:
    space = load_space(args.space)
    weights = _load_weights(args.ckpt)
    _check_space_matches(space, weights)
    _, val_set = load_dataset(args.data)
    eval_slice = val_set[:args.eval_samples]
    if not eval_slice:
        raise InputError("validation split is empty")
    seed = _resolve_seed(args.seed)
    constraints = SearchConstraints(budget=args.budget, max_params=args.max_params,
                                    min_miou=args.min_miou)
    _progress(f"searching with budget {args.budget} (seed {seed})")
    result = search(space, weights, eval_slice, constraints, seed=seed)
    doc = {
        "feasible": result.feasible,
        "budget": args.budget,
        "evaluations": len(result.history),
        "constraints": {"max_params": args.max_params, "min_miou": args.min_miou},
        "technique_uses": result.technique_uses,
    }
    if result.best is not None:
        full_miou = evaluate_miou(weights, result.best.config, val_set)
        doc.update({
            "config": config_to_json(result.best.config),
            "genome": [int(g) for g in result.best.genome],
            "params": result.best.params,
            "miou": result.best.miou,
            "miou_full_val": full_miou,
            "technique": result.best.technique,
        })
    atomic_write_text(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if args.records:
        write_records(args.records, result.history)
        _progress(f"wrote {args.records}")
    _progress(f"wrote {args.out}")
    if result.best is None:
        print("feasible=false evaluations=%d" % len(result.history))
    else:
        print(f"feasible=true params={result.best.params} "
              f"miou={fmt_float(result.best.miou)}")
    return 0


def cmd_extract(args) -> int:
    weights = _load_weights(args.ckpt)
    config = _load_subnet_config(args.config)
    subnet = extract_subnet(weights, config)
    subnet.save(args.out)
    _progress(f"wrote {args.out} "
              f"({weights_param_count(subnet, identity_config(subnet))} parameters)")
    return 0


def cmd_pareto(args) -> int:
    records = read_records(args.records)
    frontier = pareto_frontier(records)
    write_records(args.out, frontier)
    _progress(f"wrote {args.out} ({len(frontier)} of {len(records)} records)")
    if args.svg:
        pareto_scatter(records, frontier, args.svg)
        _progress(f"wrote {args.svg}")
    return 0


def cmd_eval(args) -> int:
    weights = _load_weights(args.ckpt)
    train_set, val_set = load_dataset(args.data)
    samples = val_set if args.split == "val" else train_set
    if args.samples is not None:
        samples = samples[:args.samples]
    if not samples:
        raise InputError(f"{args.split} split is empty")
    config = (_load_subnet_config(args.config) if args.config
              else identity_config(weights))
    miou = evaluate_miou(weights, config, samples, threshold=args.threshold)
    params = weights_param_count(weights, config)
    print(f"miou={fmt_float(miou)} params={params} samples={len(samples)}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elastiseg",
        description="Weight-sharing elastic segmenter: train one supernet, "
                    "deploy many subnets.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--val", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--prompt-mode", choices=("point", "box"), default="point")
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the full model from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="JSON run config (model/train sections)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--eval-samples", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("profile-layers", help="leave-one-out layer importance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--shots", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile_layers)

    p = sub.add_parser("build-space", help="derive the search space and reorder weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--importance", required=True)
    p.add_argument("--data", default=None, help="dataset dir (needed for wanda calibration)")
    p.add_argument("--scorer", choices=("none", "magnitude", "wanda"), default="wanda")
    p.add_argument("--fractions", default="0.25,0.5,0.75")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--prunable", type=int, default=None,
                   help="prunable layer count (default: num_layers // 2 - 1)")
    p.add_argument("--shield", type=int, default=1)
    p.add_argument("--calib-batches", type=int, default=8)
    p.add_argument("--calib-batch-size", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.set_defaults(func=cmd_build_space)

    p = sub.add_parser("train-supernet", help="sandwich-rule supernet training")
    p.add_argument("--space", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--target-miou", type=float, default=None,
                   help="stop once the minimal subnet reaches this mIoU")
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--eval-samples", type=int, default=64)
    p.add_argument("--logs", default=None, help="directory for csv logs and curves")
    p.add_argument("--out", default=None, help="write the trained checkpoint here")
    p.set_defaults(func=cmd_train_supernet)

    p = sub.add_parser("sample", help="evaluate random subnets")
    p.add_argument("--space", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-samples", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("search", help="constrained subnet search")
    p.add_argument("--space", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-params", type=int, default=None)
    p.add_argument("--min-miou", type=float, default=None)
    p.add_argument("--budget", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-samples", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--records", default=None, help="also write the evaluation history")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("extract", help="materialize a standalone subnet checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True, help="best.json or a {keep, window} document")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pareto", help="extract the pareto frontier from records")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", default=None, help="also render a scatter plot")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="subnet config JSON")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InputError, FormatError, TrainingFault) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
