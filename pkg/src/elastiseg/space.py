"""Search-space construction: importance profiling, activation-aware
scoring, mean-rank reordering, window menus, and subnet sampling.

The space has two axes of elasticity. Layers in the prunable set P may be
dropped independently with probability theta. Every non-shielded layer's
MLP can run at any width from the window menu; because fc1 rows / fc2
columns are physically reordered by descending mean importance rank at
construction time, a window is always a contiguous prefix slice.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, FormatError, InputError
from .ioutil import atomic_write_text
from .model import (ActivationCapture, ModelConfig, SubnetConfig, SupernetWeights,
                    config_param_count, forward_batch, identity_config)

SCORERS = ("none", "magnitude", "wanda")
SPACE_VERSION = 1


@dataclass
class ActivationNorms:
    """Per-feature l2 norms of MLP inputs, aggregated over all calibration
    tokens. fc1 keys hold d-dim vectors (block input after layernorm), fc2
    keys hold full-width vectors of the intermediate activation."""

    fc1: dict[int, np.ndarray] = field(default_factory=dict)
    fc2: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class WandaScores:
    """Per-layer importance of each intermediate neuron, from the fc1 row
    side and the fc2 column side. Empty for the 'none' scorer."""

    scorer: str
    rows: dict[int, np.ndarray] = field(default_factory=dict)
    cols: dict[int, np.ndarray] = field(default_factory=dict)


def collect_activation_norms(weights: SupernetWeights,
                             calib_batches: Sequence[tuple]) -> ActivationNorms:
    """Run the maximal subnet over (images, prompts) batches with capture
    hooks and reduce the stacked tokens to per-feature l2 norms."""
    if not calib_batches:
        raise InputError("calibration set is empty")
    cap = ActivationCapture()
    cfg = identity_config(weights)
    for images, prompts in calib_batches:
        forward_batch(weights, cfg, images, prompts, capture=cap)
    norms = ActivationNorms()
    for layer in range(weights.num_layers):
        norms.fc1[layer] = cap.norms(layer, "fc1")
        norms.fc2[layer] = cap.norms(layer, "fc2")
    return norms


def score(weights: SupernetWeights, norms: Optional[ActivationNorms],
          scorer: str) -> WandaScores:
    """Neuron importances: fc1 row i gets sum_j |W1[i,j]| * ||X_j||, fc2
    column k gets ||Y_k|| * sum_i |W2[i,k]| (Y the intermediate
    activation). 'magnitude' replaces every norm with 1; 'none' yields no
    scores and an identity permutation downstream."""
    if scorer not in SCORERS:
        raise ConfigError(f"unknown scorer {scorer!r}, expected one of {SCORERS}")
    out = WandaScores(scorer=scorer)
    if scorer == "none":
        return out
    if scorer == "wanda" and norms is None:
        raise InputError("wanda scoring requires activation norms")
    for layer in range(weights.num_layers):
        w1 = np.abs(weights.tensors[f"layers.{layer}.fc1.w"].astype(np.float64))
        w2 = np.abs(weights.tensors[f"layers.{layer}.fc2.w"].astype(np.float64))
        if scorer == "wanda":
            x = norms.fc1[layer].astype(np.float64)
            y = norms.fc2[layer].astype(np.float64)
            if x.shape != (w1.shape[1],) or y.shape != (w2.shape[1],):
                raise DimensionError(
                    f"layer {layer}: norm lengths {x.shape}/{y.shape} do not match "
                    f"fc shapes {w1.shape}/{w2.shape}")
            out.rows[layer] = w1 @ x
            out.cols[layer] = y * w2.sum(axis=0)
        else:
            out.rows[layer] = w1.sum(axis=1)
            out.cols[layer] = w2.sum(axis=0)
    return out


def _rank_descending(v: np.ndarray) -> np.ndarray:
    """rank[k] = position of entry k when sorted descending, ties going to
    the lower index."""
    order = np.argsort(-v, kind="stable")
    ranks = np.empty(len(v), dtype=np.int64)
    ranks[order] = np.arange(len(v))
    return ranks


def mean_rank_permutation(row_scores: np.ndarray, col_scores: np.ndarray) -> np.ndarray:
    """Permutation ordering neurons by the mean of their fc1-row and
    fc2-column descending ranks; most salient first, ties by lower index."""
    rs = np.asarray(row_scores, dtype=np.float64).ravel()
    cs = np.asarray(col_scores, dtype=np.float64).ravel()
    if rs.shape != cs.shape:
        raise DimensionError(f"score lengths differ: {rs.shape} vs {cs.shape}")
    mean_rank = (_rank_descending(rs) + _rank_descending(cs)) / 2.0
    return np.argsort(mean_rank, kind="stable").astype(np.int64)


def apply_reorder(weights: SupernetWeights, layer: int, perm: np.ndarray) -> None:
    """Physically permute fc1 rows, fc1 bias, and fc2 columns of one layer,
    in place. The forward function is unchanged by any such permutation."""
    perm = np.asarray(perm)
    width = weights.layer_widths[layer]
    if perm.shape != (width,) or not np.array_equal(np.sort(perm), np.arange(width)):
        raise ContractError(f"layer {layer}: not a permutation of [0, {width})")
    pre = f"layers.{layer}."
    t = weights.tensors
    t[pre + "fc1.w"] = np.ascontiguousarray(t[pre + "fc1.w"][perm])
    t[pre + "fc1.b"] = np.ascontiguousarray(t[pre + "fc1.b"][perm])
    t[pre + "fc2.w"] = np.ascontiguousarray(t[pre + "fc2.w"][:, perm])


def layer_importance(weights: SupernetWeights, eval_set: Sequence,
                     batch_size: int = 16) -> np.ndarray:
    """Leave-one-out mIoU drop per layer: importance[l] = mIoU(full) -
    mIoU(full without layer l)."""
    from .train import evaluate_miou  # deferred; train depends on this module

    if not eval_set:
        raise InputError("layer importance needs a non-empty eval set")
    L = weights.num_layers
    base = evaluate_miou(weights, identity_config(weights), eval_set, batch_size=batch_size)
    imp = np.zeros(L, dtype=np.float64)
    for l in range(L):
        keep = tuple(i != l for i in range(L))
        cfg = SubnetConfig(keep=keep, window=tuple(weights.layer_widths))
        imp[l] = base - evaluate_miou(weights, cfg, eval_set, batch_size=batch_size)
    return imp


@dataclass(frozen=True)
class SearchSpace:
    """Immutable description of reachable subnet configurations.

    shielded layers are always kept at full width; prunable layers drop
    with their theta; every other (elastic) layer is always kept but may
    take any menu width. The menu is strictly ascending and ends at the
    full width D.
    """

    model: ModelConfig
    shielded: tuple
    prunable: tuple
    thetas: tuple
    menu: tuple
    scorer: str
    reordered: bool

    def __post_init__(self):
        L = self.model.num_layers
        for l in self.shielded + self.prunable:
            if not 0 <= l < L:
                raise ConfigError(f"layer index {l} outside [0, {L})")
        if set(self.shielded) & set(self.prunable):
            raise ConfigError("shielded and prunable sets overlap")
        if len(self.thetas) != len(self.prunable):
            raise ConfigError("one theta per prunable layer required")
        if any(not 0.0 <= t <= 1.0 for t in self.thetas):
            raise ConfigError("theta must lie in [0, 1]")
        if not self.menu or list(self.menu) != sorted(set(self.menu)):
            raise ConfigError("window menu must be non-empty and strictly ascending")
        if self.menu[-1] != self.model.mlp_dim or self.menu[0] < 1:
            raise ConfigError(f"window menu must end at the full width {self.model.mlp_dim}")
        if self.scorer not in SCORERS:
            raise ConfigError(f"unknown scorer {self.scorer!r}")

    @property
    def num_layers(self) -> int:
        return self.model.num_layers

    @property
    def elastic(self) -> tuple:
        """Layers whose MLP width varies: everything not shielded."""
        return tuple(l for l in range(self.num_layers) if l not in self.shielded)

    def theta_of(self, layer: int) -> float:
        return self.thetas[self.prunable.index(layer)]

    def make_config(self, drop: Sequence[int] = (),
                    window_index: Optional[dict] = None) -> SubnetConfig:
        """Canonical config: `drop` lists prunable layers to remove;
        window_index maps elastic layer -> menu index (default full)."""
        window_index = window_index or {}
        drop = set(drop)
        if not drop <= set(self.prunable):
            raise ConfigError(f"cannot drop non-prunable layers {sorted(drop - set(self.prunable))}")
        keep, window = [], []
        for l in range(self.num_layers):
            if l in self.shielded:
                keep.append(True)
                window.append(self.model.mlp_dim)
            elif l in drop:
                keep.append(False)
                window.append(self.menu[0])
            else:
                idx = window_index.get(l, len(self.menu) - 1)
                if not 0 <= idx < len(self.menu):
                    raise ConfigError(f"layer {l}: window index {idx} outside menu")
                keep.append(True)
                window.append(self.menu[idx])
        return SubnetConfig(keep=tuple(keep), window=tuple(window))

    def validate_config(self, config: SubnetConfig) -> None:
        """Strict membership check, canonical form included."""
        if len(config.keep) != self.num_layers:
            raise ConfigError(
                f"config has {len(config.keep)} layers, space has {self.num_layers}")
        for l in range(self.num_layers):
            kept, w = config.keep[l], config.window[l]
            if l in self.shielded:
                if not kept:
                    raise ConfigError(f"shielded layer {l} marked dropped")
                if w != self.model.mlp_dim:
                    raise ConfigError(f"shielded layer {l} must stay at full width")
            elif not kept:
                if l not in self.prunable:
                    raise ConfigError(f"layer {l} is not prunable but marked dropped")
                if w != self.menu[0]:
                    raise ConfigError(
                        f"dropped layer {l}: window must be normalized to {self.menu[0]}")
            elif w not in self.menu:
                raise ConfigError(f"layer {l}: window {w} not in menu {self.menu}")

    def maximal(self) -> SubnetConfig:
        return self.make_config()

    def minimal(self) -> SubnetConfig:
        return self.make_config(drop=self.prunable,
                                window_index={l: 0 for l in self.elastic})

    def random(self, rng: np.random.Generator) -> SubnetConfig:
        drop = [l for l in self.prunable if rng.random() < self.theta_of(l)]
        window_index = {l: int(rng.integers(0, len(self.menu)))
                        for l in self.elastic if l not in drop}
        return self.make_config(drop=drop, window_index=window_index)

    def size(self) -> int:
        m = len(self.menu)
        n_fixed_elastic = len(self.elastic) - len(self.prunable)
        return (m + 1) ** len(self.prunable) * m ** n_fixed_elastic

    def all_configs(self) -> Iterator[SubnetConfig]:
        """Enumerate every canonical config (use only on small spaces)."""
        options = []
        for l in range(self.num_layers):
            if l in self.shielded:
                options.append([(True, self.model.mlp_dim)])
            elif l in self.prunable:
                options.append([(False, self.menu[0])] + [(True, w) for w in self.menu])
            else:
                options.append([(True, w) for w in self.menu])
        for combo in itertools.product(*options):
            yield SubnetConfig(keep=tuple(k for k, _ in combo),
                               window=tuple(w for _, w in combo))

    def to_json(self) -> dict:
        return {
            "version": SPACE_VERSION,
            "model": self.model.to_json(),
            "shielded": list(self.shielded),
            "prunable": list(self.prunable),
            "theta": list(self.thetas),
            "menu": list(self.menu),
            "scorer": self.scorer,
            "reordered": self.reordered,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SearchSpace":
        known = {"version", "model", "shielded", "prunable", "theta", "menu",
                 "scorer", "reordered"}
        unknown = set(doc) - known
        if unknown:
            raise FormatError(f"space document has unknown keys: {sorted(unknown)}")
        missing = known - {"version"} - set(doc)
        if missing:
            raise FormatError(f"space document missing keys: {sorted(missing)}")
        try:
            return cls(model=ModelConfig.from_json(doc["model"]),
                       shielded=tuple(doc["shielded"]), prunable=tuple(doc["prunable"]),
                       thetas=tuple(doc["theta"]), menu=tuple(doc["menu"]),
                       scorer=doc["scorer"], reordered=bool(doc["reordered"]))
        except (ConfigError, TypeError) as exc:
            raise FormatError(f"invalid space document: {exc}") from exc


def sample_subnet(space: SearchSpace, mode: str,
                  rng: Optional[np.random.Generator] = None) -> SubnetConfig:
    """maximal / minimal / random draw from the space."""
    if mode == "maximal":
        return space.maximal()
    if mode == "minimal":
        return space.minimal()
    if mode == "random":
        if rng is None:
            raise ContractError("random sampling requires an rng")
        return space.random(rng)
    raise ConfigError(f"unknown sampling mode {mode!r}")


def param_count(space: SearchSpace, config: SubnetConfig) -> int:
    """Exact scalar count of the active parameter set for this config."""
    space.validate_config(config)
    return config_param_count(space.model, config)


def window_menu(window_fractions: Sequence[float], mlp_dim: int) -> tuple:
    """Ascending window widths: round(f * D) per fraction, D appended,
    duplicates collapsed, every width clamped to [1, D]."""
    fr = [float(f) for f in window_fractions]
    if not fr or any(not 0.0 < f <= 1.0 for f in fr) or fr != sorted(fr):
        raise ConfigError("window fractions must be ascending and in (0, 1]")
    widths = {min(mlp_dim, max(1, int(round(f * mlp_dim)))) for f in fr}
    return tuple(sorted(widths | {mlp_dim}))


def build_search_space(importance: np.ndarray, k_prunable: int, shield_top: int,
                       window_fractions: Sequence[float], theta: float, scorer: str,
                       weights: SupernetWeights,
                       calib: Sequence[tuple]) -> tuple[SearchSpace, SupernetWeights]:
    """Derive the space from an importance profile and reorder a copy of
    the weights so prefix windowing respects neuron importance.

    Shields the shield_top most important layers; the k_prunable least
    important of the rest form P with probability theta each. The window
    menu is round(f * D) for each fraction, with D appended.
    """
    importance = np.asarray(importance, dtype=np.float64)
    L = weights.num_layers
    if importance.shape != (L,):
        raise DimensionError(f"importance must have length {L}, got {importance.shape}")
    if k_prunable < 0 or shield_top < 0 or k_prunable + shield_top > L:
        raise ConfigError(f"k_prunable {k_prunable} + shield_top {shield_top} exceeds {L} layers")
    menu = window_menu(window_fractions, weights.config.mlp_dim)
    if scorer not in SCORERS:
        raise ConfigError(f"unknown scorer {scorer!r}, expected one of {SCORERS}")

    by_desc = np.argsort(-importance, kind="stable")
    shielded = tuple(sorted(int(l) for l in by_desc[:shield_top]))
    by_asc = np.argsort(importance, kind="stable")
    prunable = []
    for l in by_asc:
        if int(l) not in shielded:
            prunable.append(int(l))
        if len(prunable) == k_prunable:
            break
    prunable = tuple(sorted(prunable))

    reordered = weights.copy()
    if scorer != "none":
        norms = collect_activation_norms(reordered, calib) if scorer == "wanda" else None
        scores = score(reordered, norms, scorer)
        for l in range(L):
            if l in shielded:
                continue
            perm = mean_rank_permutation(scores.rows[l], scores.cols[l])
            apply_reorder(reordered, l, perm)

    space = SearchSpace(model=weights.config, shielded=shielded, prunable=prunable,
                        thetas=(float(theta),) * len(prunable), menu=menu,
                        scorer=scorer, reordered=scorer != "none")
    return space, reordered


def save_space(path: str, space: SearchSpace) -> None:
    atomic_write_text(path, json.dumps(space.to_json(), indent=2, sort_keys=True) + "\n")


def load_space(path: str) -> SearchSpace:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read space file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: space document must be a JSON object")
    return SearchSpace.from_json(doc)


def config_to_json(config: SubnetConfig) -> dict:
    return {"keep": [bool(k) for k in config.keep],
            "window": [int(w) for w in config.window]}


def config_from_json(doc: dict) -> SubnetConfig:
    if not isinstance(doc, dict) or "keep" not in doc or "window" not in doc:
        raise FormatError("subnet config document needs 'keep' and 'window' lists")
    keep, window = doc["keep"], doc["window"]
    if len(keep) != len(window):
        raise FormatError("subnet config 'keep' and 'window' lengths differ")
    return SubnetConfig(keep=tuple(bool(k) for k in keep),
                        window=tuple(int(w) for w in window))
