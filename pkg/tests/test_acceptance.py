"""Acceptance suite: the release bars for this package, each checked
against an independent oracle rather than against the implementation's
own output.

Structural bars are cheap and exhaustive: finite-difference gradient
sweeps over the whole op surface, normalization invariants, reorder and
slicing equivalence, counting oracles for the dice loss and the mIoU
metric, leave-one-out importance accounting, and bitwise determinism of
pipeline reruns. Statistical bars train real models and dominate the
suite's runtime; their hyperparameters are fixed inside the fixtures and
were chosen so a laptop CPU clears them with margin.
"""

import contextlib
import inspect
import io
import json
import math
import os
import time

import numpy as np
import pytest

from elastiseg import tensor as T
from elastiseg.cli import main as cli_main
from elastiseg.data import collate, load_dataset
from elastiseg.model import (ModelConfig, PromptSpec, SubnetConfig,
                             SupernetWeights, forward_batch, identity_config,
                             init_weights, param_views)
from elastiseg.space import (SCORERS, SearchSpace, apply_reorder,
                             collect_activation_norms, config_from_json,
                             layer_importance, mean_rank_permutation, score,
                             window_menu)
from elastiseg.tensor import Tensor, reset_tape
from elastiseg.train import DICE_EPS, dice_loss, evaluate_miou

from test_tensor import check_grads, readout


def run_cli(*argv):
    """Invoke the CLI entry point in-process, capturing stdout."""
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = cli_main(list(argv))
    return code, out.getvalue()


def clone_weights(weights: SupernetWeights) -> SupernetWeights:
    return SupernetWeights(weights.config,
                           {k: v.copy() for k, v in weights.tensors.items()},
                           list(weights.layer_widths))


def active_masks(weights: SupernetWeights, config: SubnetConfig) -> dict:
    """Boolean activity masks per tensor: True where a parameter is live."""
    masks = {}
    for view in param_views(weights, config):
        mask = np.zeros(weights.tensors[view.name].shape, dtype=bool)
        if view.slices is None:
            mask[...] = True
        else:
            mask[view.slices] = True
        masks[view.name] = mask
    return masks


def masks_nest(inner: dict, outer: dict) -> bool:
    """Every active index of `inner` is also active in `outer`."""
    for name, mask in inner.items():
        if name not in outer:
            return False
        if np.any(mask & ~outer[name]):
            return False
    return True


class TestGradientAndNormalizationGate:
    """The numerical core: every differentiable op agrees with central
    finite differences, and the two normalizing ops keep their defining
    invariants."""

    def test_every_op_matches_finite_differences(self):
        start = time.monotonic()
        rng = np.random.default_rng(42)

        def u(*shape, lo=-1.0, hi=1.0):
            return rng.uniform(lo, hi, size=shape).astype(np.float32)

        def weighted(op_out_shape):
            r = readout(rng, op_out_shape)
            return r

        cases = {}

        r = weighted((2, 3))
        cases["add"] = (lambda a, b: T.mean(T.mul(T.add(a, b), r)),
                        [u(2, 3), u(3)])
        cases["sub"] = (lambda a, b: T.mean(T.mul(T.sub(a, b), r)),
                        [u(2, 3), u(2, 3)])
        cases["mul"] = (lambda a, b: T.mean(T.mul(T.mul(a, b), r)),
                        [u(2, 3), u(2, 3)])
        cases["div"] = (lambda a, b: T.mean(T.mul(T.div(a, b), r)),
                        [u(2, 3), u(2, 3, lo=0.5, hi=1.5)])
        kink_free = (rng.uniform(0.2, 1.0, (2, 3)) *
                     rng.choice([-1.0, 1.0], (2, 3))).astype(np.float32)
        cases["relu"] = (lambda x: T.mean(T.mul(T.relu(x), r)), [kink_free])
        cases["sigmoid"] = (lambda x: T.mean(T.mul(T.sigmoid(x), r)),
                            [u(2, 3, lo=-2.0, hi=2.0)])
        cases["softplus"] = (lambda x: T.mean(T.mul(T.softplus(x), r)),
                             [u(2, 3, lo=-3.0, hi=3.0)])
        cases["gelu"] = (lambda x: T.mean(T.mul(T.gelu(x), r)),
                         [u(2, 3, lo=-2.0, hi=2.0)])

        r24 = weighted((2, 4))
        cases["matmul"] = (lambda a, b: T.mean(T.mul(T.matmul(a, b), r24)),
                           [u(2, 3), u(3, 4)])
        cases["linear"] = (lambda x, w, b: T.mean(T.mul(T.linear(x, w, b), r24)),
                           [u(2, 3), u(4, 3), u(4)])
        cases["layernorm"] = (
            lambda x, g, b: T.mean(T.mul(T.layernorm(x, g, b), r24)),
            [u(2, 4, lo=-2.0, hi=2.0), u(4, lo=0.5, hi=1.5),
             u(4, lo=-0.5, hi=0.5)])
        cases["softmax_lastdim"] = (
            lambda x: T.mean(T.mul(T.softmax_lastdim(x), r24)),
            [u(2, 4, lo=-2.0, hi=2.0)])

        r32 = weighted((3, 2))
        cases["reshape"] = (lambda x: T.mean(T.mul(T.reshape(x, (3, 2)), r32)),
                            [u(2, 3)])
        r322 = weighted((3, 2, 2))
        cases["transpose"] = (
            lambda x: T.mean(T.mul(T.transpose(x, (1, 0, 2)), r322)),
            [u(2, 3, 2)])
        r25 = weighted((2, 5))
        cases["concat"] = (
            lambda a, b: T.mean(T.mul(T.concat([a, b], axis=1), r25)),
            [u(2, 2), u(2, 3)])
        r33 = weighted((3, 3))
        cases["narrow"] = (
            lambda x: T.mean(T.mul(T.narrow(x, 1, 1, 3), r33)),
            [u(3, 5)])
        r43 = weighted((4, 3))
        cases["broadcast_to"] = (
            lambda x: T.mean(T.mul(T.broadcast_to(x, (4, 3)), r43)),
            [u(1, 3)])
        cases["sum_"] = (lambda x: T.mean(T.mul(T.sum_(x, axis=1), r24)),
                         [u(2, 3, 4)])
        r23 = weighted((2, 3))
        cases["mean"] = (lambda x: T.sum_(T.mul(T.mean(x, axis=2), r23)),
                         [u(2, 3, 4)])

        surface = {
            name for name, fn in vars(T).items()
            if inspect.isfunction(fn) and not name.startswith("_")
            and fn.__module__ == T.__name__
            and name not in ("backward", "adam_step", "reset_tape",
                             "tape_size")
        }
        assert set(cases) == surface, (
            f"op sweep out of date: missing {surface - set(cases)}, "
            f"stale {set(cases) - surface}")

        for name, (build, arrays) in cases.items():
            check_grads(build, *arrays)
            reset_tape()
        assert time.monotonic() - start < 60.0

    def test_softmax_normalization_invariants(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-5.0, 5.0, (8, 16)).astype(np.float32)
        s = T.softmax_lastdim(Tensor(x)).data
        assert np.all(s >= 0.0)
        assert np.max(np.abs(s.sum(axis=-1) - 1.0)) <= 1e-5
        shifted = T.softmax_lastdim(Tensor(x + np.float32(3.0))).data
        assert np.max(np.abs(shifted - s)) <= 1e-5
        huge = T.softmax_lastdim(Tensor(x + np.float32(1e4))).data
        assert np.all(np.isfinite(huge))
        assert np.max(np.abs(huge.sum(axis=-1) - 1.0)) <= 1e-5

    def test_layernorm_normalization_invariants(self):
        rng = np.random.default_rng(8)
        x = (rng.normal(0.0, 10.0, (32, 64))).astype(np.float32)
        gamma = np.ones(64, dtype=np.float32)
        beta = np.zeros(64, dtype=np.float32)
        out = T.layernorm(Tensor(x), Tensor(gamma), Tensor(beta)).data
        out64 = out.astype(np.float64)
        mean_dev = np.max(np.abs(out64.mean(axis=-1)))
        var_dev = np.max(np.abs(out64.var(axis=-1) - 1.0))
        assert mean_dev <= 1e-5
        assert var_dev <= 1e-5


class TestReorderInvarianceGate:
    """Neuron reordering is a pure relabeling: it must not move the
    forward outputs, and applying the inverse permutation must restore
    the original tensors bit for bit."""

    CFG = ModelConfig(image_size=16, patch_size=8, embed_dim=16,
                      num_heads=2, num_layers=2, mlp_dim=32)

    def test_hundred_layers_three_scorers(self):
        start = time.monotonic()
        for trial in range(100):
            rng = np.random.default_rng(1000 + trial)
            weights = init_weights(self.CFG, seed=trial)
            images = rng.uniform(0.0, 1.0, (2, 16, 16)).astype(np.float32)
            prompts = [PromptSpec.point(7.5, 8.5),
                       PromptSpec.box(2.0, 3.0, 12.0, 13.0)]
            layer = trial % self.CFG.num_layers
            prefix = f"layers.{layer}."
            originals = {name: weights.tensors[prefix + name].copy()
                         for name in ("fc1.w", "fc1.b", "fc2.w")}
            base = forward_batch(weights, None, images, prompts).data.copy()
            norms = collect_activation_norms(weights, [(images, prompts)])
            for scorer in SCORERS:
                if scorer == "none":
                    perm = np.arange(self.CFG.mlp_dim)
                else:
                    scores = score(weights, norms, scorer)
                    perm = mean_rank_permutation(scores.rows[layer],
                                                 scores.cols[layer])
                apply_reorder(weights, layer, perm)
                moved = forward_batch(weights, None, images, prompts).data
                assert np.max(np.abs(moved - base)) <= 1e-5, (
                    f"trial {trial}, scorer {scorer}: forward moved")
                apply_reorder(weights, layer, np.argsort(perm))
                for name, orig in originals.items():
                    assert np.array_equal(weights.tensors[prefix + name],
                                          orig), (
                        f"trial {trial}, scorer {scorer}: {name} not "
                        f"restored bitwise")
        assert time.monotonic() - start < 60.0


class TestSliceEquivalenceGate:
    """Running a width window through sliced tensors must equal running
    the full network with the inactive neurons zeroed out, and the active
    parameter sets of minimal, random, and maximal subnets must nest."""

    CFG = ModelConfig(image_size=16, patch_size=8, embed_dim=16,
                      num_heads=2, num_layers=3, mlp_dim=32)

    def _masked_clone(self, weights, windows):
        masked = clone_weights(weights)
        for layer, width in enumerate(windows):
            pre = f"layers.{layer}."
            masked.tensors[pre + "fc1.w"][width:, :] = 0.0
            masked.tensors[pre + "fc1.b"][width:] = 0.0
            masked.tensors[pre + "fc2.w"][:, width:] = 0.0
        return masked

    def test_sliced_equals_masked_full(self):
        start = time.monotonic()
        rng = np.random.default_rng(11)
        weights = init_weights(self.CFG, seed=7)
        images = rng.uniform(0.0, 1.0, (2, 16, 16)).astype(np.float32)
        prompts = [PromptSpec.point(4.0, 11.0),
                   PromptSpec.box(1.0, 1.0, 9.0, 14.0)]
        menu = window_menu([0.25, 0.5, 0.75, 1.0], self.CFG.mlp_dim)
        assert menu == (8, 16, 24, 32)
        full = self.CFG.mlp_dim
        trials = []
        for layer in range(self.CFG.num_layers):
            for width in menu:
                windows = [full] * self.CFG.num_layers
                windows[layer] = width
                trials.append(tuple(windows))
        for _ in range(10):
            trials.append(tuple(int(menu[rng.integers(0, len(menu))])
                                for _ in range(self.CFG.num_layers)))
        for windows in trials:
            config = SubnetConfig(keep=(True,) * self.CFG.num_layers,
                                  window=windows)
            sliced = forward_batch(weights, config, images, prompts).data
            masked = self._masked_clone(weights, windows)
            reference = forward_batch(masked, None, images, prompts).data
            assert np.max(np.abs(sliced - reference)) <= 1e-5, (
                f"windows {windows}: sliced forward diverges from "
                f"masked-full oracle")
        assert time.monotonic() - start < 60.0

    def test_active_sets_nest_over_thousand_samples(self):
        start = time.monotonic()
        weights = init_weights(self.CFG, seed=7)
        space = SearchSpace(model=self.CFG, shielded=(0,), prunable=(1, 2),
                            thetas=(0.5, 0.5), menu=(8, 16, 32),
                            scorer="none", reordered=False)
        minimal = active_masks(weights, space.minimal())
        maximal = active_masks(weights, space.maximal())
        assert masks_nest(minimal, maximal)
        rng = np.random.default_rng(17)
        for _ in range(1000):
            sampled = active_masks(weights, space.random(rng))
            assert masks_nest(minimal, sampled)
            assert masks_nest(sampled, maximal)
        assert time.monotonic() - start < 60.0


class TestLossMetricOracleGate:
    """Dice against a pure counting oracle on hard masks, and mIoU against
    exact integer set arithmetic."""

    def test_dice_matches_counting_oracle_on_hard_masks(self):
        rng = np.random.default_rng(23)
        side = 32
        n_random = 995
        specials = [
            (np.zeros((side, side), bool), np.zeros((side, side), bool)),
            (np.zeros((side, side), bool), np.ones((side, side), bool)),
            (np.ones((side, side), bool), np.zeros((side, side), bool)),
            (np.ones((side, side), bool), np.ones((side, side), bool)),
        ]
        equal = rng.random((side, side)) < 0.4
        specials.append((equal, equal.copy()))
        pairs = list(specials)
        for _ in range(n_random):
            density_p = rng.uniform(0.02, 0.98)
            density_g = rng.uniform(0.02, 0.98)
            pairs.append((rng.random((side, side)) < density_p,
                          rng.random((side, side)) < density_g))
        assert len(pairs) == 1000
        for pred_mask, gt_mask in pairs:
            logits = np.where(pred_mask, 40.0, -40.0).astype(np.float32)
            got = dice_loss(Tensor(logits),
                            gt_mask.astype(np.float32)).item()
            inter = int(np.count_nonzero(pred_mask & gt_mask))
            p = int(np.count_nonzero(pred_mask))
            g = int(np.count_nonzero(gt_mask))
            expected = 1.0 - (2.0 * inter + DICE_EPS) / (p + g + DICE_EPS)
            assert abs(got - expected) <= 1e-6, (
                f"dice {got} vs counting oracle {expected} "
                f"(inter={inter}, p={p}, g={g})")
            reset_tape()

    def test_batched_dice_is_mean_of_singles(self):
        rng = np.random.default_rng(29)
        masks_p = rng.random((8, 32, 32)) < 0.3
        masks_g = rng.random((8, 32, 32)) < 0.3
        logits = np.where(masks_p, 40.0, -40.0).astype(np.float32)
        batched = dice_loss(Tensor(logits),
                            masks_g.astype(np.float32)).item()
        singles = []
        for i in range(8):
            singles.append(dice_loss(
                Tensor(logits[i]), masks_g[i].astype(np.float32)).item())
            reset_tape()
        assert abs(batched - float(np.mean(singles))) <= 1e-6

    @pytest.mark.parametrize("batch_size", [5, 16])
    def test_miou_matches_exact_set_arithmetic(self, trained_tiny, dataset,
                                               batch_size):
        _, val_set = dataset
        eval_set = val_set[:16]
        got = evaluate_miou(trained_tiny, None, eval_set,
                            batch_size=batch_size)
        logit_th = math.log(0.5 / (1.0 - 0.5))
        total, count = 0.0, 0
        for start in range(0, len(eval_set), batch_size):
            chunk = eval_set[start:start + batch_size]
            images, gts, prompts = collate(chunk)
            logits = forward_batch(trained_tiny, None, images, prompts).data
            ious = []
            for i in range(len(chunk)):
                pred = logits[i] > logit_th
                gt = gts[i] > 0.5
                inter = int(np.count_nonzero(pred & gt))
                union = int(np.count_nonzero(pred | gt))
                ious.append(1.0 if union == 0 else inter / union)
            total += float(np.asarray(ious, dtype=np.float64).sum())
            count += len(chunk)
        expected = total / count
        assert got == expected, (
            f"mIoU {got!r} differs from set-arithmetic oracle {expected!r}")


class TestImportanceOracleGate:
    """Layer importance must equal base-minus-leave-one-out exactly, and a
    layer whose residual contributions are zeroed must report zero."""

    def test_importance_equals_leave_one_out(self, trained_tiny, dataset):
        train_set, _ = dataset
        probe = train_set[:16]
        importance = layer_importance(trained_tiny, probe)
        n = trained_tiny.num_layers
        assert importance.shape == (n,)
        base = evaluate_miou(trained_tiny, identity_config(trained_tiny),
                             probe)
        widths = tuple(trained_tiny.layer_widths)
        for layer in range(n):
            keep = tuple(i != layer for i in range(n))
            loo = evaluate_miou(trained_tiny,
                                SubnetConfig(keep=keep, window=widths),
                                probe)
            assert importance[layer] == base - loo, (
                f"layer {layer}: importance {importance[layer]!r} vs "
                f"oracle {base - loo!r}")

    def test_zeroed_layer_reports_zero(self, trained_tiny, dataset):
        train_set, _ = dataset
        weights = clone_weights(trained_tiny)
        pre = "layers.1."
        for name in ("attn.wo", "attn.bo", "fc2.w", "fc2.b"):
            weights.tensors[pre + name][...] = 0.0
        importance = layer_importance(weights, train_set[:16])
        assert importance[1] == 0.0


TINY_RUN_CONFIG = {
    "model": {"image_size": 64, "patch_size": 16, "embed_dim": 16,
              "num_layers": 3, "num_heads": 2, "mlp_dim": 32},
    "train": {"steps": 20, "lr": 3e-4, "batch_size": 8,
              "eval_interval": 10, "eval_samples": 8},
}

PIPELINE_ARTIFACTS = (
    "data/manifest.json", "data/samples.bin", "pretrained.ssnf",
    "importance.json", "space.json", "reordered.ssnf", "supernet.ssnf",
    "logs/trainlog.csv", "logs/evals.csv", "logs/curves.svg",
    "samples.csv", "best.json", "records.csv", "subnet.ssnf",
    "pareto.csv", "pareto.svg",
)


def run_pipeline(root) -> dict:
    """The full command chain with fixed seeds; returns paths and stdout."""
    root = str(root)
    p = lambda *parts: os.path.join(root, *parts)
    config = p("run.json")
    with open(config, "w", encoding="utf-8") as fh:
        json.dump(TINY_RUN_CONFIG, fh)
    steps = [
        ("gen-data", ["gen-data", "--out", p("data"), "--train", "24",
                      "--val", "8", "--seed", "3"]),
        ("pretrain", ["pretrain", "--data", p("data"), "--config", config,
                      "--seed", "0", "--out", p("pretrained.ssnf")]),
        ("profile-layers", ["profile-layers", "--ckpt", p("pretrained.ssnf"),
                            "--data", p("data"), "--shots", "8",
                            "--out", p("importance.json")]),
        ("build-space", ["build-space", "--ckpt", p("pretrained.ssnf"),
                         "--importance", p("importance.json"),
                         "--data", p("data"), "--scorer", "wanda",
                         "--fractions", "0.5", "--theta", "0.5",
                         "--prunable", "1", "--shield", "1",
                         "--calib-batches", "2", "--calib-batch-size", "8",
                         "--out", p("space.json"),
                         "--out-ckpt", p("reordered.ssnf")]),
        ("train-supernet", ["train-supernet", "--space", p("space.json"),
                            "--ckpt", p("reordered.ssnf"),
                            "--data", p("data"), "--steps", "8",
                            "--lr", "1e-4", "--batch-size", "4",
                            "--seed", "0", "--eval-every", "8",
                            "--eval-samples", "8", "--logs", p("logs"),
                            "--out", p("supernet.ssnf")]),
        ("sample", ["sample", "--space", p("space.json"),
                    "--ckpt", p("supernet.ssnf"), "--data", p("data"),
                    "--n", "5", "--seed", "1", "--eval-samples", "8",
                    "--out", p("samples.csv")]),
        ("search", ["search", "--space", p("space.json"),
                    "--ckpt", p("supernet.ssnf"), "--data", p("data"),
                    "--budget", "6", "--seed", "0", "--eval-samples", "4",
                    "--out", p("best.json"), "--records", p("records.csv")]),
        ("extract", ["extract", "--ckpt", p("supernet.ssnf"),
                     "--config", p("best.json"), "--out", p("subnet.ssnf")]),
        ("pareto", ["pareto", "--records", p("records.csv"),
                    "--out", p("pareto.csv"), "--svg", p("pareto.svg")]),
        ("eval", ["eval", "--ckpt", p("subnet.ssnf"), "--data", p("data")]),
    ]
    stdout = {}
    for name, argv in steps:
        code, out = run_cli(*argv)
        assert code == 0, f"{name} exited with {code}"
        stdout[name] = out
    return {"root": root, "stdout": stdout}


@pytest.fixture(scope="module")
def twin_runs(tmp_path_factory):
    """The same pipeline executed twice into separate directories."""
    first = run_pipeline(tmp_path_factory.mktemp("rerun_a"))
    second = run_pipeline(tmp_path_factory.mktemp("rerun_b"))
    return first, second


class TestRerunDeterminismGate:
    """Same seeds, same bytes: every checkpoint, log, table, and figure in
    the pipeline must be bitwise identical across reruns, and extracting a
    subnet must change nothing about its behavior."""

    def test_artifacts_bitwise_identical(self, twin_runs):
        first, second = twin_runs
        for rel in PIPELINE_ARTIFACTS:
            a = os.path.join(first["root"], rel)
            b = os.path.join(second["root"], rel)
            with open(a, "rb") as fh:
                bytes_a = fh.read()
            with open(b, "rb") as fh:
                bytes_b = fh.read()
            assert bytes_a == bytes_b, f"{rel} differs across reruns"

    def test_stdout_identical(self, twin_runs):
        first, second = twin_runs
        assert first["stdout"] == second["stdout"]

    def test_extract_then_eval_equals_sliced_eval(self, twin_runs):
        first, _ = twin_runs
        root = first["root"]
        supernet, _ = SupernetWeights.load(os.path.join(root, "supernet.ssnf"))
        subnet, _ = SupernetWeights.load(os.path.join(root, "subnet.ssnf"))
        with open(os.path.join(root, "best.json"), encoding="utf-8") as fh:
            config = config_from_json(json.load(fh)["config"])
        _, val_set = load_dataset(os.path.join(root, "data"))
        images, _, prompts = collate(val_set)
        sliced_logits = forward_batch(supernet, config, images, prompts).data
        subnet_logits = forward_batch(subnet, None, images, prompts).data
        assert np.array_equal(sliced_logits, subnet_logits)
        sliced_miou = evaluate_miou(supernet, config, val_set)
        subnet_miou = evaluate_miou(subnet, None, val_set)
        assert sliced_miou == subnet_miou
