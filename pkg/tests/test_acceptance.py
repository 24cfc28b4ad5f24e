"""Acceptance suite: seven end-to-end criteria at their stated tolerances.

Each criterion prints one ``PASS``/``FAIL`` line. Run with pytest, or
directly with ``python3 tests/test_acceptance.py``.
"""
import hashlib
import json
import os
import sys
import tempfile
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from conftest import random_params  # noqa: E402
from facefit import (FaceParams, FitConfig, LossWeights, evaluate, face_loss, fit,  # noqa: E402
                     gen_synthetic_model, gradcheck, render)
from facefit.cli import main as cli  # noqa: E402
from facefit.head import TrainConfig, gen_embedding_dataset, head_train, smoothed  # noqa: E402
from facefit.losses import landmark_loss, pixel_loss, projected_landmarks  # noqa: E402
from reference import reference_render  # noqa: E402

_MODEL = None
RESULT_LINES = []   # shown by the terminal-summary hook in conftest.py


def base_model():
    global _MODEL
    if _MODEL is None:
        _MODEL = gen_synthetic_model(0, 16)
    return _MODEL


def report(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
    RESULT_LINES.append(line)
    print(line, flush=True)
    return passed


# 1 -----------------------------------------------------------------------

def criterion_renderer_equivalence():
    worst, render_time = 0.0, 0.0
    rng = np.random.default_rng(2024)
    for i in range(25):
        model = gen_synthetic_model(int(rng.integers(1 << 16)), int(rng.integers(5, 13)))
        params = random_params(model, 100 + i)
        t = time.perf_counter()
        out = render(model, params, 32, 32)
        render_time += time.perf_counter() - t
        color, tri_id = reference_render(model, params.to_vector(), 32, 32)
        worst = max(worst, float(np.abs(out.color - color).max()))
        assert np.array_equal(out.tri_id, tri_id)
    ok = worst <= 1e-6 and render_time < 5.0
    return report(1, "renderer vs reference", ok,
                  f"25 instances, max |diff| {worst:.2e} (<= 1e-6), render time {render_time:.2f}s (< 5s)")


# 2 -----------------------------------------------------------------------

def criterion_gradients():
    model = base_model()
    tols = {"phi": 1e-4, "gamma": 1e-4, "alpha": 1e-2, "delta": 1e-2, "cam": 1e-2}
    worst = {b: 0.0 for b in tols}
    failed = []
    t = time.perf_counter()
    for seed in range(10):
        rep = gradcheck(model, random_params(model, seed), 32, 32, blocks=tuple(tols),
                        tolerance=tols, seed=seed)
        for b in rep.blocks:
            worst[b.block] = max(worst[b.block], b.max_rel_error)
        if not rep.passed:
            failed.append(seed)
    elapsed = time.perf_counter() - t
    ok = not failed and elapsed < 60
    detail = ", ".join(f"{b} {worst[b]:.1e}/{tols[b]:.0e}" for b in tols)
    return report(2, "gradient suite", ok, f"10 seeds, worst rel err {detail}; {elapsed:.1f}s (< 60s)")


# 3 -----------------------------------------------------------------------

def criterion_loss_identities():
    model = base_model()
    checks = {}
    # exact reconstruction of a face with zero codes: every raw term is zero
    p = random_params(model, 0)
    p.alpha[:] = p.delta[:] = p.gamma[:] = 0
    target = render(model, p, 32, 32).color
    lms = projected_landmarks(model, p, 32, 32)
    rep, _ = face_loss(target, lms, model, p)
    checks["all raw terms 0"] = all(abs(v) < 1e-12 for v in rep.raw.values())
    # general face with the prior switched off: total is zero
    q = random_params(model, 1)
    rep, _ = face_loss(render(model, q, 32, 32).color, projected_landmarks(model, q, 32, 32),
                       model, q, LossWeights(lambda_reg=0.0))
    checks["total 0 without prior"] = abs(rep.total) < 1e-12
    checks["pixel 1x1 = 0.75"] = pixel_loss(np.full((1, 1, 3), 0.5), np.zeros((1, 1, 3)),
                                             np.ones((1, 1)))[0] == 0.75
    checks["landmark (3,4) = 25"] = landmark_loss([[10.0, 10.0]], [[13.0, 14.0]])[0] == 25.0
    off = lms.copy()
    off[5] += [3.0, 4.0]
    metric = evaluate(target, None, off, model, p)["landmark_px"]
    checks["metric contribution 5px"] = abs(metric * 68 - 5.0) < 1e-9
    r = random_params(model, 2)
    rep, _ = face_loss(render(model, r, 32, 32).color, lms, model, random_params(model, 3))
    checks["total recombines"] = abs(rep.total - sum(rep.weighted.values())) <= 1e-9
    bad = [k for k, v in checks.items() if not v]
    return report(3, "loss identities", not bad,
                  f"{len(checks) - len(bad)}/{len(checks)} identities hold" + (f", failing: {bad}" if bad else ""))


# 4 -----------------------------------------------------------------------

def criterion_recovery():
    model = base_model()
    photo, lm, improved, slowest = [], [], 0, 0.0
    for seed in range(50):
        truth = random_params(model, seed)
        target = render(model, truth, 64, 64).color
        lms = projected_landmarks(model, truth, 64, 64)
        rng = np.random.default_rng(1000 + seed)
        init = FaceParams.from_vector(truth.to_vector() + 0.05 * rng.standard_normal(257), truth.sizes)
        t = time.perf_counter()
        result = fit(target, lms, model, FitConfig(max_iters=200), init=init)
        slowest = max(slowest, time.perf_counter() - t)
        before = evaluate(target, None, lms, model, init)
        after = evaluate(target, None, lms, model, result.params)
        photo.append(after["photometric_l2"])
        lm.append(after["landmark_px"])
        improved += after["photometric_l2"] < before["photometric_l2"]
    ok = np.mean(photo) <= 0.02 and np.mean(lm) <= 1.0 and improved >= 45 and slowest < 10
    return report(4, "synthetic recovery", ok,
                  f"mean photometric {np.mean(photo):.4f} (<= 0.02), mean landmark {np.mean(lm):.3f}px "
                  f"(<= 1.0), improved {improved}/50 (>= 45), slowest fit {slowest:.2f}s (< 10s)")


# 5 -----------------------------------------------------------------------

class Blinded:
    """Training view of a sample; reading the ground truth is an error."""

    def __init__(self, sample):
        self.embedding = sample.embedding
        self.target_image = sample.target_image
        self.landmarks = sample.landmarks

    @property
    def theta_true(self):
        raise AssertionError("training path read the ground-truth parameters")


def criterion_head_training():
    model = base_model()
    data = gen_embedding_dataset(model, 200, seed=0, noise_sigma=0.01, size=(32, 32))
    blinded = [Blinded(s) for s in data]
    t = time.perf_counter()
    _, curve = head_train(blinded, model, TrainConfig(iters=2000))
    elapsed = time.perf_counter() - t
    final = smoothed(curve, 100)[-1]
    ratio = curve[0] / final
    ok = ratio >= 5 and elapsed < 1800
    return report(5, "head training", ok,
                  f"initial {curve[0]:.4f}, smoothed final {final:.4f}, reduction {ratio:.1f}x (>= 5x), "
                  f"ground truth never read, {elapsed / 60:.1f} min (< 30 min)")


# 6 -----------------------------------------------------------------------

def criterion_determinism():
    with tempfile.TemporaryDirectory() as d:
        j = lambda *p: os.path.join(d, *p)  # noqa: E731
        model, data = j("model.figm"), j("data")
        sample = j("data", "sample_00001")
        commands = [
            ["gen-model", "--out", model, "--n-grid", "12"],
            ["gen-dataset", "--model", model, "--out", data, "--n", "4", "--dim", "256"],
            ["render", "--model", model, "--params", sample + ".params", "--out", j("r.ppm")],
            ["fit", "--model", model, "--image", sample + ".ppm", "--landmarks", sample + ".landmarks",
             "--iters", "60", "--out", j("fit.json"), "--trace", j("trace.csv")],
            ["--threads", "2", "train-head", "--model", model, "--dataset", data, "--iters", "4",
             "--batch-size", "2", "--grad-accum", "2", "--out", j("head.figh"), "--curve", j("curve.csv")],
            ["eval", "--model", model, "--params", j("fit.json"), "--image", sample + ".ppm",
             "--landmarks", sample + ".landmarks", "--out", j("metrics.json")],
            ["gradcheck", "--model", model, "--params", sample + ".params", "--size", "24",
             "--blocks", "phi,gamma", "--out", j("grad.json")],
        ]
        manifests = [j("model.figm.manifest.json"), j("data", "manifest.json"),
                     j("r.ppm.manifest.json"), j("fit.json.manifest.json"),
                     j("head.figh.manifest.json"), j("metrics.json.manifest.json"),
                     j("grad.json.manifest.json")]
        for argv in commands:
            if cli(argv, quiet=True) != 0:
                return report(6, "determinism", False, f"command failed: {argv[0]}")
        recorded = {}
        for m in manifests:
            with open(m) as f:
                recorded[m] = json.load(f)["outputs"]
        bad = []
        for threads in (None, 8):
            for m in manifests:
                argv = ["replay", m] + ([] if threads is None else ["--threads", str(threads)])
                if cli(argv, quiet=True) != 0:
                    bad.append((os.path.basename(m), threads))
        # replays rewrite manifests; their recorded hashes must still be the originals
        for m, outs in recorded.items():
            for o in outs:
                with open(o["path"], "rb") as f:
                    if hashlib.sha256(f.read()).hexdigest() != o["sha256"]:
                        bad.append((o["path"], "final"))
    n_out = sum(len(v) for v in recorded.values())
    return report(6, "determinism", not bad,
                  f"7 commands, {n_out} outputs replayed serially and with --threads 8: "
                  + ("byte-identical" if not bad else f"mismatch {bad}"))


# 7 -----------------------------------------------------------------------

def criterion_defaults():
    w = LossWeights()
    snap = TrainConfig().snapshot()
    expected = {"optimizer": "AdamW", "lr": 2e-5, "weight_decay": 0.0, "warmup_iters": 100,
                "batch_size": 8, "grad_accum": 4}
    weights_ok = (w.lambda_pixel, w.lambda_perc, w.lambda_lm, w.lambda_reg) == (0.5, 0.25, 5e-4, 0.1)
    train_ok = {k: snap[k] for k in expected} == expected
    ok = weights_ok and train_ok and snap["loss_weights"] == {"pixel": 0.5, "perc": 0.25,
                                                               "lm": 5e-4, "reg": 0.1}
    return report(7, "default configuration", ok,
                  f"loss weights {(w.lambda_pixel, w.lambda_perc, w.lambda_lm, w.lambda_reg)}, "
                  f"training {', '.join(f'{k}={snap[k]}' for k in expected)}")


CRITERIA = [criterion_renderer_equivalence, criterion_gradients, criterion_loss_identities,
            criterion_recovery, criterion_head_training, criterion_determinism, criterion_defaults]


@pytest.mark.parametrize("criterion", CRITERIA, ids=lambda f: f.__name__.replace("criterion_", ""))
def test_acceptance(criterion):
    assert criterion()


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    sys.exit(0 if all(results) else 1)
