"""Command-line entry point.

Every command prints one JSON line and writes a run manifest next to its
primary output. ``facefit replay MANIFEST`` re-executes the recorded command
and checks that every output file is byte-identical.

Exit codes: 0 success, 1 gradcheck/replay mismatch, 2 invalid arguments or
inputs, 3 I/O failure, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import shutil
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .assets import ModelFormatError, gen_synthetic_model, load_model, save_model
from .fitter import FitConfig, evaluate, fit, write_trace_csv
from .head import (TrainConfig, gen_embedding_dataset, head_train, load_dataset, save_dataset,
                   save_head)
from .io import read_landmarks, read_ppm, write_ppm
from .losses import GMMFormatError, LossWeights, load_gmm, skin_mask
from .params import BLOCKS, FaceParams, load_params, save_params
from .renderer import gradcheck, render

EXIT_MISMATCH = 1
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class CLIError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path, writer):
    """Write via a temporary sibling so a failure leaves no partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _positive(kind):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}")
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


def _nonneg_float(text):
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {text}")
    return value


def _size(text):
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}; use N or WxH with N >= 1")
    return tuple(parts)


def _blocks(text):
    names = [b.strip() for b in text.split(",") if b.strip()]
    bad = [b for b in names if b not in BLOCKS]
    if not names or bad:
        raise argparse.ArgumentTypeError(f"blocks must be a subset of {','.join(BLOCKS)}")
    return names


# --------------------------------------------------------------------------
# commands; each returns (summary dict, output paths, manifest path, config dict)


def cmd_gen_model(args):
    model = gen_synthetic_model(args.seed, args.n_grid)
    _atomic_write(args.out, lambda p: save_model(model, p))
    summary = {"n_vertices": model.n_vertices, "n_triangles": model.n_triangles}
    return summary, [args.out], args.out + ".manifest.json", {"n_grid": args.n_grid}


def cmd_gen_dataset(args):
    model = load_model(args.model)
    data = gen_embedding_dataset(model, args.n, args.seed, args.noise, args.size, args.dim)
    if os.path.exists(args.out):
        foreign = [f for f in os.listdir(args.out)
                   if not (f.startswith("sample_") or f == "manifest.json")]
        if foreign:
            raise CLIError(f"{args.out} holds files that are not part of a dataset",
                           EXIT_VALIDATION)
    tmp = tempfile.mkdtemp(dir=os.path.dirname(os.path.abspath(args.out)), prefix=".tmp-")
    try:
        save_dataset(data, tmp)
        if os.path.exists(args.out):
            shutil.rmtree(args.out)
        os.replace(tmp, args.out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    outputs = sorted(os.path.join(args.out, f) for f in os.listdir(args.out))
    config = {"n": args.n, "noise": args.noise, "size": list(args.size), "dim": args.dim}
    return ({"n_samples": len(data)}, outputs,
            os.path.join(args.out, "manifest.json"), config)


def cmd_render(args):
    model = load_model(args.model)
    params = load_params(args.params) if args.params else FaceParams.zeros_like_model(model)
    width, height = args.size
    out = render(model, params, width, height)
    _atomic_write(args.out, lambda p: write_ppm(p, out.color))
    summary = {"covered_pixels": int(out.coverage.sum())}
    return summary, [args.out], args.out + ".manifest.json", {"size": list(args.size)}


def _fit_config(args):
    weights = LossWeights(args.lambda_pixel, args.lambda_perc, args.lambda_lm, args.lambda_reg)
    return FitConfig(max_iters=args.iters, lr=args.lr, weights=weights,
                     landmark_only_warmup_iters=args.warmup, seed=args.seed)


def cmd_fit(args):
    model = load_model(args.model)
    image = read_ppm(args.image)
    landmarks = read_landmarks(args.landmarks)
    if len(landmarks) != model.n_landmarks:
        raise CLIError(f"{len(landmarks)} landmarks given, model has {model.n_landmarks}",
                       EXIT_VALIDATION)
    gmm = load_gmm(args.gmm) if args.gmm else None
    init = load_params(args.init) if args.init else None
    config = _fit_config(args)
    result = fit(image, landmarks, model, config, init=init, gmm=gmm)
    mask = skin_mask(image, gmm)
    metrics = evaluate(image, mask, landmarks, model, result.params)
    _atomic_write(args.out, lambda p: save_params(result.params, p))
    outputs = [args.out]
    if args.trace:
        _atomic_write(args.trace, lambda p: write_trace_csv(result.trace, p))
        outputs.append(args.trace)
    summary = {"final_loss": result.trace[result.best_iter][0], "best_iter": result.best_iter,
               **metrics}
    cfg = {"iters": args.iters, "lr": args.lr, "warmup": args.warmup,
           "weights": config.weights.as_dict()}
    return summary, outputs, args.out + ".manifest.json", cfg


def cmd_train_head(args):
    model = load_model(args.model)
    data = load_dataset(args.dataset)
    config = TrainConfig(iters=args.iters, lr=args.lr, weight_decay=args.weight_decay,
                         warmup_iters=args.warmup, batch_size=args.batch_size,
                         grad_accum=args.grad_accum, seed=args.seed, threads=args.threads)
    head, curve = head_train(data, model, config)
    _atomic_write(args.out, lambda p: save_head(head, p))
    outputs = [args.out]
    if args.curve:
        def write_curve(p):
            with open(p, "w") as f:
                f.write("iter,face_loss\n")
                for i, v in enumerate(curve):
                    f.write(f"{i},{float(v)!r}\n")
        _atomic_write(args.curve, write_curve)
        outputs.append(args.curve)
    summary = {"initial_loss": float(curve[0]), "final_loss": float(curve[-1])}
    return summary, outputs, args.out + ".manifest.json", config.snapshot()


def cmd_eval(args):
    model = load_model(args.model)
    params = load_params(args.params)
    image = read_ppm(args.image)
    landmarks = read_landmarks(args.landmarks)
    gmm = load_gmm(args.gmm) if args.gmm else None
    metrics = evaluate(image, skin_mask(image, gmm), landmarks, model, params)
    outputs = []
    manifest = None
    if args.out:
        _atomic_write(args.out, lambda p: _write_json(p, metrics))
        outputs.append(args.out)
        manifest = args.out + ".manifest.json"
    return metrics, outputs, manifest, {}


def cmd_gradcheck(args):
    model = load_model(args.model)
    params = load_params(args.params) if args.params else None
    if params is None:
        from .scene import default_light
        params = FaceParams.zeros_like_model(model)
        params.phi = default_light()
    width, height = args.size
    report = gradcheck(model, params, width, height, blocks=args.blocks, tolerance=args.tol,
                       eps=args.eps, seed=args.seed)
    summary = report.summary()
    outputs = []
    manifest = None
    if args.out:
        _atomic_write(args.out, lambda p: _write_json(p, summary))
        outputs.append(args.out)
        manifest = args.out + ".manifest.json"
    if not report.passed:
        summary["exit_code"] = EXIT_MISMATCH
    return summary, outputs, manifest, {"blocks": args.blocks, "tol": args.tol, "eps": args.eps}


def cmd_replay(args):
    try:
        with open(args.manifest) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CLIError(f"cannot read manifest: {exc}", EXIT_IO)
    argv = list(manifest["argv"])
    if args.threads is not None:
        argv = _override_threads(argv, args.threads)
    code = main(argv, quiet=True)
    if code != 0:
        raise CLIError(f"replayed command exited with {code}", code)
    mismatched = [o["path"] for o in manifest["outputs"]
                  if not os.path.exists(o["path"]) or _sha256(o["path"]) != o["sha256"]]
    summary = {"replayed": manifest["command"], "outputs": len(manifest["outputs"]),
               "identical": not mismatched, "mismatched": mismatched}
    if mismatched:
        summary["exit_code"] = EXIT_MISMATCH
    return summary, [], None, {}


def _override_threads(argv, threads):
    out = []
    skip = False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--threads":
            skip = True
            continue
        if a.startswith("--threads="):
            continue
        out.append(a)
    return ["--threads", str(threads)] + out


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facefit", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="global random seed (default 0)")
    p.add_argument("--threads", type=_positive(int), default=1,
                   help="worker threads; results do not depend on this")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-model", help="write a synthetic morphable model")
    s.add_argument("--out", required=True)
    s.add_argument("--n-grid", type=int, default=16)
    s.set_defaults(func=cmd_gen_model)

    s = sub.add_parser("gen-dataset", help="write a synthetic embedding dataset directory")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=_positive(int), default=200)
    s.add_argument("--noise", type=_nonneg_float, default=0.01)
    s.add_argument("--size", type=_size, default=(32, 32))
    s.add_argument("--dim", type=_positive(int), default=4096)
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("render", help="render parameters to a PPM image")
    s.add_argument("--model", required=True)
    s.add_argument("--params", help="parameter JSON (default: all zeros)")
    s.add_argument("--size", type=_size, default=(64, 64))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("fit", help="fit parameters to an image and landmarks")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--landmarks", required=True)
    s.add_argument("--init", help="initial parameter JSON (default: from landmarks)")
    s.add_argument("--gmm", help="skin GMM JSON")
    s.add_argument("--iters", type=_positive(int), default=200)
    s.add_argument("--lr", type=_positive(float), default=1e-2)
    s.add_argument("--warmup", type=int, default=30)
    s.add_argument("--lambda-pixel", type=_nonneg_float, default=0.5)
    s.add_argument("--lambda-perc", type=_nonneg_float, default=0.25)
    s.add_argument("--lambda-lm", type=_nonneg_float, default=5e-4)
    s.add_argument("--lambda-reg", type=_nonneg_float, default=0.1)
    s.add_argument("--out", required=True, help="fitted parameter JSON")
    s.add_argument("--trace", help="per-iteration loss CSV")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("train-head", help="train the embedding-to-parameters head")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--iters", type=_positive(int), default=2000)
    s.add_argument("--lr", type=_nonneg_float, default=2e-5)
    s.add_argument("--weight-decay", type=_nonneg_float, default=0.0)
    s.add_argument("--warmup", type=int, default=100)
    s.add_argument("--batch-size", type=_positive(int), default=8)
    s.add_argument("--grad-accum", type=_positive(int), default=4)
    s.add_argument("--out", required=True, help="head weights file")
    s.add_argument("--curve", help="loss curve CSV")
    s.set_defaults(func=cmd_train_head)

    s = sub.add_parser("eval", help="photometric and landmark metrics")
    s.add_argument("--model", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--landmarks", required=True)
    s.add_argument("--gmm")
    s.add_argument("--out", help="metrics JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="compare analytic and numeric render gradients")
    s.add_argument("--model", required=True)
    s.add_argument("--params", help="parameter JSON (default: zero code, default light)")
    s.add_argument("--size", type=_size, default=(32, 32))
    s.add_argument("--blocks", type=_blocks, default=list(BLOCKS))
    s.add_argument("--tol", type=_positive(float), default=1e-4)
    s.add_argument("--eps", type=_positive(float), default=1e-4)
    s.add_argument("--out", help="report JSON")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("replay", help="re-run a manifest and compare outputs byte for byte")
    s.add_argument("manifest")
    s.add_argument("--threads", dest="replay_threads", type=_positive(int), default=None)
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None, quiet: bool = False) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "replay":
        args.threads = args.replay_threads
    start = time.perf_counter()
    try:
        summary, outputs, manifest_path, config = args.func(args)
    except CLIError as exc:
        return _fail(str(exc), exc.code, quiet)
    except (FileNotFoundError, PermissionError, IsADirectoryError, ModelFormatError,
            GMMFormatError) as exc:
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_IO, quiet)
    except OSError as exc:
        return _fail(f"I/O error: {exc}", EXIT_IO, quiet)
    except FloatingPointError as exc:
        return _fail(f"numerical failure: {exc}", EXIT_NUMERIC, quiet)
    except (ValueError, IndexError, KeyError) as exc:
        return _fail(f"invalid input: {exc}", EXIT_VALIDATION, quiet)
    elapsed = time.perf_counter() - start
    code = int(summary.pop("exit_code", 0))
    if manifest_path is not None:
        _write_manifest(manifest_path, args, argv, config, outputs, summary, elapsed)
    if not quiet:
        print(json.dumps({"command": args.command, "status": "ok" if code == 0 else "fail",
                          **_jsonable(summary)}, sort_keys=True))
    return code


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _write_manifest(path, args, argv, config, outputs, metrics, elapsed):
    inputs = {}
    for key in ("model", "params", "image", "landmarks", "init", "gmm", "dataset"):
        value = getattr(args, key, None)
        if value and os.path.isfile(value):
            inputs[key] = {"path": value, "sha256": _sha256(value)}
        elif value:
            inputs[key] = {"path": value}
    manifest = {
        "command": args.command,
        "argv": argv,
        "config": _jsonable(config),
        "seeds": {"seed": args.seed},
        "threads": args.threads,
        "inputs": inputs,
        "outputs": [{"path": o, "sha256": _sha256(o)} for o in outputs],
        "metrics": _jsonable(metrics),
        "wall_clock_s": elapsed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    _atomic_write(path, lambda p: _write_json(p, manifest))


def _fail(message, code, quiet):
    print(f"facefit: error: {message}", file=sys.stderr)
    if not quiet:
        print(json.dumps({"status": "error", "exit_code": code, "error": message}))
    return code


if __name__ == "__main__":
    sys.exit(main())
