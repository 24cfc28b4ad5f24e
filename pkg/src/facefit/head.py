"""MLP projection head from an opaque embedding to face parameters, trained
only through the rendered face loss.

The synthetic embeddings used here are noisy linear encodings ``W @ theta``
of a hidden parameter vector. They carry the complete face by construction,
which is an idealization of a language-model hidden state.
"""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .assets import MorphableModel, ModelFormatError, read_named_arrays
from .losses import LossWeights, DownsampleExtractor, face_loss, projected_landmarks
from .optim import Adam, warmup_decay_lr
from .params import N_CAM, N_PHI, FaceParams, load_params, save_params
from .renderer import Renderer, render
from .scene import default_light

HEAD_MAGIC = b"FIGH"
HEAD_VERSION = 1
DEFAULT_LAYERS = (4096, 1024, 1024, 257)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass
class HeadWeights:
    weights: list   # matrices of shape (fan_in, fan_out)
    biases: list

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def copy(self) -> "HeadWeights":
        return HeadWeights([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> list:
        return [a for pair in zip(self.weights, self.biases) for a in pair]


def head_init(seed: int = 0, layer_sizes=DEFAULT_LAYERS) -> HeadWeights:
    """Glorot-uniform weights, zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return HeadWeights(weights, biases)


def mlp_forward(head: HeadWeights, x):
    """Batched forward pass; returns the output and the pre-activations."""
    h = np.asarray(x, dtype=np.float64)
    pre = []
    last = len(head.weights) - 1
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        z = h @ w + b
        pre.append((h, z))
        h = z if i == last else gelu(z)
    return h, pre


def mlp_backward(head: HeadWeights, pre, d_out, input_grad: bool = True):
    """Gradients w.r.t. weights, biases and (optionally) the input."""
    d = np.asarray(d_out, dtype=np.float64)
    d_w, d_b = [None] * len(head.weights), [None] * len(head.weights)
    last = len(head.weights) - 1
    for i in range(last, -1, -1):
        h_in, z = pre[i]
        if i != last:
            d = d * gelu_grad(z)
        d_w[i] = h_in.T @ d
        d_b[i] = d.sum(axis=0)
        if i > 0 or input_grad:
            d = d @ head.weights[i].T
    return d_w, d_b, d


def head_forward(head: HeadWeights, embedding, sizes=(80, 64, 80, N_PHI, N_CAM)) -> FaceParams:
    embedding = np.asarray(embedding, dtype=np.float64).ravel()
    if embedding.size != head.layer_sizes[0]:
        raise ValueError(f"embedding has {embedding.size} entries, head expects "
                         f"{head.layer_sizes[0]}")
    if head.layer_sizes[-1] != sum(sizes):
        raise ValueError(f"head output {head.layer_sizes[-1]} does not split into {sizes}")
    out, _ = mlp_forward(head, embedding[None, :])
    return FaceParams.from_vector(out[0], sizes)


def save_head(head: HeadWeights, path: str | os.PathLike) -> None:
    sizes = head.layer_sizes
    chunks = [HEAD_MAGIC, struct.pack("<II", HEAD_VERSION, len(sizes)),
              struct.pack(f"<{len(sizes)}I", *sizes)]
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        for name, arr in ((f"W{i}", w), (f"b{i}", b)):
            data = np.ascontiguousarray(arr, dtype="<f4")
            enc = name.encode("ascii")
            chunks.append(struct.pack("<I", len(enc)) + enc + struct.pack("<I", data.size)
                          + data.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_head(path: str | os.PathLike) -> HeadWeights:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != HEAD_MAGIC:
        raise ModelFormatError("not a head weights file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != HEAD_VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    if len(data) < 12 + 4 * n:
        raise ModelFormatError("truncated header")
    sizes = struct.unpack_from(f"<{n}I", data, 12)
    spec = []
    for i in range(n - 1):
        spec += [(f"W{i}", "<f4"), (f"b{i}", "<f4")]
    arrays, end = read_named_arrays(data, 12 + 4 * n, spec)
    if end != len(data):
        raise ModelFormatError("trailing bytes")
    weights, biases = [], []
    for i in range(n - 1):
        w, b = arrays[2 * i], arrays[2 * i + 1]
        if w.size != sizes[i] * sizes[i + 1] or b.size != sizes[i + 1]:
            raise ModelFormatError(f"layer {i} size does not match header")
        weights.append(w.astype(np.float64).reshape(sizes[i], sizes[i + 1]))
        biases.append(b.astype(np.float64))
    return HeadWeights(weights, biases)


# --------------------------------------------------------------------------
# synthetic embedding data


@dataclass
class EmbeddingSample:
    embedding: np.ndarray
    target_image: np.ndarray
    landmarks: np.ndarray
    theta_true: FaceParams | None = None   # diagnostics only, never used for training


def sample_face_params(model: MorphableModel, rng: np.random.Generator) -> FaceParams:
    """Random face: N(0, 0.5^2) codes, jittered white light, near-frontal camera."""
    return FaceParams(
        alpha=0.5 * rng.standard_normal(model.k_shape),
        delta=0.5 * rng.standard_normal(model.k_expr),
        gamma=0.5 * rng.standard_normal(model.k_albedo),
        phi=default_light() + 0.1 * rng.standard_normal(N_PHI),
        cam=np.concatenate([0.1 * rng.standard_normal(3), 0.05 * rng.standard_normal(3)]),
    )


def encoding_matrix(seed: int, dim: int, n_params: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return rng.standard_normal((dim, n_params)) / np.sqrt(n_params)


def gen_embedding_dataset(model: MorphableModel, n_samples: int, seed: int = 0,
                          noise_sigma: float = 0.01, size=(32, 32),
                          dim: int = 4096) -> list[EmbeddingSample]:
    """Samples with ``embedding = W @ theta + noise``, rendered targets and
    exact projected landmarks."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    width, height = size
    n_params = model.k_shape + model.k_expr + model.k_albedo + N_PHI + N_CAM
    enc = encoding_matrix(seed, dim, n_params)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    samples = []
    for _ in range(n_samples):
        theta = sample_face_params(model, rng)
        noise = noise_sigma * rng.standard_normal(dim) if noise_sigma else 0.0
        emb = enc @ theta.to_vector() + noise
        image = render(model, theta, width, height).color
        lms = projected_landmarks(model, theta, width, height)
        samples.append(EmbeddingSample(emb, image, lms, theta))
    return samples


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    iters: int = 2000
    lr: float = 2e-5
    weight_decay: float = 0.0
    optimizer: str = "AdamW"
    warmup_iters: int = 100
    batch_size: int = 8
    grad_accum: int = 4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    face_weight: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    threads: int = 1

    def snapshot(self) -> dict:
        return {"iters": self.iters, "lr": self.lr, "weight_decay": self.weight_decay,
                "optimizer": self.optimizer, "warmup_iters": self.warmup_iters,
                "batch_size": self.batch_size, "grad_accum": self.grad_accum,
                "betas": list(self.betas), "eps": self.eps, "face_weight": self.face_weight,
                "loss_weights": self.weights.as_dict(), "seed": self.seed}


class _BatchSampler:
    """Shuffled epochs; each batch is returned in ascending index order."""

    def __init__(self, n, batch_size, rng):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.queue = np.empty(0, dtype=np.int64)

    def next(self):
        b = min(self.batch_size, self.n)
        if len(self.queue) < b:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.n)])
        batch, self.queue = self.queue[:b], self.queue[b:]
        return np.sort(batch)


def head_train(dataset, model: MorphableModel, config: TrainConfig | None = None,
               head: HeadWeights | None = None, callback=None):
    """Train the head by backpropagating the face loss through the renderer.

    Only ``embedding``, ``target_image`` and ``landmarks`` of each sample are
    read. One iteration is one optimizer step over ``batch_size * grad_accum``
    samples; the returned curve holds the mean (unweighted) face loss of each
    iteration's samples. Returns ``(weights, curve)``.
    """
    config = config or TrainConfig()
    if not len(dataset):
        raise ValueError("empty dataset")
    inputs = [(s.embedding, s.target_image, s.landmarks) for s in dataset]
    dim = inputs[0][0].size
    height, width = inputs[0][1].shape[:2]
    sizes = (model.k_shape, model.k_expr, model.k_albedo, N_PHI, N_CAM)
    if head is None:
        head = head_init(config.seed, (dim, 1024, 1024, sum(sizes)))
    else:
        head = head.copy()
    if head.layer_sizes[0] != dim or head.layer_sizes[-1] != sum(sizes):
        raise ValueError(f"head sizes {head.layer_sizes} do not fit data/model")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    sampler = _BatchSampler(len(inputs), config.batch_size, rng)
    params = head.flat()
    opts = [Adam(p.shape, lr=config.lr, betas=config.betas, eps=config.eps,
                 weight_decay=config.weight_decay) for p in params]
    extractor = DownsampleExtractor()
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None

    def sample_grad(args):
        theta_vec, idx = args
        _, image, lms = inputs[idx]
        report, grad = face_loss(image, lms, model, FaceParams.from_vector(theta_vec, sizes),
                                 config.weights, extractor, renderer=Renderer(model, width, height))
        return report.total, grad

    curve = []
    try:
        for it in range(config.iters):
            # the accumulated micro-batches share one set of weights, so they
            # are stacked into a single forward/backward pass
            batches = [sampler.next() for _ in range(config.grad_accum)]
            order = np.concatenate(batches)
            x = np.stack([inputs[i][0] for i in order])
            out, pre = mlp_forward(head, x)
            jobs = list(zip(out, order))
            results = list(pool.map(sample_grad, jobs)) if pool else list(map(sample_grad, jobs))
            losses = [r[0] for r in results]
            if not np.all(np.isfinite(losses)):
                raise FloatingPointError(
                    f"non-finite face loss at iteration {it} for samples {order.tolist()}")
            d_out = np.stack([r[1] for r in results])
            d_out *= config.face_weight / len(order)
            d_w, d_b, _ = mlp_backward(head, pre, d_out, input_grad=False)
            grads = [a for pair in zip(d_w, d_b) for a in pair]
            curve.append(float(np.mean(losses)))
            lr = warmup_decay_lr(it, config.lr, config.warmup_iters, config.iters)
            for p, g, opt in zip(params, grads, opts):
                opt.step(p, g, lr=lr)
            if callback is not None:
                callback(it, curve[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    return head, np.asarray(curve)


def smoothed(curve, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    curve = np.asarray(curve, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(curve)])
    idx = np.arange(1, len(curve) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# --------------------------------------------------------------------------
# dataset directories


def write_f32_array(path, arr) -> None:
    arr = np.ascontiguousarray(np.asarray(arr).ravel(), dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", arr.size) + arr.tobytes())


def read_f32_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise ModelFormatError(f"{path}: truncated")
    (n,) = struct.unpack_from("<I", data)
    if len(data) != 4 + 4 * n:
        raise ModelFormatError(f"{path}: expected {n} floats")
    return np.frombuffer(data, dtype="<f4", offset=4).astype(np.float64)


def save_dataset(dataset, directory) -> list[str]:
    from .io import write_landmarks, write_ppm

    os.makedirs(directory, exist_ok=True)
    written = []
    for i, s in enumerate(dataset):
        stem = os.path.join(directory, f"sample_{i:05d}")
        write_ppm(stem + ".ppm", s.target_image)
        write_landmarks(stem + ".landmarks", s.landmarks)
        write_f32_array(stem + ".embedding", s.embedding)
        written += [stem + ".ppm", stem + ".landmarks", stem + ".embedding"]
        if s.theta_true is not None:
            save_params(s.theta_true, stem + ".params")
            written.append(stem + ".params")
    return written


def load_dataset(directory, with_truth: bool = False) -> list[EmbeddingSample]:
    from .io import read_landmarks, read_ppm

    stems = sorted(f[:-len(".embedding")] for f in os.listdir(directory)
                   if f.startswith("sample_") and f.endswith(".embedding"))
    if not stems:
        raise FileNotFoundError(f"no samples in {directory}")
    out = []
    for stem in stems:
        base = os.path.join(directory, stem)
        truth = None
        if with_truth and os.path.exists(base + ".params"):
            truth = load_params(base + ".params")
        out.append(EmbeddingSample(read_f32_array(base + ".embedding"), read_ppm(base + ".ppm"),
                                   read_landmarks(base + ".landmarks"), truth))
    return out
