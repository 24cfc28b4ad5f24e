"""Analysis-by-synthesis fitting of face parameters to an image and landmarks."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .assets import MorphableModel
from .decoder import select_landmarks_3d
from .losses import (TERMS, DownsampleExtractor, LossWeights, SkinGMM, face_loss,
                     projected_landmarks, skin_mask)
from .optim import Adam
from .params import BLOCKS, LOG_SCALE, TX, TY, FaceParams, block_slices
from .renderer import Renderer, render
from .scene import project

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    max_iters: int = 200
    lr: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    landmark_only_warmup_iters: int = 30
    convergence_tol: float = 1e-6
    block_lr: dict = field(default_factory=lambda: {b: 1.0 for b in BLOCKS})
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class FitResult:
    params: FaceParams
    trace: list          # one row per evaluated iterate: [total, pixel, perc, lm, reg] weighted
    best_iter: int
    converged: bool

    @property
    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(np.array([row[0] for row in self.trace]))


def init_from_landmarks(landmarks, model: MorphableModel, size) -> FaceParams:
    """Zero code with a camera that centers and scales the mean face onto
    the landmarks (no rotation)."""
    width, height = size
    landmarks = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    valid = np.all(np.isfinite(landmarks), axis=1)
    if valid.sum() < 2:
        raise ValueError("need at least two valid landmarks")
    params = FaceParams.zeros_like_model(model)
    mean_lm = select_landmarks_3d(model.float64("mean_shape"), model.landmark_indices)[valid]
    ref = project(mean_lm, np.zeros(6), width, height)[:, :2]
    pts = landmarks[valid]

    def diag(p):
        return np.linalg.norm(p.max(0) - p.min(0))

    scale = diag(pts) / diag(ref)
    if not np.isfinite(scale) or scale <= 0:
        raise ValueError("degenerate landmark configuration")
    ndc_x = 2.0 * pts[:, 0] / width - 1.0
    ndc_y = 1.0 - 2.0 * pts[:, 1] / height
    params.cam[LOG_SCALE] = np.log(scale)
    params.cam[TX] = ndc_x.mean() - scale * mean_lm[:, 0].mean()
    params.cam[TY] = ndc_y.mean() - scale * mean_lm[:, 1].mean()
    return params


def fit(target, landmarks, model: MorphableModel, config: FitConfig | None = None,
        init: FaceParams | None = None, mask=None, gmm: SkinGMM | None = None,
        extractor=None) -> FitResult:
    """Adam on the face loss; the first ``landmark_only_warmup_iters`` steps
    follow only the landmark and prior gradients.

    Every iterate (including the initial one) is scored with the full loss;
    the lowest-scoring iterate is returned.
    """
    config = config or FitConfig()
    target = np.asarray(target, dtype=np.float64)
    height, width = target.shape[:2]
    if init is None:
        init = init_from_landmarks(landmarks, model, (width, height))
    if mask is None:
        mask = skin_mask(target, gmm)
    extractor = extractor or DownsampleExtractor()
    renderer = Renderer(model, width, height)
    weights = config.weights
    sizes = init.sizes
    slices = block_slices(sizes)
    lr_scale = np.ones(sum(sizes))
    for name, mult in config.block_lr.items():
        lr_scale[slices[name]] = mult
    opt = Adam(sum(sizes), lr=config.lr, betas=config.betas, eps=config.eps, lr_scale=lr_scale)

    theta = init.to_vector()
    best_theta, best_loss, best_iter = theta.copy(), np.inf, 0
    trace = []
    converged = False
    prev = None
    for it in range(config.max_iters + 1):
        params = FaceParams.from_vector(theta, sizes)
        report, grad = face_loss(target, landmarks, model, params, weights, extractor,
                                 mask=mask, renderer=renderer)
        if not np.isfinite(report.total) or not np.all(np.isfinite(grad)):
            raise FloatingPointError(
                f"non-finite loss at iteration {it}: raw terms {report.raw}")
        trace.append(report.row())
        if report.total < best_loss:
            best_loss, best_theta, best_iter = report.total, theta.copy(), it
        if it == config.max_iters:
            break
        in_warmup = it < config.landmark_only_warmup_iters
        if not in_warmup and prev is not None:
            if abs(prev - report.total) <= config.convergence_tol * max(abs(prev), 1e-300):
                converged = True
                break
        prev = None if in_warmup else report.total
        if in_warmup:
            grad = (weights.lambda_lm * report.term_gradients["lm"]
                    + weights.lambda_reg * report.term_gradients["reg"])
        opt.step(theta, grad)
    log.debug("fit finished: best %.6g at iteration %d of %d", best_loss, best_iter, len(trace) - 1)
    return FitResult(FaceParams.from_vector(best_theta, sizes), trace, best_iter, converged)


def evaluate(target, mask, landmarks, model: MorphableModel, params: FaceParams,
             size=None) -> dict:
    """Photometric and landmark error of a parameter estimate.

    ``photometric_l2`` is the mean per-pixel RGB Euclidean distance over
    pixels that are both in the mask (weight > 0.5) and covered by the
    render; it is NaN, with ``photometric_defined`` false, when that set is
    empty. ``landmark_px`` is the mean Euclidean distance in pixels over
    valid landmarks.
    """
    target = np.asarray(target, dtype=np.float64)
    height, width = target.shape[:2]
    if size is not None and tuple(size) != (width, height):
        raise ValueError(f"size {tuple(size)} does not match target {(width, height)}")
    out = render(model, params, width, height)
    region = out.coverage
    if mask is not None:
        region = region & (np.asarray(mask) > 0.5)
    defined = bool(region.any())
    if defined:
        dist = np.linalg.norm(target - out.color, axis=-1)
        photometric = float(dist[region].mean())
    else:
        photometric = float("nan")
    landmarks = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    proj = projected_landmarks(model, params, width, height)
    valid = np.all(np.isfinite(landmarks), axis=1)
    lm_px = float(np.linalg.norm(proj[valid] - landmarks[valid], axis=1).mean()) \
        if valid.any() else float("nan")
    return {"photometric_l2": photometric, "landmark_px": lm_px,
            "photometric_defined": defined}


def write_trace_csv(trace, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["iter", "total", *TERMS])
        for i, row in enumerate(trace):
            writer.writerow([i, *(repr(float(v)) for v in row)])
