"""Self-supervised face loss: masked pixel term, perceptual term, landmark
term and coefficient prior, each returning its value and an adjoint."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .assets import MorphableModel
from .decoder import decode_geometry, geometry_backward, scatter_add, select_landmarks_3d
from .params import FaceParams, block_slices
from .renderer import Renderer
from .scene import project, project_backward

TERMS = ("pixel", "perc", "lm", "reg")


@dataclass
class LossWeights:
    lambda_pixel: float = 0.5
    lambda_perc: float = 0.25
    lambda_lm: float = 5e-4
    lambda_reg: float = 0.1
    reg_block_weights: dict = field(
        default_factory=lambda: {"alpha": 1.0, "delta": 1.0, "gamma": 1.0})

    def __post_init__(self):
        values = [self.lambda_pixel, self.lambda_perc, self.lambda_lm, self.lambda_reg,
                  *self.reg_block_weights.values()]
        if any(v < 0 for v in values):
            raise ValueError("loss weights must be nonnegative")

    def as_dict(self) -> dict:
        return {"pixel": self.lambda_pixel, "perc": self.lambda_perc,
                "lm": self.lambda_lm, "reg": self.lambda_reg}


@dataclass
class LossReport:
    total: float
    raw: dict
    weighted: dict
    term_gradients: dict = field(default_factory=dict, repr=False)

    def row(self) -> list[float]:
        return [self.total] + [self.weighted[t] for t in TERMS]


# --------------------------------------------------------------------------
# pixel term


def pixel_loss(target, rendered, mask=None):
    """Masked mean squared RGB error, normalized by the mask mass.

    Returns ``(loss, d_rendered)``.
    """
    target = np.asarray(target, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    if target.shape != rendered.shape:
        raise ValueError(f"image shapes differ: {target.shape} vs {rendered.shape}")
    if mask is None:
        mask = np.ones(target.shape[:2])
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != target.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {target.shape[:2]}")
    norm = max(mask.sum(), 1.0)
    diff = target - rendered
    loss = float(np.sum(mask * np.sum(diff * diff, axis=-1)) / norm)
    return loss, -2.0 * mask[..., None] * diff / norm


# --------------------------------------------------------------------------
# skin mask


class GMMFormatError(ValueError):
    pass


@dataclass
class SkinGMM:
    """Diagonal-covariance Gaussian mixture over RGB in [0, 1]."""

    weights: np.ndarray
    means: np.ndarray
    covariances_diag: np.ndarray
    skin_components: list

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances_diag = np.asarray(self.covariances_diag, dtype=np.float64)
        k = self.weights.shape[0] if self.weights.ndim == 1 else -1
        if k < 1 or self.means.shape != (k, 3) or self.covariances_diag.shape != (k, 3):
            raise GMMFormatError("GMM needs K weights, K x 3 means and K x 3 diagonal covariances")
        if np.any(self.weights < 0) or np.any(self.covariances_diag <= 0):
            raise GMMFormatError("GMM weights must be >= 0 and variances > 0")
        comps = list(self.skin_components)
        if not comps or any(not (0 <= int(c) < k) for c in comps):
            raise GMMFormatError("skin_components must be a nonempty list of component indices")
        self.skin_components = [int(c) for c in comps]

    def log_joint(self, pixels) -> np.ndarray:
        """``log(w_k N(x | mu_k, Sigma_k))`` with shape ``(..., K)``."""
        x = np.asarray(pixels, dtype=np.float64)[..., None, :]
        var = self.covariances_diag
        quad = np.sum((x - self.means) ** 2 / var, axis=-1)
        log_norm = -0.5 * np.sum(np.log(2.0 * np.pi * var), axis=-1)
        with np.errstate(divide="ignore"):
            return np.log(self.weights) + log_norm - 0.5 * quad

    @classmethod
    def from_dict(cls, d) -> "SkinGMM":
        try:
            return cls(d["weights"], d["means"], d["covariances_diag"], d["skin_components"])
        except (KeyError, TypeError) as exc:
            raise GMMFormatError(f"malformed GMM description: {exc}") from exc

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covariances_diag": self.covariances_diag.tolist(),
                "skin_components": list(self.skin_components)}


def load_gmm(path: str | os.PathLike) -> SkinGMM:
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as exc:
        raise GMMFormatError(f"{path}: {exc}") from exc
    return SkinGMM.from_dict(d)


def skin_mask(image, gmm: SkinGMM | None = None, hard: bool = False) -> np.ndarray:
    """Posterior probability that each pixel belongs to a skin component.

    Without a mixture the mask is all ones.
    """
    image = np.asarray(image, dtype=np.float64)
    if gmm is None:
        return np.ones(image.shape[:2])
    lj = gmm.log_joint(image)
    post = np.exp(logsumexp(lj[..., gmm.skin_components], axis=-1) - logsumexp(lj, axis=-1))
    if hard:
        return (post > 0.5).astype(np.float64)
    return post


# --------------------------------------------------------------------------
# landmark term


def landmark_loss(detected, projected):
    """Mean squared pixel distance over landmarks valid in both sets.

    Rows containing NaN are treated as missing and skipped. Returns
    ``(loss, d_projected)``.
    """
    detected = np.asarray(detected, dtype=np.float64).reshape(-1, 2)
    projected = np.asarray(projected, dtype=np.float64)
    projected = projected.reshape(len(projected), -1)[:, :2] if projected.size else projected
    if detected.shape[0] != projected.shape[0]:
        raise ValueError(f"landmark counts differ: {detected.shape[0]} vs {projected.shape[0]}")
    valid = np.all(np.isfinite(detected), axis=1) & np.all(np.isfinite(projected), axis=1)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid landmarks")
    diff = np.where(valid[:, None], projected - np.where(valid[:, None], detected, 0.0), 0.0)
    loss = float(np.sum(diff * diff) / n)
    return loss, 2.0 * diff / n


# --------------------------------------------------------------------------
# perceptual term


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(n_in)[None, :] + 1)
    return np.clip(hi - lo, 0.0, None) / (n_in / n_out)


class DownsampleExtractor:
    """Parameter-free perceptual feature: luma image area-averaged to
    ``size x size``, flattened and scaled to unit norm."""

    LUMA = np.array([0.299, 0.587, 0.114])

    def __init__(self, size: int = 8):
        self.size = size
        self._mats = {}

    def _matrices(self, h, w):
        if (h, w) not in self._mats:
            self._mats[h, w] = (_area_matrix(h, self.size), _area_matrix(w, self.size))
        return self._mats[h, w]

    def _raw(self, image):
        image = np.asarray(image, dtype=np.float64)
        dy, dx = self._matrices(*image.shape[:2])
        return (dy @ (image @ self.LUMA) @ dx.T).ravel()

    def features(self, image) -> np.ndarray:
        v = self._raw(image)
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else np.zeros_like(v)

    def backward(self, image, d_features) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        v = self._raw(image)
        norm = np.linalg.norm(v)
        if norm == 0:
            return np.zeros_like(image)
        f = v / norm
        dv = (d_features - f * np.dot(f, d_features)) / norm
        dy, dx = self._matrices(*image.shape[:2])
        d_gray = dy.T @ dv.reshape(self.size, self.size) @ dx
        return d_gray[..., None] * self.LUMA


def perceptual_loss(target, rendered, extractor=None):
    """``1 - cos(f(target), f(rendered))``; returns ``(loss, d_rendered)``."""
    extractor = extractor or DownsampleExtractor()
    try:
        ft = extractor.features(target)
        fr = extractor.features(rendered)
    except Exception as exc:
        raise RuntimeError(f"feature extractor failed: {exc}") from exc
    loss = float(1.0 - np.dot(ft, fr))
    return loss, extractor.backward(rendered, -ft)


# --------------------------------------------------------------------------
# prior


def reg_loss(params: FaceParams, block_weights=None):
    """Weighted squared norm of the alpha, delta and gamma blocks.

    Illumination and camera are not regularized. Returns
    ``(loss, d_params_vector)``.
    """
    block_weights = block_weights or {"alpha": 1.0, "delta": 1.0, "gamma": 1.0}
    grad = np.zeros(sum(params.sizes))
    slices = block_slices(params.sizes)
    loss = 0.0
    for name in ("alpha", "delta", "gamma"):
        w = float(block_weights.get(name, 1.0))
        block = getattr(params, name)
        loss += w * float(block @ block)
        grad[slices[name]] = 2.0 * w * block
    return loss, grad


# --------------------------------------------------------------------------
# full objective


def projected_landmarks(model: MorphableModel, params: FaceParams, width, height):
    positions = decode_geometry(model, params.alpha, params.delta)
    pts = select_landmarks_3d(positions, model.landmark_indices)
    return project(pts, params.cam, width, height)[:, :2]


def _landmark_term(model, params, landmarks, width, height):
    positions = decode_geometry(model, params.alpha, params.delta)
    pts = select_landmarks_3d(positions, model.landmark_indices)
    screen = project(pts, params.cam, width, height)
    loss, d_xy = landmark_loss(landmarks, screen[:, :2])
    d_screen = np.zeros_like(screen)
    d_screen[:, :2] = d_xy
    d_pts, d_cam = project_backward(pts, params.cam, width, height, d_screen)
    d_positions = scatter_add(model.landmark_indices, d_pts, model.n_vertices)
    d_alpha, d_delta = geometry_backward(model, d_positions)
    grad = np.zeros(sum(params.sizes))
    sl = block_slices(params.sizes)
    grad[sl["alpha"]] = d_alpha
    grad[sl["delta"]] = d_delta
    grad[sl["cam"]] = d_cam
    return loss, grad


def face_loss(target, landmarks, model: MorphableModel, params: FaceParams,
              weights: LossWeights | None = None, extractor=None, size=None,
              mask=None, gmm: SkinGMM | None = None, renderer: Renderer | None = None):
    """Weighted sum of the four face terms and its gradient w.r.t. the
    flattened parameter vector.

    ``size`` is ``(width, height)`` and defaults to the target's. The pixel
    mask defaults to the skin mask of the target (all ones without a GMM).
    Returns ``(LossReport, gradient)``; the report also carries the gradient
    of each raw term.
    """
    weights = weights or LossWeights()
    extractor = extractor or DownsampleExtractor()
    target = np.asarray(target, dtype=np.float64)
    height, width = target.shape[:2]
    if size is not None and tuple(size) != (width, height):
        raise ValueError(f"size {tuple(size)} does not match target {(width, height)}")
    if renderer is None or (renderer.width, renderer.height) != (width, height):
        renderer = Renderer(model, width, height)
    if mask is None:
        mask = skin_mask(target, gmm)
    if not params.is_finite():
        raise FloatingPointError("parameters contain non-finite values")

    out = renderer.forward(params)
    raw, grads = {}, {}
    raw["pixel"], d_pix = pixel_loss(target, out.color, mask)
    raw["perc"], d_perc = perceptual_loss(target, out.color, extractor)
    raw["lm"], grads["lm"] = _landmark_term(model, params, landmarks, width, height)
    raw["reg"], grads["reg"] = reg_loss(params, weights.reg_block_weights)
    lam = weights.as_dict()
    if lam["pixel"] or lam["perc"]:
        adjoint = lam["pixel"] * d_pix + lam["perc"] * d_perc
        image_grad = renderer.backward(adjoint)
    else:
        image_grad = np.zeros(sum(params.sizes))
    weighted = {t: lam[t] * raw[t] for t in TERMS}
    total = float(sum(weighted[t] for t in TERMS))
    grad = image_grad + lam["lm"] * grads["lm"] + lam["reg"] * grads["reg"]
    report = LossReport(total, raw, weighted, grads)
    return report, grad
