"""Linear synthesis of face geometry and albedo, vertex normals, landmarks."""
from __future__ import annotations

import numpy as np

from .assets import MorphableModel


def _check(coeffs, k, name):
    coeffs = np.asarray(coeffs, dtype=np.float64).ravel()
    if coeffs.size != k:
        raise ValueError(f"{name} has {coeffs.size} entries, model expects {k}")
    if not np.all(np.isfinite(coeffs)):
        raise ValueError(f"{name} contains non-finite values")
    return coeffs


def decode_geometry(model: MorphableModel, alpha, delta) -> np.ndarray:
    """Vertex positions ``(n_vertices, 3)`` for shape and expression codes.

    Each coefficient multiplies its basis column and that column's scale.
    """
    alpha = _check(alpha, model.k_shape, "alpha")
    delta = _check(delta, model.k_expr, "delta")
    mean = model.float64("mean_shape")
    if not alpha.any() and not delta.any():
        return mean.copy()
    offset = model.scaled_basis("shape") @ alpha + model.scaled_basis("expr") @ delta
    return mean + offset.reshape(-1, 3)


def decode_albedo(model: MorphableModel, gamma) -> np.ndarray:
    """Per-vertex RGB albedo. Not clamped: clamping happens after shading."""
    gamma = _check(gamma, model.k_albedo, "gamma")
    mean = model.float64("mean_albedo")
    if not gamma.any():
        return mean.copy()
    return mean + (model.scaled_basis("albedo") @ gamma).reshape(-1, 3)


def geometry_backward(model: MorphableModel, d_positions) -> tuple[np.ndarray, np.ndarray]:
    """Pull a gradient on vertex positions back to (alpha, delta)."""
    flat = np.asarray(d_positions, dtype=np.float64).reshape(-1)
    return model.scaled_basis("shape").T @ flat, model.scaled_basis("expr").T @ flat


def albedo_backward(model: MorphableModel, d_albedo) -> np.ndarray:
    return model.scaled_basis("albedo").T @ np.asarray(d_albedo, dtype=np.float64).reshape(-1)


def face_cross_products(positions, triangles) -> np.ndarray:
    p = np.asarray(positions, dtype=np.float64)
    v0, v1, v2 = p[triangles[:, 0]], p[triangles[:, 1]], p[triangles[:, 2]]
    return np.cross(v1 - v0, v2 - v0)


def scatter_add(index, values, n) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` bins given by ``index``."""
    index = np.asarray(index).ravel()
    values = np.asarray(values, dtype=np.float64)
    width = values.shape[-1] if values.ndim > 1 else 1
    values = values.reshape(len(index), width)
    out = np.empty((n, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(index, weights=values[:, c], minlength=n)
    return out


def _accumulate(triangles, per_face, n_vertices):
    return scatter_add(triangles.T.ravel(), np.tile(per_face, (3, 1)), n_vertices)


def vertex_normals(positions, triangles) -> np.ndarray:
    """Area-weighted vertex normals.

    Each face contributes its unnormalized cross product (twice its area
    times the unit normal). Vertices with no usable incident area get
    ``(0, 0, 1)``.
    """
    positions = np.asarray(positions, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    summed = _accumulate(triangles, face_cross_products(positions, triangles), len(positions))
    norm = np.linalg.norm(summed, axis=1)
    ok = norm > 0
    normals = np.zeros_like(summed)
    normals[:, 2] = 1.0
    normals[ok] = summed[ok] / norm[ok, None]
    return normals


def vertex_normals_backward(positions, triangles, d_normals) -> np.ndarray:
    """Vector-Jacobian product of :func:`vertex_normals` w.r.t. positions."""
    positions = np.asarray(positions, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    v0, v1, v2 = (positions[triangles[:, k]] for k in range(3))
    e1, e2 = v1 - v0, v2 - v0
    summed = _accumulate(triangles, np.cross(e1, e2), len(positions))
    norm = np.linalg.norm(summed, axis=1)
    ok = norm > 0
    d_summed = np.zeros_like(summed)
    n = summed[ok] / norm[ok, None]
    dn = d_normals[ok]
    d_summed[ok] = (dn - n * np.sum(n * dn, axis=1, keepdims=True)) / norm[ok, None]

    d_face = d_summed[triangles[:, 0]] + d_summed[triangles[:, 1]] + d_summed[triangles[:, 2]]
    # c = e1 x e2  =>  dL/de1 = e2 x dc,  dL/de2 = dc x e1
    d_e1 = np.cross(e2, d_face)
    d_e2 = np.cross(d_face, e1)
    return scatter_add(triangles.T.ravel(), np.concatenate([-(d_e1 + d_e2), d_e1, d_e2]),
                       len(positions))


def select_landmarks_3d(positions, landmark_indices) -> np.ndarray:
    positions = np.asarray(positions)
    idx = np.asarray(landmark_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(positions)):
        raise IndexError(f"landmark index out of range for {len(positions)} vertices")
    return positions[idx]
