"""Orthographic camera and second-order spherical-harmonics illumination.

Screen convention: ``x_pix = (nx + 1) / 2 * width`` and
``y_pix = (1 - ny) / 2 * height``, so the y axis points down and pixel
``(i, j)`` has its center at ``(j + 0.5, i + 0.5)``. Depth is the camera-space
z coordinate; larger values are nearer to the viewer.
"""
from __future__ import annotations

import numpy as np

from .params import LOG_SCALE, TX, TY

SH_C0 = 0.5 / np.sqrt(np.pi)
SH_C1 = np.sqrt(3.0 / (4.0 * np.pi))
SH_C2 = 0.5 * np.sqrt(15.0 / np.pi)
SH_C3 = 0.25 * np.sqrt(5.0 / np.pi)
SH_C4 = 0.25 * np.sqrt(15.0 / np.pi)


def _axis_rotations(pitch, yaw, roll):
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cr, sr = np.cos(roll), np.sin(roll)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sp, -cp], [0.0, cp, -sp]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drz = np.array([[-sr, -cr, 0.0], [cr, -sr, 0.0], [0.0, 0.0, 0.0]])
    return (rx, ry, rz), (drx, dry, drz)


def rotation_from_euler(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """``Rz(roll) @ Ry(yaw) @ Rx(pitch)``."""
    (rx, ry, rz), _ = _axis_rotations(pitch, yaw, roll)
    return rz @ ry @ rx


def rotation_jacobian(pitch, yaw, roll) -> np.ndarray:
    """``(3, 3, 3)`` stack of dR/dpitch, dR/dyaw, dR/droll."""
    (rx, ry, rz), (drx, dry, drz) = _axis_rotations(pitch, yaw, roll)
    return np.stack([rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx])


def _check_cam(cam):
    cam = np.asarray(cam, dtype=np.float64).ravel()
    if cam.size != 6:
        raise ValueError(f"cam must have 6 entries, got {cam.size}")
    if not np.all(np.isfinite(cam)):
        raise ValueError("cam contains non-finite values")
    return cam


def project(positions, cam, width: int, height: int) -> np.ndarray:
    """Screen vertices ``(n, 3)`` as columns ``x_pix, y_pix, depth``."""
    if width < 1 or height < 1:
        raise ValueError(f"image size must be positive, got {width}x{height}")
    cam = _check_cam(cam)
    rot = rotation_from_euler(*cam[:3])
    p = np.exp(cam[LOG_SCALE]) * (np.asarray(positions, dtype=np.float64) @ rot.T)
    out = np.empty_like(p)
    out[:, 0] = (p[:, 0] + cam[TX] + 1.0) * 0.5 * width
    out[:, 1] = (1.0 - p[:, 1] - cam[TY]) * 0.5 * height
    out[:, 2] = p[:, 2]
    return out


def project_backward(positions, cam, width, height, d_screen):
    """Gradients of ``sum(d_screen * project(...))`` w.r.t. positions and cam."""
    cam = _check_cam(cam)
    positions = np.asarray(positions, dtype=np.float64)
    d_screen = np.asarray(d_screen, dtype=np.float64).reshape(-1, 3)
    scale = np.exp(cam[LOG_SCALE])
    rot = rotation_from_euler(*cam[:3])
    dp = np.empty_like(d_screen)
    dp[:, 0] = d_screen[:, 0] * 0.5 * width
    dp[:, 1] = -d_screen[:, 1] * 0.5 * height
    dp[:, 2] = d_screen[:, 2]

    d_cam = np.zeros(6)
    d_cam[TX] = dp[:, 0].sum()
    d_cam[TY] = dp[:, 1].sum()
    d_rot = scale * (dp.T @ positions)
    d_cam[:3] = np.einsum("ij,kij->k", d_rot, rotation_jacobian(*cam[:3]))
    p = scale * (positions @ rot.T)
    d_cam[LOG_SCALE] = np.sum(dp * p)
    d_positions = scale * (dp @ rot)
    return d_positions, d_cam


def sh_basis(normal) -> np.ndarray:
    """Real SH bands 0-2 in the order
    ``[Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22]``; accepts ``(..., 3)``."""
    n = np.asarray(normal, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ], axis=-1)


def sh_basis_backward(normal, d_basis) -> np.ndarray:
    n = np.asarray(normal, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    g = np.asarray(d_basis, dtype=np.float64)
    dx = SH_C1 * g[..., 3] + SH_C2 * (y * g[..., 4] + z * g[..., 7]) + 2.0 * SH_C4 * x * g[..., 8]
    dy = SH_C1 * g[..., 1] + SH_C2 * (x * g[..., 4] + z * g[..., 5]) - 2.0 * SH_C4 * y * g[..., 8]
    dz = SH_C1 * g[..., 2] + SH_C2 * (y * g[..., 5] + x * g[..., 7]) + 6.0 * SH_C3 * z * g[..., 6]
    return np.stack([dx, dy, dz], axis=-1)


def phi_matrix(phi) -> np.ndarray:
    """``(3, 9)`` view of the channel-major illumination vector."""
    phi = np.asarray(phi, dtype=np.float64).ravel()
    if phi.size != 27:
        raise ValueError(f"phi must have 27 entries, got {phi.size}")
    return phi.reshape(3, 9)


def shade(albedo, normal, phi) -> np.ndarray:
    """Unclamped ``albedo * irradiance`` per channel; broadcasts over leading axes."""
    light = sh_basis(normal) @ phi_matrix(phi).T
    return np.asarray(albedo, dtype=np.float64) * light


def shade_backward(albedo, normal, phi, d_color):
    """Gradients of ``sum(d_color * shade(...))`` w.r.t. albedo, normal and phi."""
    albedo = np.asarray(albedo, dtype=np.float64)
    d_color = np.asarray(d_color, dtype=np.float64)
    coeffs = phi_matrix(phi)
    basis = sh_basis(normal)
    light = basis @ coeffs.T
    d_albedo = d_color * light
    d_light = d_color * albedo
    d_phi = (d_light.reshape(-1, 3).T @ basis.reshape(-1, 9)).ravel()
    d_normal = sh_basis_backward(normal, d_light @ coeffs)
    return d_albedo, d_normal, d_phi


def default_light() -> np.ndarray:
    """White frontal light: ambient 0.7 plus 0.3 along +z, slight +x bias."""
    band = np.zeros(9)
    band[0] = 0.7 / SH_C0
    band[2] = 0.3 / SH_C1
    band[3] = 0.08 / SH_C1
    return np.tile(band, 3)
