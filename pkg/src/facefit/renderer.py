"""Software rasterizer with analytic gradients.

Differentiation uses *frozen visibility*: the per-pixel triangle id and the
barycentric weights found by the forward pass are treated as constants.
Gradients reach the parameters only through the per-vertex attributes that
are interpolated with those fixed weights, i.e. albedo (``gamma``), rotated
normals (``alpha``, ``delta``, and the three rotation angles) and the
illumination ``phi``. The derivative of the barycentric weights with respect
to screen positions is deliberately excluded, so ``tx``, ``ty`` and
``log_scale`` receive no gradient from image-space losses; they are driven by
the landmark term instead. Pixels whose shaded value was clamped (below 0 or
above 1) pass no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assets import MorphableModel
from .decoder import (albedo_backward, decode_albedo, decode_geometry, geometry_backward,
                      scatter_add, vertex_normals, vertex_normals_backward)
from .params import BLOCKS, FaceParams, block_slices
from .scene import project, rotation_from_euler, rotation_jacobian, shade, shade_backward

NONE = -1


@dataclass
class RenderOutput:
    color: np.ndarray     # (H, W, 3) in [0, 1]
    coverage: np.ndarray  # (H, W) bool
    depth: np.ndarray     # (H, W), -inf where uncovered
    tri_id: np.ndarray    # (H, W) int, NONE where uncovered
    bary: np.ndarray      # (H, W, 3), zero where uncovered


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _top_left(dx, dy):
    # with y pointing down and the interior on the positive side of each edge
    return ((dy == 0) & (dx > 0)) | (dy < 0)


def rasterize(screen, triangles, width: int, height: int):
    """Hard z-buffer rasterization at pixel centers.

    A pixel center is covered by a triangle when it lies strictly inside, or
    exactly on an edge that is a top or left edge. Among covering triangles
    the greatest depth wins; equal depths go to the lower triangle index.
    Both windings are rasterized (no culling).

    Returns ``coverage, depth, tri_id, bary`` with shapes ``(H, W)``,
    ``(H, W)``, ``(H, W)`` and ``(H, W, 3)``.
    """
    width, height = int(width), int(height)
    if width < 1 or height < 1:
        raise ValueError(f"image size must be positive, got {width}x{height}")
    screen = np.asarray(screen, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    coverage = np.zeros((height, width), dtype=bool)
    depth = np.full((height, width), -np.inf)
    tri_id = np.full((height, width), NONE, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    if len(triangles) == 0:
        return coverage, depth, tri_id, bary

    v = screen[triangles]  # (T, 3 vertices, 3 coords)
    x, y = v[..., 0], v[..., 1]
    area = _edge(x[:, 0], y[:, 0], x[:, 1], y[:, 1], x[:, 2], y[:, 2])
    orient = np.sign(area)
    with np.errstate(invalid="ignore"):
        c0 = np.clip(np.ceil(x.min(1) - 0.5), 0, width)
        c1 = np.clip(np.floor(x.max(1) - 0.5), -1, width - 1)
        r0 = np.clip(np.ceil(y.min(1) - 0.5), 0, height)
        r1 = np.clip(np.floor(y.max(1) - 0.5), -1, height - 1)
    ok = (orient != 0) & np.isfinite(area)
    nx = np.where(ok, np.maximum(c1 - c0 + 1, 0), 0).astype(np.int64)
    ny = np.where(ok, np.maximum(r1 - r0 + 1, 0), 0).astype(np.int64)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return coverage, depth, tri_id, bary

    t = np.repeat(np.arange(len(triangles)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    col = c0[t].astype(np.int64) + local % nx[t]
    row = r0[t].astype(np.int64) + local // nx[t]
    px, py = col + 0.5, row + 0.5

    s = orient[t]
    inside = np.ones(total, dtype=bool)
    w = np.empty((3, total))
    # w[k] is the edge opposite vertex k, i.e. from vertex k+1 to vertex k+2
    for k in range(3):
        a, b = (k + 1) % 3, (k + 2) % 3
        ax, ay, bx, by = x[t, a], y[t, a], x[t, b], y[t, b]
        w[k] = s * _edge(ax, ay, bx, by, px, py)
        tl = _top_left(s * (bx - ax), s * (by - ay))
        inside &= (w[k] > 0) | ((w[k] == 0) & tl)
    if not inside.any():
        return coverage, depth, tri_id, bary
    t, col, row = t[inside], col[inside], row[inside]
    b = (w[:, inside] / (s[inside] * area[t])).T
    z = np.einsum("ij,ij->i", b, v[t, :, 2])

    pix = row * width + col
    order = np.lexsort((t, -z, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    rr, cc = row[win], col[win]
    coverage[rr, cc] = True
    depth[rr, cc] = z[win]
    tri_id[rr, cc] = t[win]
    bary[rr, cc] = b[win]
    return coverage, depth, tri_id, bary


@dataclass
class _ShadeState:
    positions: np.ndarray
    normals: np.ndarray
    rot: np.ndarray
    albedo: np.ndarray
    pix_rows: np.ndarray
    pix_cols: np.ndarray
    verts: np.ndarray       # (P, 3) vertex ids per covered pixel
    weights: np.ndarray     # (P, 3) barycentric weights
    pix_albedo: np.ndarray
    pix_normal: np.ndarray
    pix_norm: np.ndarray
    raw_color: np.ndarray   # unclamped
    extra: dict = field(default_factory=dict)


def _shade_pixels(model: MorphableModel, params: FaceParams, tri_id, bary, positions=None):
    if positions is None:
        positions = decode_geometry(model, params.alpha, params.delta)
    normals = vertex_normals(positions, model.triangles)
    rot = rotation_from_euler(*params.cam[:3])
    albedo = decode_albedo(model, params.gamma)
    rows, cols = np.nonzero(tri_id != NONE)
    verts = model.triangles[tri_id[rows, cols]]
    weights = bary[rows, cols]
    pa = np.einsum("pk,pkc->pc", weights, albedo[verts])
    pm = np.einsum("pk,pkc->pc", weights, normals[verts] @ rot.T)
    norm = np.linalg.norm(pm, axis=1)
    pn = np.zeros_like(pm)
    pn[:, 2] = 1.0
    good = norm > 0
    pn[good] = pm[good] / norm[good, None]
    raw = shade(pa, pn, params.phi)
    return _ShadeState(positions, normals, rot, albedo, rows, cols, verts, weights,
                       pa, pn, norm, raw)


def shade_visible(model: MorphableModel, params: FaceParams, tri_id, bary) -> np.ndarray:
    """Colour image for a fixed visibility assignment (clamped, black background).

    This is the function :func:`render_backward` differentiates.
    """
    st = _shade_pixels(model, params, tri_id, bary)
    color = np.zeros(tri_id.shape + (3,))
    color[st.pix_rows, st.pix_cols] = np.clip(st.raw_color, 0.0, 1.0)
    return color


def _render(model, params, width, height):
    positions = decode_geometry(model, params.alpha, params.delta)
    screen = project(positions, params.cam, width, height)
    coverage, depth, tri_id, bary = rasterize(screen, model.triangles, width, height)
    st = _shade_pixels(model, params, tri_id, bary, positions=positions)
    color = np.zeros((height, width, 3))
    color[st.pix_rows, st.pix_cols] = np.clip(st.raw_color, 0.0, 1.0)
    return RenderOutput(color, coverage, depth, tri_id, bary), st


def render(model: MorphableModel, params: FaceParams, width: int, height: int) -> RenderOutput:
    return _render(model, params, width, height)[0]


def _backward(model, params, st: _ShadeState, adjoint) -> np.ndarray:
    g = adjoint[st.pix_rows, st.pix_cols]
    g = np.where((st.raw_color >= 0.0) & (st.raw_color <= 1.0), g, 0.0)
    d_pa, d_pn, d_phi = shade_backward(st.pix_albedo, st.pix_normal, params.phi, g)

    d_pm = np.zeros_like(d_pn)
    good = st.pix_norm > 0
    n = st.pix_normal[good]
    dn = d_pn[good]
    d_pm[good] = (dn - n * np.sum(n * dn, axis=1, keepdims=True)) / st.pix_norm[good, None]

    nv = model.n_vertices
    idx = st.verts.ravel()
    d_albedo = scatter_add(idx, (st.weights[:, :, None] * d_pa[:, None, :]).reshape(-1, 3), nv)
    d_rnormals = scatter_add(idx, (st.weights[:, :, None] * d_pm[:, None, :]).reshape(-1, 3), nv)

    # rotated normals are normals @ rot.T
    d_normals = d_rnormals @ st.rot
    d_rot = d_rnormals.T @ st.normals
    d_angles = np.einsum("ij,kij->k", d_rot, rotation_jacobian(*params.cam[:3]))
    d_positions = vertex_normals_backward(st.positions, model.triangles, d_normals)
    d_alpha, d_delta = geometry_backward(model, d_positions)
    d_gamma = albedo_backward(model, d_albedo)
    d_cam = np.zeros(6)
    d_cam[:3] = d_angles
    return np.concatenate([d_alpha, d_delta, d_gamma, d_phi, d_cam])


def render_backward(model: MorphableModel, params: FaceParams, width: int, height: int,
                    adjoint_image) -> np.ndarray:
    """Gradient of ``sum(adjoint_image * render(...).color)`` w.r.t. the
    flattened parameter vector, under frozen visibility."""
    adjoint_image = np.asarray(adjoint_image, dtype=np.float64)
    if adjoint_image.shape != (height, width, 3):
        raise ValueError(f"adjoint must have shape {(height, width, 3)}, "
                         f"got {adjoint_image.shape}")
    _, st = _render(model, params, width, height)
    return _backward(model, params, st, adjoint_image)


class Renderer:
    """Forward pass that keeps its intermediates for one backward call."""

    def __init__(self, model: MorphableModel, width: int, height: int):
        self.model = model
        self.width = int(width)
        self.height = int(height)
        self._state = None
        self._params = None

    def forward(self, params: FaceParams) -> RenderOutput:
        out, self._state = _render(self.model, params, self.width, self.height)
        self._params = params
        return out

    def backward(self, adjoint_image) -> np.ndarray:
        if self._state is None:
            raise RuntimeError("backward called before forward")
        return _backward(self.model, self._params, self._state, adjoint_image)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class BlockCheck:
    block: str
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.all(self.rel_error <= self.tolerance))

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0


@dataclass
class GradcheckReport:
    blocks: list[BlockCheck]
    n_masked_pixels: int

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "masked_pixels": self.n_masked_pixels,
            "blocks": {b.block: {"max_rel_error": b.max_rel_error, "tolerance": b.tolerance,
                                 "passed": b.passed} for b in self.blocks},
        }


_GEOMETRIC = ("alpha", "delta", "cam")


def _dilate(mask):
    out = mask.copy()
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    return out


def occlusion_boundary(tri_id, triangles) -> np.ndarray:
    """Pixels with a 4-neighbour that is uncovered or shows a triangle
    sharing no vertex with their own (a silhouette or occlusion edge)."""
    tri_id = np.asarray(tri_id)
    triangles = np.asarray(triangles)
    h, w = tri_id.shape
    out = np.zeros((h, w), dtype=bool)
    covered = tri_id != NONE
    pairs = [((slice(None), slice(1, None)), (slice(None), slice(None, -1))),
             ((slice(1, None), slice(None)), (slice(None, -1), slice(None)))]
    for a, b in pairs:
        ta, tb = tri_id[a], tri_id[b]
        both = (ta != NONE) & (tb != NONE)
        va = triangles[np.where(both, ta, 0)]
        vb = triangles[np.where(both, tb, 0)]
        shared = (va[..., :, None] == vb[..., None, :]).any(axis=(-1, -2))
        cut = (covered[a] != covered[b]) | (both & ~shared)
        out[a] |= cut
        out[b] |= cut
    return out & covered


def relative_error(analytic, numeric, floor=1e-9):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradcheck(model: MorphableModel, params: FaceParams, width: int, height: int,
              blocks=BLOCKS, tolerance=1e-4, eps=1e-4, seed=0, floor=1e-9,
              boundary_margin=1) -> GradcheckReport:
    """Compare :func:`render_backward` with central differences.

    The scalar is ``sum(adjoint * color)`` for a random adjoint. Differences
    are taken of :func:`shade_visible` at the base pass's visibility, which is
    the function being differentiated. Pixels are excluded when a true
    re-render at ``+-eps`` changes their triangle id (geometric blocks only),
    when they lie within ``boundary_margin`` pixels of a triangle-id or
    coverage boundary, or when any evaluation is clamped. ``tolerance`` may be
    a float or a mapping block -> float.

    For the basis blocks the step is ``eps`` divided by the norm of the
    scaled basis column, so every coordinate moves the mesh or albedo by a
    comparable amount; the tiny high-order columns otherwise drown the
    difference in rounding error.
    """
    blocks = tuple(blocks)
    unknown = set(blocks) - set(BLOCKS)
    if unknown:
        raise ValueError(f"unknown blocks {sorted(unknown)}")
    tols = tolerance if isinstance(tolerance, dict) else {b: tolerance for b in blocks}
    rng = np.random.default_rng(seed)
    base = render(model, params, width, height)
    adjoint = rng.uniform(-1.0, 1.0, size=(height, width, 3))
    theta = params.to_vector()
    slices = block_slices(params.sizes)

    def at(vec):
        return FaceParams.from_vector(vec, params.sizes)

    # visibility-stable pixel mask
    keep = base.coverage.copy()
    if boundary_margin > 0:
        edge = occlusion_boundary(base.tri_id, model.triangles)
        for _ in range(boundary_margin - 1):
            edge = _dilate(edge)
        keep &= ~edge
    steps = np.full(theta.size, float(eps))
    for name in ("alpha", "delta", "gamma"):
        basis = model.scaled_basis({"alpha": "shape", "delta": "expr", "gamma": "albedo"}[name])
        col_norm = np.linalg.norm(basis, axis=0)
        steps[slices[name]] = eps / np.where(col_norm > 0, col_norm, 1.0)
    plans = []
    for name in blocks:
        for i in range(slices[name].start, slices[name].stop):
            plus, minus = theta.copy(), theta.copy()
            plus[i] += steps[i]
            minus[i] -= steps[i]
            plans.append((name, i, at(plus), at(minus)))
            if name in _GEOMETRIC:
                for p in (plans[-1][2], plans[-1][3]):
                    keep &= render(model, p, width, height).tri_id == base.tri_id
    st = _shade_pixels(model, params, base.tri_id, base.bary)
    raw_ok = np.zeros((height, width), dtype=bool)
    raw_ok[st.pix_rows, st.pix_cols] = np.all((st.raw_color > 0) & (st.raw_color < 1), axis=1)
    keep &= raw_ok
    evals = []
    for name, i, plus, minus in plans:
        fp = _shade_pixels(model, plus, base.tri_id, base.bary)
        fm = _shade_pixels(model, minus, base.tri_id, base.bary)
        for s in (fp, fm):
            ok = np.zeros((height, width), dtype=bool)
            ok[s.pix_rows, s.pix_cols] = np.all((s.raw_color > 0) & (s.raw_color < 1), axis=1)
            keep &= ok
        evals.append((name, i, fp, fm))

    masked = adjoint * keep[..., None]
    analytic = render_backward(model, params, width, height, masked)
    w = masked[st.pix_rows, st.pix_cols]
    results = {name: ([], [], []) for name in blocks}
    for name, i, fp, fm in evals:
        numeric = np.sum(w * (fp.raw_color - fm.raw_color)) / (2.0 * steps[i])
        results[name][0].append(i)
        results[name][1].append(analytic[i])
        results[name][2].append(numeric)
    checks = []
    for name in blocks:
        idx, a, n = (np.asarray(v) for v in results[name])
        checks.append(BlockCheck(name, idx - slices[name].start, a, n,
                                 relative_error(a, n, floor), float(tols[name])))
    return GradcheckReport(checks, int((~keep & base.coverage).sum()))
