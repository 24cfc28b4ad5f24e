"""Morphable model assets: the in-memory model, its binary container and a
procedural generator for synthetic face models.

Container layout (little-endian throughout)::

    b"FIGM"  u32 version=1
    u32 n_vertices, n_triangles, k_shape, k_expr, k_albedo, n_landmarks
    then, for each array in fixed order
        u32 name_length, name (ascii), u32 element_count, payload

Float arrays (``mean_shape, shape_basis, expr_basis, mean_albedo,
albedo_basis, basis_scales``) are stored as f32, row-major. Index arrays
(``triangles, landmark_indices``) are stored as u32. ``basis_scales`` holds the
per-column scales of the shape, expression and albedo bases concatenated.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FIGM"
VERSION = 1
_HEADER = struct.Struct("<4sI6I")

_FLOAT_ARRAYS = ("mean_shape", "shape_basis", "expr_basis", "mean_albedo",
                 "albedo_basis", "basis_scales")
_INDEX_ARRAYS = ("triangles", "landmark_indices")


class ModelFormatError(ValueError):
    """The file is not a well-formed model container."""


class ModelDimensionError(ModelFormatError):
    """Array sizes disagree with the header or with each other."""


class ModelIndexError(ModelFormatError):
    """A triangle or landmark index points outside the vertex range."""


@dataclass(frozen=True, eq=False)
class MorphableModel:
    """Linear face model.

    Bases are stored as ``(3 * n_vertices, K)`` matrices whose rows follow the
    flattened ``(n_vertices, 3)`` layout of ``mean_shape``. Arrays are float32
    so that saving and loading is bit-exact; computations upcast to float64.
    """

    mean_shape: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    mean_albedo: np.ndarray
    albedo_basis: np.ndarray
    shape_scales: np.ndarray
    expr_scales: np.ndarray
    albedo_scales: np.ndarray
    triangles: np.ndarray
    landmark_indices: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def k_shape(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def k_expr(self) -> int:
        return self.expr_basis.shape[1]

    @property
    def k_albedo(self) -> int:
        return self.albedo_basis.shape[1]

    @property
    def n_landmarks(self) -> int:
        return self.landmark_indices.shape[0]

    @property
    def basis_scales(self) -> np.ndarray:
        return np.concatenate([self.shape_scales, self.expr_scales, self.albedo_scales])

    def scaled_basis(self, name: str) -> np.ndarray:
        """Basis with its column scales folded in, as float64 (cached)."""
        key = "scaled_" + name
        if key not in self._cache:
            basis = getattr(self, name + "_basis").astype(np.float64)
            scales = getattr(self, name + "_scales").astype(np.float64)
            self._cache[key] = basis * scales[None, :]
        return self._cache[key]

    def float64(self, name: str) -> np.ndarray:
        key = "f64_" + name
        if key not in self._cache:
            self._cache[key] = getattr(self, name).astype(np.float64)
        return self._cache[key]

    def __eq__(self, other):
        if not isinstance(other, MorphableModel):
            return NotImplemented
        names = _FLOAT_ARRAYS[:-1] + ("shape_scales", "expr_scales", "albedo_scales") + _INDEX_ARRAYS
        return all(
            getattr(self, n).shape == getattr(other, n).shape
            and getattr(self, n).dtype == getattr(other, n).dtype
            and getattr(self, n).tobytes() == getattr(other, n).tobytes()
            for n in names
        )

    __hash__ = None


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" or "warning"
    message: str


def validate_model(model: MorphableModel) -> list[Diagnostic]:
    """Check every model invariant.

    Returns one entry per violation. Entries with severity ``"warning"``
    (duplicate landmarks) do not make the model invalid; see :func:`is_valid`.
    """
    report = []

    def err(msg):
        report.append(Diagnostic("error", msg))

    nv = model.mean_shape.shape[0] if model.mean_shape.ndim == 2 else -1
    if model.mean_shape.ndim != 2 or model.mean_shape.shape[1] != 3:
        err(f"mean_shape must be (n_vertices, 3), got {model.mean_shape.shape}")
        nv = model.mean_shape.size // 3
    if model.mean_albedo.shape != (nv, 3):
        err(f"mean_albedo must be ({nv}, 3), got {model.mean_albedo.shape}")
    for name in ("shape", "expr", "albedo"):
        basis = getattr(model, name + "_basis")
        scales = getattr(model, name + "_scales")
        if basis.ndim != 2 or basis.shape[0] != 3 * nv:
            err(f"{name}_basis must have {3 * nv} rows, got shape {basis.shape}")
        elif scales.shape != (basis.shape[1],):
            err(f"{name} scales length {scales.shape} does not match "
                f"{basis.shape[1]} basis columns")
    for name in _FLOAT_ARRAYS[:-1] + ("shape_scales", "expr_scales", "albedo_scales"):
        if not np.all(np.isfinite(getattr(model, name))):
            err(f"{name} contains non-finite values")
    albedo = model.mean_albedo
    if albedo.size and (albedo.min() < 0.0 or albedo.max() > 1.0):
        err("albedo out of range [0, 1]")
    tri = model.triangles
    if tri.ndim != 2 or tri.shape[1] != 3:
        err(f"triangles must be (n_triangles, 3), got {tri.shape}")
    elif tri.size and (tri.min() < 0 or tri.max() >= nv):
        err("triangle index out of range")
    lm = model.landmark_indices
    if lm.ndim != 1:
        err(f"landmark_indices must be 1-D, got {lm.shape}")
    elif lm.size:
        if lm.min() < 0 or lm.max() >= nv:
            err("landmark index out of range")
        if np.unique(lm).size != lm.size:
            report.append(Diagnostic("warning", "duplicate landmark indices"))
    return report


def is_valid(report: list[Diagnostic]) -> bool:
    return not any(d.severity == "error" for d in report)


def _raise_on(report: list[Diagnostic]) -> None:
    errors = [d.message for d in report if d.severity == "error"]
    if not errors:
        return
    if any("index out of range" in e for e in errors):
        raise ModelIndexError("; ".join(errors))
    raise ModelDimensionError("; ".join(errors))


def save_model(model: MorphableModel, path: str | os.PathLike) -> None:
    _raise_on(validate_model(model))
    header = _HEADER.pack(MAGIC, VERSION, model.n_vertices, model.n_triangles,
                          model.k_shape, model.k_expr, model.k_albedo, model.n_landmarks)
    chunks = [header]
    arrays = {
        "mean_shape": model.mean_shape, "shape_basis": model.shape_basis,
        "expr_basis": model.expr_basis, "mean_albedo": model.mean_albedo,
        "albedo_basis": model.albedo_basis, "basis_scales": model.basis_scales,
    }
    for name in _FLOAT_ARRAYS:
        chunks.append(_pack_array(name, np.ascontiguousarray(arrays[name], dtype="<f4")))
    chunks.append(_pack_array("triangles", np.ascontiguousarray(model.triangles, dtype="<u4")))
    chunks.append(_pack_array("landmark_indices",
                              np.ascontiguousarray(model.landmark_indices, dtype="<u4")))
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("ascii")
    return (struct.pack("<I", len(encoded)) + encoded
            + struct.pack("<I", arr.size) + arr.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self, expected_name: str, dtype: str) -> np.ndarray:
        name = self.take(self.u32()).decode("ascii", errors="replace")
        if name != expected_name:
            raise ModelFormatError(f"expected array {expected_name!r}, found {name!r}")
        count = self.u32()
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype=dtype).copy()


def read_named_arrays(data: bytes, offset: int, spec: list[tuple[str, str]]):
    """Parse consecutive named, count-prefixed arrays starting at ``offset``."""
    reader = _Reader(data)
    reader.pos = offset
    out = [reader.array(name, dtype) for name, dtype in spec]
    return out, reader.pos


def load_model(path: str | os.PathLike) -> MorphableModel:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise ModelFormatError("truncated header")
    magic, version, nv, nt, ks, ke, ka, nl = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    spec = [(n, "<f4") for n in _FLOAT_ARRAYS] + [(n, "<u4") for n in _INDEX_ARRAYS]
    arrays, end = read_named_arrays(data, _HEADER.size, spec)
    if end != len(data):
        raise ModelFormatError(f"{len(data) - end} trailing bytes")
    a = dict(zip(_FLOAT_ARRAYS + _INDEX_ARRAYS, arrays))
    expected = {
        "mean_shape": 3 * nv, "shape_basis": 3 * nv * ks, "expr_basis": 3 * nv * ke,
        "mean_albedo": 3 * nv, "albedo_basis": 3 * nv * ka, "basis_scales": ks + ke + ka,
        "triangles": 3 * nt, "landmark_indices": nl,
    }
    for name, count in expected.items():
        if a[name].size != count:
            raise ModelDimensionError(
                f"{name} has {a[name].size} elements, header implies {count}")
    scales = a["basis_scales"]
    model = MorphableModel(
        mean_shape=a["mean_shape"].reshape(nv, 3),
        shape_basis=a["shape_basis"].reshape(3 * nv, ks),
        expr_basis=a["expr_basis"].reshape(3 * nv, ke),
        mean_albedo=a["mean_albedo"].reshape(nv, 3),
        albedo_basis=a["albedo_basis"].reshape(3 * nv, ka),
        shape_scales=scales[:ks],
        expr_scales=scales[ks:ks + ke],
        albedo_scales=scales[ks + ke:],
        triangles=a["triangles"].astype(np.int64).reshape(nt, 3),
        landmark_indices=a["landmark_indices"].astype(np.int64),
    )
    _raise_on(validate_model(model))
    return model


# --------------------------------------------------------------------------
# Synthetic models


def _grid_mesh(n_grid: int) -> tuple[np.ndarray, np.ndarray]:
    """Face-like ellipsoid cap on an ``n_grid x n_grid`` lattice.

    Triangles are counter-clockwise seen from +z (towards the viewer).
    """
    t = np.linspace(-1.0, 1.0, n_grid)
    v, u = np.meshgrid(t, t, indexing="ij")
    lon = u * np.deg2rad(62.0)
    lat = v * np.deg2rad(65.0)
    x = 0.62 * np.cos(lat) * np.sin(lon)
    y = 0.80 * np.sin(lat)
    z = 0.55 * np.cos(lat) * np.cos(lon)
    # nose ridge and brow give the profile some relief
    z = z + 0.16 * np.exp(-(x ** 2 / 0.010 + (y + 0.05) ** 2 / 0.06))
    z = z + 0.05 * np.exp(-(x ** 2 / 0.12 + (y - 0.30) ** 2 / 0.004))
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    pts[:, 2] -= 0.5 * (pts[:, 2].max() + pts[:, 2].min())
    pts *= 0.95 / np.linalg.norm(pts, axis=1).max()

    idx = np.arange(n_grid * n_grid).reshape(n_grid, n_grid)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    # rows increase with y (up), columns with x (right)
    tris = np.stack([np.stack([a, b, d], 1), np.stack([a, d, c], 1)], 1)
    return pts, tris.reshape(-1, 3)


def _skin_albedo(pts: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    base = np.array([0.78, 0.57, 0.46])
    alb = np.tile(base, (len(pts), 1))

    def blob(cx, cy, sx, sy):
        return np.exp(-((x - cx) ** 2 / sx + (y - cy) ** 2 / sy))[:, None]

    eyes = blob(-0.22, 0.18, 0.012, 0.004) + blob(0.22, 0.18, 0.012, 0.004)
    brows = blob(-0.22, 0.32, 0.02, 0.002) + blob(0.22, 0.32, 0.02, 0.002)
    mouth = blob(0.0, -0.38, 0.03, 0.003)
    cheeks = blob(-0.3, -0.1, 0.02, 0.02) + blob(0.3, -0.1, 0.02, 0.02)
    alb = alb - 0.45 * eyes * np.array([1.0, 1.0, 0.9])
    alb = alb - 0.35 * brows * np.array([1.0, 1.1, 1.1])
    alb = alb + 0.12 * mouth * np.array([0.4, -1.0, -0.6])
    alb = alb + 0.06 * cheeks * np.array([0.5, -0.5, -0.4])
    alb = alb + 0.03 * np.sin(9.0 * x)[:, None] * np.cos(7.0 * y)[:, None]
    return np.clip(alb, 0.05, 0.9)


def farthest_point_sampling(points: np.ndarray, n: int) -> np.ndarray:
    """Greedy farthest-point subset, seeded at the point nearest the centroid."""
    n = min(n, len(points))
    first = int(np.argmin(np.linalg.norm(points - points.mean(0), axis=1)))
    chosen = [first]
    dist = np.linalg.norm(points - points[first], axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(chosen, dtype=np.int64)


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    # when cols > rows, full orthonormality is impossible; independent
    # orthonormal blocks are stacked side by side instead
    blocks = []
    remaining = cols
    while remaining > 0:
        k = min(rows, remaining)
        q, r = np.linalg.qr(rng.standard_normal((rows, k)))
        blocks.append(q * np.sign(np.diag(r))[None, :])
        remaining -= k
    return np.concatenate(blocks, axis=1)


def gen_synthetic_model(seed: int = 0, n_grid: int = 16, k_shape: int = 80,
                        k_expr: int = 64, k_albedo: int = 80,
                        n_landmarks: int = 68) -> MorphableModel:
    """Procedural face model, a pure function of its arguments.

    Basis columns are orthonormal, then scaled by ``0.05 / (1 + k)``; the same
    values are stored as the model's per-column scales.
    """
    if n_grid < 4:
        raise ValueError(f"n_grid must be >= 4, got {n_grid}")
    rng = np.random.default_rng(seed)
    pts, tris = _grid_mesh(n_grid)
    nv = len(pts)

    def basis(k):
        scales = (0.05 / (1.0 + np.arange(k))).astype(np.float32)
        cols = _orthonormal_columns(rng, 3 * nv, k) * scales.astype(np.float64)[None, :]
        return cols.astype(np.float32), scales

    shape_basis, shape_scales = basis(k_shape)
    expr_basis, expr_scales = basis(k_expr)
    albedo_basis, albedo_scales = basis(k_albedo)
    return MorphableModel(
        mean_shape=pts.astype(np.float32),
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        mean_albedo=_skin_albedo(pts).astype(np.float32),
        albedo_basis=albedo_basis,
        shape_scales=shape_scales,
        expr_scales=expr_scales,
        albedo_scales=albedo_scales,
        triangles=tris.astype(np.int64),
        landmark_indices=farthest_point_sampling(pts, n_landmarks),
    )
